//! Adam with cosine annealing over mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Augment;
use crate::autograd::Graph;
use crate::colorspace::ImagePlane;
use crate::datagen::sample_seed;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, MaskTerms, SsimParams};
use crate::mask::RegionMask;
use crate::model::AustNet;
use crate::tensor::Tensor;

/// Keeps augmentation draws independent of the shuffling stream.
const AUGMENT_STREAM: u64 = 0x5eed_a06e_17a7_1015;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Random flips, transposition and channel order per sample and step.
    pub augment: bool,
    /// Shuffling and augmentation seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr.max(self.min_lr)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("need 0 <= beta < 1 and adam_eps > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to `min` at step `total`.
pub fn cosine_lr(base: f64, min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr + cfg.weight_decay * *x;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One training example. `semantic` is the `[n,n]` weight matrix used in
/// semantic mode.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: ImagePlane,
    pub mask: RegionMask,
    pub semantic: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    /// Batch means of every loss term.
    pub loss: LossBreakdown,
    /// Batch means over samples where the similarity is defined.
    pub s_inter: Option<f64>,
    pub s_intra: Option<f64>,
}

struct SampleResult {
    grads: Vec<Tensor>,
    loss: LossBreakdown,
    s_inter: Option<f64>,
    s_intra: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_breakdown(all: &[LossBreakdown]) -> LossBreakdown {
    let n = all.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> MaskTerms| MaskTerms {
        bce: all.iter().map(|b| f(b).bce).sum::<f64>() / n,
        ssim: all.iter().map(|b| f(b).ssim).sum::<f64>() / n,
        iou: all.iter().map(|b| f(b).iou).sum::<f64>() / n,
    };
    let stages = (0..all[0].stages.len()).map(|k| avg(&|b| b.stages[k])).collect();
    LossBreakdown {
        style: all.iter().map(|b| b.style).sum::<f64>() / n,
        final_mask: avg(&|b| b.final_mask),
        stages,
        total: all.iter().map(|b| b.total).sum::<f64>() / n,
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &AustNet, sample: &TrainSample, ssim: &SsimParams, step: usize) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let r = sample_pass(model, sample, ssim, step)?;
    Ok((r.grads, r.loss))
}

fn sample_pass(model: &AustNet, sample: &TrainSample, ssim: &SsimParams, step: usize) -> Result<SampleResult> {
    let mut g = Graph::new();
    let params = model.params().bind(&mut g);
    let (total, loss, _, report) = model.loss_graph(&mut g, &params, &sample.image, sample.semantic.as_ref(), &sample.mask, ssim)?;
    if let Some(bad) = g.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: g.describe(bad),
            step,
        });
    }
    let grads = g.backward(total)?;
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    let grads: Vec<Tensor> = params
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    if let Some(i) = grads.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {}", names[i]),
            step,
        });
    }
    Ok(SampleResult {
        grads,
        loss,
        s_inter: report.s_inter,
        s_intra: report.s_intra,
    })
}

pub struct Trainer {
    pub model: AustNet,
    pub config: TrainConfig,
    pub ssim: SsimParams,
    adam: Adam,
    step: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: AustNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params().tensors());
        Ok(Self {
            model,
            config,
            ssim: SsimParams::default(),
            adam,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// One update on `batch`, with gradients summed in batch order.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let model = &self.model;
        let ssim = &self.ssim;
        let step = self.step;
        let cfg = &self.config;
        let results: Vec<SampleResult> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                if !cfg.augment {
                    return sample_pass(model, s, ssim, step);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ AUGMENT_STREAM, (step * batch.len() + i) as u64));
                let square = s.image.height() == s.image.width();
                let s = Augment::sample(&mut rng, square).apply(s)?;
                sample_pass(model, &s, ssim, step)
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        let lr = cosine_lr(self.config.lr, self.config.min_lr, step, self.config.steps);
        self.adam
            .update(self.model.params_mut().tensors_mut(), &grads, lr, &self.config);
        self.step += 1;
        let losses: Vec<LossBreakdown> = results.iter().map(|r| r.loss.clone()).collect();
        Ok(StepReport {
            step,
            lr,
            loss: mean_breakdown(&losses),
            s_inter: mean_of(results.iter().map(|r| r.s_inter)),
            s_intra: mean_of(results.iter().map(|r| r.s_intra)),
        })
    }

    /// Next mini-batch indices from a reshuffled pass over `n` samples.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size.min(n) {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Train for the configured number of steps; `on_step` sees every report.
    pub fn run(&mut self, data: &[TrainSample], mut on_step: impl FnMut(&StepReport, &AustNet) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("train", "no training samples"));
        }
        while self.step < self.config.steps {
            let idx = self.next_batch(data.len());
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &data[i]).collect();
            let report = self.train_step(&batch)?;
            on_step(&report, &self.model)?;
        }
        Ok(())
    }
}
