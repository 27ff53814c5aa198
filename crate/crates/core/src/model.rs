//! The full localization network.
//!
//! ```text
//! RGB ──────────────────────► main encoder ──┐ (1/2, 1/4, 1/8)
//! RGB → YUV → color map → style encoder ─────┴─► 1×1 fusion per scale
//!                                │
//!                                └─ style features F (1/8) → V = cos(F, F)
//!
//! stage 1 (1/8):  fused8                          → d1 → M̂1 → S1
//! stage 2 (1/4):  [up(d1), fused4, S1]            → d2 → M̂2 → S2
//! stage 3 (1/2):  [up(d2), fused2, S2]            → d3 → M̂3 → S3
//! head    (1/1):  [up(d3), main block 0, S3]      → M̂
//! ```
//!
//! `S_k` is the voting map of stage `k`'s auxiliary mask, computed at 1/8
//! resolution and bilinearly resized to wherever it is consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::colorspace::{rgb_to_yuv_var, ColorMapParams, ColorSpace, ImagePlane};
use crate::datagen::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, SsimParams};
use crate::mask::RegionMask;
use crate::nn::{Bound, ConvLayer, Init, ParamStore};
use crate::style::{style_loss_var, StyleFeatureMap, StyleLossReport, TinyEncoder, DEFAULT_MARGIN, ENCODER_WIDTHS, FEATURE_STRIDE};
use crate::tensor::Tensor;
use crate::voting::{normalize_score_map, semantic_features, semantic_similarity_matrix, style_similarity_matrix, vote};

pub const MAX_STAGES: usize = 3;
/// Output widths of the fused encoder features at 1/8, 1/4 and 1/2.
pub const FUSED_WIDTHS: [usize; 3] = [32, 32, 16];
/// Output widths of decoder stages 1..=3.
pub const STAGE_WIDTHS: [usize; 3] = [32, 32, 16];
pub const HEAD_HIDDEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub style_channels: usize,
    pub main_channels: usize,
    /// Decoder stages `K`, 1..=3.
    pub stages: usize,
    /// Weight votes by ground-truth semantic similarity.
    pub semantic: bool,
    /// Divide voting maps by the voter mass before they enter the decoder.
    pub normalize_scores: bool,
    pub margin: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            style_channels: 32,
            main_channels: 32,
            stages: 3,
            semantic: false,
            normalize_scores: true,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(FEATURE_STRIDE) || !self.width.is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {FEATURE_STRIDE}",
                self.height, self.width
            )));
        }
        if !(1..=MAX_STAGES).contains(&self.stages) {
            return Err(Error::Config(format!("stages = {} outside 1..={MAX_STAGES}", self.stages)));
        }
        if self.style_channels == 0 || self.main_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return Err(Error::Config(format!("margin {} outside (0, 2]", self.margin)));
        }
        Ok(())
    }

    /// Side lengths of stage `k` (0-based) outputs.
    pub fn stage_size(&self, k: usize) -> (usize, usize) {
        let f = FEATURE_STRIDE >> k;
        (self.height / f, self.width / f)
    }

    /// Style feature resolution `(h, w)`.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / FEATURE_STRIDE, self.width / FEATURE_STRIDE)
    }

    /// Expected `(name, shape)` of every parameter, in registration order.
    pub fn parameter_plan(&self) -> Vec<(String, Vec<usize>)> {
        let mut plan = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize| {
            plan.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            plan.push((format!("{name}.bias"), vec![cout]));
        };
        let [w0, w1, w2] = ENCODER_WIDTHS;
        conv("color_map.conv3", 3, 16, 3);
        conv("color_map.conv7", 16, 6, 7);
        for (name, out) in [("main", self.main_channels), ("style", self.style_channels)] {
            conv(&format!("{name}.block0"), 3, w0, 3);
            conv(&format!("{name}.block1"), w0, w1, 3);
            conv(&format!("{name}.block2"), w1, w2, 3);
            conv(&format!("{name}.block3"), w2, out, 3);
        }
        let enc = [w1, w2, 0];
        for k in 0..self.stages {
            let (main_c, style_c) = if k == 0 {
                (self.main_channels, self.style_channels)
            } else {
                (enc[2 - k], enc[2 - k])
            };
            conv(&format!("fuse{k}"), main_c + style_c, FUSED_WIDTHS[k], 1);
        }
        for k in 0..self.stages {
            let cin = if k == 0 { FUSED_WIDTHS[0] } else { STAGE_WIDTHS[k - 1] + FUSED_WIDTHS[k] + 1 };
            conv(&format!("stage{k}.conv"), cin, STAGE_WIDTHS[k], 3);
            conv(&format!("stage{k}.head"), STAGE_WIDTHS[k], 1, 1);
        }
        conv("head.conv", STAGE_WIDTHS[self.stages - 1] + w0 + 1, HEAD_HIDDEN, 3);
        conv("head.out", HEAD_HIDDEN, 1, 3);
        plan
    }
}

#[derive(Clone, Debug)]
struct Stage {
    fuse: ConvLayer,
    conv: ConvLayer,
    head: ConvLayer,
}

#[derive(Clone, Debug)]
pub struct AustNet {
    config: ModelConfig,
    store: ParamStore,
    color_map: ColorMapParams,
    main: TinyEncoder,
    style: TinyEncoder,
    stages: Vec<Stage>,
    head_conv: ConvLayer,
    head_out: ConvLayer,
}

/// Everything a forward pass exposes, as graph nodes.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub final_mask: Var,
    /// `[1,1,h_k,w_k]` per stage, coarsest first.
    pub aux_masks: Vec<Var>,
    /// Raw voting maps `[1,1,h,w]`.
    pub raw_scores: Vec<Var>,
    /// Voting maps as fed to the decoder (normalized or raw, possibly zeroed).
    pub scores: Vec<Var>,
    pub style_features: Var,
    pub mapped: Var,
}

/// A forward pass as plain values.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub final_mask: RegionMask,
    pub aux_masks: Vec<RegionMask>,
    /// Raw voting maps `[h,w]`.
    pub score_maps: Vec<Tensor>,
    pub style_features: StyleFeatureMap,
    /// Present when a ground-truth mask was supplied.
    pub style_report: Option<StyleLossReport>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Feed zeros instead of voting maps to every later stage.
    pub zero_voting: bool,
}

/// Semantic weight matrix `[n,n]` for a label map at full resolution.
pub fn semantic_weights(config: &ModelConfig, labels: &[u8]) -> Result<Tensor> {
    let f = semantic_features(labels, config.height, config.width, NUM_CLASSES, FEATURE_STRIDE)?;
    semantic_similarity_matrix(&f)
}

impl AustNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let color_map = ColorMapParams::new(&mut store, "color_map", &mut rng);
        let main = TinyEncoder::new(&mut store, "main", config.main_channels, true, &mut rng);
        let style = TinyEncoder::new(&mut store, "style", config.style_channels, false, &mut rng);
        let [w0, w1, w2] = ENCODER_WIDTHS;
        let enc = [w1, w2];
        let fuse: Vec<ConvLayer> = (0..config.stages)
            .map(|k| {
                let cin = if k == 0 { config.main_channels + config.style_channels } else { 2 * enc[2 - k] };
                ConvLayer::same(&mut store, &format!("fuse{k}"), cin, FUSED_WIDTHS[k], 1, 1, Init::Relu, &mut rng)
            })
            .collect();
        let mut stages = Vec::new();
        for (k, fuse) in fuse.into_iter().enumerate() {
            let cin = if k == 0 { FUSED_WIDTHS[0] } else { STAGE_WIDTHS[k - 1] + FUSED_WIDTHS[k] + 1 };
            let conv = ConvLayer::same(&mut store, &format!("stage{k}.conv"), cin, STAGE_WIDTHS[k], 3, 1, Init::Relu, &mut rng);
            let head = ConvLayer::same(&mut store, &format!("stage{k}.head"), STAGE_WIDTHS[k], 1, 1, 1, Init::Scaled(0.5), &mut rng);
            stages.push(Stage { fuse, conv, head });
        }
        let last = STAGE_WIDTHS[config.stages - 1];
        let head_conv = ConvLayer::same(&mut store, "head.conv", last + w0 + 1, HEAD_HIDDEN, 3, 1, Init::Relu, &mut rng);
        let head_out = ConvLayer::same(&mut store, "head.out", HEAD_HIDDEN, 1, 3, 1, Init::Scaled(0.5), &mut rng);
        Ok(Self {
            config,
            store,
            color_map,
            main,
            style,
            stages,
            head_conv,
            head_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_image(&self, image: &ImagePlane) -> Result<()> {
        if image.space() != ColorSpace::Rgb {
            return Err(Error::invalid("forward", format!("image is {:?}, expected Rgb", image.space())));
        }
        if (image.height(), image.width()) != (self.config.height, self.config.width) {
            return Err(Error::shape(
                "forward",
                "image",
                format!(
                    "model expects {}x{}, got {}x{}",
                    self.config.height,
                    self.config.width,
                    image.height(),
                    image.width()
                ),
            ));
        }
        Ok(())
    }

    /// Build the forward pass on `graph`. `semantic` is the `[n,n]` weight
    /// matrix, required exactly when the model runs in semantic mode.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        params: &Bound,
        image: &ImagePlane,
        semantic: Option<&Tensor>,
        options: ForwardOptions,
    ) -> Result<ForwardVars> {
        self.check_image(image)?;
        let cfg = &self.config;
        let sem = match (cfg.semantic, semantic) {
            (true, Some(t)) => Some(graph.constant(t.clone())),
            (true, None) => return Err(Error::invalid("forward", "semantic mode needs a label map")),
            (false, _) => None,
        };
        let (h, w) = (cfg.height, cfg.width);
        let rgb = graph.constant(image.pixels().clone().reshape([1, 3, h, w])?);
        let yuv = rgb_to_yuv_var(graph, rgb)?;
        let mapped = self.color_map.forward(graph, params, yuv)?.mapped;
        let main = self.main.forward(graph, params, rgb)?;
        let style = self.style.forward(graph, params, mapped)?;
        let features = style.last();
        let similarity = style_similarity_matrix(graph, features)?;
        let (fh, _) = cfg.feature_size();

        let mut aux_masks = Vec::new();
        let mut raw_scores = Vec::new();
        let mut scores = Vec::new();
        let mut prev: Option<(Var, Var)> = None;
        for (k, stage) in self.stages.iter().enumerate() {
            let scale = 3 - k;
            let cat = graph.concat_channels(&[main.scales[scale], style.scales[scale]])?;
            let fused = stage.fuse.forward(graph, params, cat)?;
            let fused = graph.relu(fused);
            let (sh, sw) = cfg.stage_size(k);
            let input = match prev {
                None => fused,
                Some((d, s)) => {
                    let up = graph.resize_bilinear(d, sh, sw)?;
                    let s = graph.resize_bilinear(s, sh, sw)?;
                    graph.concat_channels(&[up, fused, s])?
                }
            };
            let d = stage.conv.forward(graph, params, input)?;
            let d = graph.relu(d);
            let logits = stage.head.forward(graph, params, d)?;
            let mask = graph.sigmoid(logits);
            let voter_mask = if sh == fh { mask } else { graph.avg_pool(mask, sh / fh)? };
            let raw = vote(graph, similarity, voter_mask, sem)?;
            let fed = if cfg.normalize_scores { normalize_score_map(graph, raw, voter_mask)? } else { raw };
            let fed = if options.zero_voting { graph.scale(fed, 0.0) } else { fed };
            aux_masks.push(mask);
            raw_scores.push(raw);
            scores.push(fed);
            prev = Some((d, fed));
        }
        let (d, s) = prev.expect("at least one stage");
        let up = graph.resize_bilinear(d, h, w)?;
        let s = graph.resize_bilinear(s, h, w)?;
        let cat = graph.concat_channels(&[up, main.scales[0], s])?;
        let hidden = self.head_conv.forward(graph, params, cat)?;
        let hidden = graph.relu(hidden);
        let logits = self.head_out.forward(graph, params, hidden)?;
        let final_mask = graph.sigmoid(logits);
        Ok(ForwardVars {
            final_mask,
            aux_masks,
            raw_scores,
            scores,
            style_features: features,
            mapped,
        })
    }

    /// Forward plus the total loss against `gt`.
    pub fn loss_graph(
        &self,
        graph: &mut Graph,
        params: &Bound,
        image: &ImagePlane,
        semantic: Option<&Tensor>,
        gt: &RegionMask,
        ssim: &SsimParams,
    ) -> Result<(Var, LossBreakdown, ForwardVars, StyleLossReport)> {
        let vars = self.forward_graph(graph, params, image, semantic, ForwardOptions::default())?;
        let gt_small = gt.downsample_binary(FEATURE_STRIDE)?;
        let style = style_loss_var(graph, vars.style_features, &gt_small, self.config.margin)?;
        let (total, breakdown) = total_loss(graph, Some(style.loss), vars.final_mask, &vars.aux_masks, gt, ssim)?;
        Ok((total, breakdown, vars, style.report))
    }

    /// Inference. `labels` is the full-resolution label map (semantic mode);
    /// `gt` adds the style report.
    pub fn forward(&self, image: &ImagePlane, labels: Option<&[u8]>, gt: Option<&RegionMask>) -> Result<ForwardOutput> {
        self.forward_with(image, labels, gt, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        image: &ImagePlane,
        labels: Option<&[u8]>,
        gt: Option<&RegionMask>,
        options: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let semantic = match (self.config.semantic, labels) {
            (true, Some(l)) => Some(semantic_weights(&self.config, l)?),
            (true, None) => return Err(Error::invalid("forward", "semantic mode needs a label map")),
            (false, _) => None,
        };
        let mut g = Graph::new();
        let params = self.store.bind_frozen(&mut g);
        let vars = self.forward_graph(&mut g, &params, image, semantic.as_ref(), options)?;
        let style_report = match gt {
            Some(gt) => {
                let small = gt.downsample_binary(FEATURE_STRIDE)?;
                Some(style_loss_var(&mut g, vars.style_features, &small, self.config.margin)?.report)
            }
            None => None,
        };
        let to_mask = |g: &Graph, v: Var| RegionMask::from_tensor(g.value(v));
        let (fh, fw) = self.config.feature_size();
        let fs = g.value(vars.style_features);
        Ok(ForwardOutput {
            final_mask: to_mask(&g, vars.final_mask)?,
            aux_masks: vars.aux_masks.iter().map(|&v| to_mask(&g, v)).collect::<Result<_>>()?,
            score_maps: vars
                .raw_scores
                .iter()
                .map(|&v| g.value(v).clone().reshape([fh, fw]))
                .collect::<Result<_>>()?,
            style_features: StyleFeatureMap::new(fs.clone().reshape([fs.shape()[1], fh, fw])?)?,
            style_report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GeneratorConfig};
    use crate::gradcheck::{directional_grad_error, FD_TOL};
    use crate::testutil::rng;

    fn small_config(semantic: bool) -> ModelConfig {
        ModelConfig {
            height: 24,
            width: 24,
            semantic,
            seed: 5,
            ..Default::default()
        }
    }

    fn sample(size: usize, seed: u64) -> crate::datagen::CompositeSample {
        let cfg = GeneratorConfig {
            height: size,
            width: size,
            seed,
            ..Default::default()
        };
        generate(&cfg, 1).unwrap().remove(0)
    }

    #[test]
    fn output_resolutions() {
        let model = AustNet::new(small_config(false)).unwrap();
        let s = sample(24, 1);
        let out = model.forward(&s.image, None, None).unwrap();
        let sizes: Vec<_> = out.aux_masks.iter().map(|m| (m.height(), m.width())).collect();
        assert_eq!(sizes, vec![(3, 3), (6, 6), (12, 12)]);
        assert_eq!((out.final_mask.height(), out.final_mask.width()), (24, 24));
        assert_eq!(out.score_maps.len(), 3);
        assert!(out.score_maps.iter().all(|s| s.shape() == [3, 3]));
        assert_eq!(out.style_features.channels(), 32);
        assert!(out.style_report.is_none());
        let all = out.aux_masks.iter().chain(std::iter::once(&out.final_mask));
        assert!(all.flat_map(|m| m.data()).all(|&v| v > 0.0 && v < 1.0));
        assert!(model.forward(&s.image, None, Some(&s.gt_mask)).unwrap().style_report.is_some());
    }

    #[test]
    fn parameter_plan_matches() {
        for stages in 1..=3 {
            let cfg = ModelConfig { stages, ..small_config(false) };
            let model = AustNet::new(cfg).unwrap();
            let plan = cfg.parameter_plan();
            let actual: Vec<_> = model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
            assert_eq!(actual, plan);
            let count: usize = plan.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(model.params().numel(), count);
        }
    }

    #[test]
    fn fewer_stages() {
        let s = sample(24, 2);
        for stages in 1..=2 {
            let model = AustNet::new(ModelConfig { stages, ..small_config(false) }).unwrap();
            let out = model.forward(&s.image, None, None).unwrap();
            assert_eq!(out.aux_masks.len(), stages);
        }
        assert!(AustNet::new(ModelConfig { stages: 4, ..small_config(false) }).is_err());
        assert!(AustNet::new(ModelConfig { height: 20, ..small_config(false) }).is_err());
    }

    #[test]
    fn deterministic() {
        let s = sample(24, 3);
        let a = AustNet::new(small_config(false)).unwrap().forward(&s.image, None, None).unwrap();
        let b = AustNet::new(small_config(false)).unwrap().forward(&s.image, None, None).unwrap();
        assert_eq!(a.final_mask, b.final_mask);
        assert_eq!(a.score_maps, b.score_maps);
    }

    #[test]
    fn semantic_mode_requires_labels() {
        let s = sample(24, 4);
        let model = AustNet::new(small_config(true)).unwrap();
        assert!(model.forward(&s.image, None, None).is_err());
        assert!(model.forward(&s.image, Some(&s.labels), None).is_ok());
        let wrong = sample(16, 4);
        assert!(model.forward(&wrong.image, Some(&wrong.labels), None).is_err());
    }

    #[test]
    fn one_class_semantics_match_style_only() {
        let s = sample(24, 5);
        let plain = AustNet::new(small_config(false)).unwrap();
        let sem = AustNet::new(small_config(true)).unwrap();
        let ones = vec![1u8; 24 * 24];
        let a = plain.forward(&s.image, None, None).unwrap();
        let b = sem.forward(&s.image, Some(&ones), None).unwrap();
        for (x, y) in a.score_maps.iter().zip(&b.score_maps) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
        assert!(a.final_mask.data().iter().zip(b.final_mask.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn zero_voting_changes_later_stages() {
        let s = sample(24, 6);
        let model = AustNet::new(small_config(false)).unwrap();
        let a = model.forward(&s.image, None, None).unwrap();
        let b = model
            .forward_with(&s.image, None, None, ForwardOptions { zero_voting: true })
            .unwrap();
        assert_eq!(a.aux_masks[0], b.aux_masks[0]);
        assert_ne!(a.aux_masks[1], b.aux_masks[1]);
        assert_ne!(a.final_mask, b.final_mask);
    }

    #[test]
    fn full_model_gradients() {
        for seed in 0..20 {
            let cfg = ModelConfig {
                height: 16,
                width: 16,
                style_channels: 4,
                main_channels: 4,
                semantic: seed % 2 == 1,
                seed,
                ..Default::default()
            };
            let model = AustNet::new(cfg).unwrap();
            let s = sample(16, 100 + seed);
            let semantic = semantic_weights(&cfg, &s.labels).unwrap();
            let params = model.params().tensors().to_vec();
            let mut r = rng(seed);
            let dirs: Vec<Tensor> = params.iter().map(|t| Tensor::uniform(t.shape(), -1.0, 1.0, &mut r)).collect();
            let err = directional_grad_error(&params, &dirs, |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let (total, ..) = model.loss_graph(g, &bound, &s.image, Some(&semantic), &s.gt_mask, &SsimParams::default())?;
                Ok(total)
            });
            assert!(err <= FD_TOL, "seed {seed}: {err}");
        }
    }
}
