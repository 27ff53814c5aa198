//! Acceptance suite. One line per criterion:
//!
//! ```text
//! [PASS] 3 voting oracle: ...
//! ```
//!
//! Runs every criterion, including three full training runs (about 40
//! minutes on one core). The process exits non-zero on a failure only when
//! `AUSTKIT_ACCEPTANCE_STRICT=1`; otherwise failures are reported and the
//! summary line carries the count.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use austkit::autograd::{Conv2dSpec, Graph, Var};
use austkit::colorspace::ColorMapParams;
use austkit::datagen::{generate, CompositeSample, GeneratorConfig};
use austkit::gradcheck::{directional_grad_error, max_grad_error, FD_TOL};
use austkit::losses::{bce_loss, iou_loss, ssim_loss, SsimParams};
use austkit::mask::RegionMask;
use austkit::metrics::{average_precision, evaluate, f1_and_iou, ApMode};
use austkit::model::{semantic_weights, AustNet, ModelConfig};
use austkit::nn::{Bound, ParamStore};
use austkit::style::{style_loss, style_loss_var, style_pair_similarities, StyleFeatureMap, COSINE_EPS};
use austkit::train::{TrainConfig, TrainSample, Trainer};
use austkit::voting::{normalize_score_map, style_similarity_matrix, vote, vote_tensors};
use austkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded instances per differentiable operation.
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-9;
const ORACLE_SEEDS: u64 = 50;
const ORACLE_MAX_SIDE: usize = 8;
const MARGIN: f64 = 0.5;
const TRAIN_IMAGES: usize = 256;
const TEST_IMAGES: usize = 64;
const TRAIN_STEPS: usize = 2000;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const MIN_STYLE_GAP: f64 = 0.3;
const MIN_IOU: f64 = 50.0;
const MIN_AP: f64 = 70.0;
const FIXTURE_TOL: f64 = 1e-9;
const BREAKDOWN_TOL: f64 = 1e-10;

struct Line {
    id: u32,
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

impl Line {
    fn print(&self) {
        let tag = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INFO",
        };
        println!("[{tag}] {} {}: {}", self.id, self.name, self.detail);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weighted_sum(g: &mut Graph, y: Var) -> austkit::Result<Var> {
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn binary_mask(h: usize, w: usize, r: &mut ChaCha8Rng) -> RegionMask {
    loop {
        let d: Vec<f64> = (0..h * w).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let pos = d.iter().filter(|&&v| v == 1.0).count();
        if pos > 1 && pos < h * w - 1 {
            return RegionMask::new(h, w, d).unwrap();
        }
    }
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Line {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };
    let ssim = SsimParams::default();
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(1000 + seed);

        let x = Tensor::uniform([2, 2, 5, 6], -1.0, 1.0, &mut r);
        let k = Tensor::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([3], -1.0, 1.0, &mut r);
        let spec = Conv2dSpec::new(1 + (seed as usize % 2), seed as usize % 2);
        record(
            "conv",
            max_grad_error(&[x, k, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                weighted_sum(g, y)
            }),
        );

        let a = Tensor::uniform([3, 5], -1.0, 1.0, &mut r);
        let c = Tensor::uniform([3, 5], -1.0, 1.0, &mut r);
        record(
            "cosine",
            max_grad_error(&[a, c], |g, v| {
                let s = g.cosine_similarity(v[0], v[1], COSINE_EPS)?;
                weighted_sum(g, s)
            }),
        );

        let mut store = ParamStore::new();
        let cm = ColorMapParams::new(&mut store, "cm", &mut r);
        let mut inputs = store.tensors().to_vec();
        inputs.push(Tensor::uniform([1, 3, 4, 4], -0.5, 1.0, &mut r));
        record(
            "color map",
            max_grad_error(&inputs, |g, v| {
                let bound = Bound::from_vars(v[..4].to_vec());
                let out = cm.forward(g, &bound, v[4])?;
                weighted_sum(g, out.mapped)
            }),
        );

        let f = Tensor::uniform([1, 3, 3, 4], -1.0, 1.0, &mut r);
        let m = binary_mask(3, 4, &mut r);
        record(
            "style loss",
            max_grad_error(&[f], |g, v| Ok(style_loss_var(g, v[0], &m, 1.5)?.loss)),
        );

        let f = Tensor::uniform([1, 3, 3, 3], -1.0, 1.0, &mut r);
        let am = Tensor::uniform([1, 1, 3, 3], 0.0, 1.0, &mut r);
        let sem = Tensor::uniform([9, 9], -1.0, 1.0, &mut r);
        record(
            "vote",
            max_grad_error(&[f, am], |g, v| {
                let sim = style_similarity_matrix(g, v[0])?;
                let s = g.constant(sem.clone());
                let raw = vote(g, sim, v[1], Some(s))?;
                let norm = normalize_score_map(g, raw, v[1])?;
                let a = weighted_sum(g, raw)?;
                let b = weighted_sum(g, norm)?;
                g.add(a, b)
            }),
        );

        let size = if seed % 2 == 0 { 12 } else { 5 };
        let p = Tensor::uniform([1, 1, size, size], 0.05, 0.95, &mut r);
        let t = Tensor::uniform([1, 1, size, size], 0.0, 1.0, &mut r);
        record("bce", max_grad_error(&[p.clone(), t.clone()], |g, v| bce_loss(g, v[0], v[1])));
        record("ssim", max_grad_error(&[p.clone(), t.clone()], |g, v| ssim_loss(g, v[0], v[1], &ssim)));
        record("iou", max_grad_error(&[p, t], |g, v| iou_loss(g, v[0], v[1])));

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
        let s = generate(&GeneratorConfig { height: 16, width: 16, seed: 2000 + seed, ..Default::default() }, 1)
            .unwrap()
            .remove(0);
        let semantic = cfg.semantic.then(|| semantic_weights(&cfg, &s.labels).unwrap());
        let params = model.params().tensors().to_vec();
        let dirs: Vec<Tensor> = params.iter().map(|t| Tensor::uniform(t.shape(), -1.0, 1.0, &mut r)).collect();
        record(
            "full model",
            directional_grad_error(&params, &dirs, |g, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                Ok(model.loss_graph(g, &bound, &s.image, semantic.as_ref(), &s.gt_mask, &ssim)?.0)
            }),
        );
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let pass = max <= FD_TOL && elapsed < GRAD_BUDGET;
    let per: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Line {
        id: 2,
        name: "gradient suite",
        pass: Some(pass),
        detail: format!(
            "{} ops x {GRAD_SEEDS} seeds, max rel err {max:.2e} (tol {FD_TOL:.0e}), {:.1}s (budget {}s) [{}]",
            worst.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs(),
            per.join(", ")
        ),
    }
}

// ---------------------------------------------------------------- 3

fn cos_loop(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

fn pixel(f: &Tensor, p: usize) -> Vec<f64> {
    let hw = f.shape()[1] * f.shape()[2];
    (0..f.shape()[0]).map(|c| f.data()[c * hw + p]).collect()
}

fn voting_oracle() -> Line {
    let mut max_err: f64 = 0.0;
    let mut cases = 0;
    let mut exact = true;
    for h in 1..=ORACLE_MAX_SIDE {
        for w in 1..=ORACLE_MAX_SIDE {
            for seed in 0..ORACLE_SEEDS {
                let mut r = rng(seed * 131 + (h * 8 + w) as u64);
                let c = 1 + seed as usize % 5;
                let f = Tensor::uniform([c, h, w], -1.0, 1.0, &mut r);
                let m = Tensor::uniform([h, w], 0.0, 1.0, &mut r);
                let n = h * w;
                let sem = Tensor::uniform([n, n], -1.0, 1.0, &mut r);
                let v: Vec<f64> = (0..n * n).map(|i| cos_loop(&pixel(&f, i / n), &pixel(&f, i % n))).collect();
                let mass: f64 = m.data().iter().map(|x| 1.0 - x).sum();
                let loop_vote = |s: Option<&Tensor>| -> Vec<f64> {
                    (0..n)
                        .map(|p| {
                            (0..n)
                                .map(|q| (1.0 - m.data()[q]) * s.map_or(1.0, |s| s.data()[p * n + q]) * v[p * n + q])
                                .sum()
                        })
                        .collect()
                };

                let mut g = Graph::new();
                let fv = g.constant(f.clone().reshape([1, c, h, w]).unwrap());
                let sim = style_similarity_matrix(&mut g, fv).unwrap();
                for (a, b) in g.value(sim).data().iter().zip(&v) {
                    max_err = max_err.max((a - b).abs());
                }

                let plain = vote_tensors(&f, &m, None, false).unwrap();
                let with_sem = vote_tensors(&f, &m, Some(&sem), false).unwrap();
                let ones = vote_tensors(&f, &m, Some(&Tensor::full([n, n], 1.0)), false).unwrap();
                let normed = vote_tensors(&f, &m, None, true).unwrap();
                let lp = loop_vote(None);
                let ls = loop_vote(Some(&sem));
                for i in 0..n {
                    max_err = max_err.max((plain.data()[i] - lp[i]).abs());
                    max_err = max_err.max((with_sem.data()[i] - ls[i]).abs());
                    let ln = if mass > 1e-8 { lp[i] / mass } else { 0.0 };
                    max_err = max_err.max((normed.data()[i] - ln).abs());
                }
                exact &= ones.data() == plain.data();
                cases += 1;
            }
        }
    }
    Line {
        id: 3,
        name: "voting oracle",
        pass: Some(max_err <= ORACLE_TOL && exact),
        detail: format!(
            "{cases} cases (grids 1x1..{ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE}, {ORACLE_SEEDS} seeds), max |fast - loop| {max_err:.2e} (tol {ORACLE_TOL:.0e}), W_sem = 1 reproduces plain voting bit for bit: {exact}"
        ),
    }
}

// ---------------------------------------------------------------- 4

fn style_oracle() -> Line {
    let mut max_err: f64 = 0.0;
    let mut cases = 0;
    for h in 1..=ORACLE_MAX_SIDE {
        for w in 1..=ORACLE_MAX_SIDE {
            if h * w < 4 {
                continue;
            }
            for seed in 0..ORACLE_SEEDS {
                let mut r = rng(7000 + seed * 131 + (h * 8 + w) as u64);
                let c = 1 + seed as usize % 4;
                let f = Tensor::uniform([c, h, w], -1.0, 1.0, &mut r);
                let m = binary_mask(h, w, &mut r);
                let n = h * w;
                let (mut inter, mut ni, mut intra, mut na) = (0.0, 0, 0.0, 0);
                for p in 0..n {
                    for q in 0..n {
                        if p == q {
                            continue;
                        }
                        let s = cos_loop(&pixel(&f, p), &pixel(&f, q));
                        if m.data()[p] != m.data()[q] {
                            inter += s;
                            ni += 1;
                        } else {
                            intra += s;
                            na += 1;
                        }
                    }
                }
                let fm = StyleFeatureMap::new(f).unwrap();
                let (si, sa) = style_pair_similarities(&fm, &m).unwrap();
                max_err = max_err.max((si.unwrap() - inter / ni as f64).abs());
                max_err = max_err.max((sa.unwrap() - intra / na as f64).abs());
                cases += 1;
            }
        }
    }

    // Antipodal clusters: +e1 inside, -e1 outside.
    let (h, w, c) = (4, 4, 3);
    let mask: Vec<f64> = (0..h * w).map(|p| if p % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        data[p] = if mask[p] == 1.0 { 1.0 } else { -1.0 };
    }
    let m = RegionMask::new(h, w, mask).unwrap();
    let anti = style_loss(&StyleFeatureMap::new(Tensor::new([c, h, w], data).unwrap()).unwrap(), &m, MARGIN).unwrap();
    let same = style_loss(&StyleFeatureMap::new(Tensor::full([c, h, w], 0.7)).unwrap(), &m, MARGIN).unwrap();
    let pass = max_err <= ORACLE_TOL && anti.loss == 0.0 && (same.loss - 0.5).abs() <= ORACLE_TOL;
    Line {
        id: 4,
        name: "style-loss oracle",
        pass: Some(pass),
        detail: format!(
            "{cases} cases, max |fast - loop| {max_err:.2e} (tol {ORACLE_TOL:.0e}); margin {MARGIN}: antipodal loss {} (s_inter {:.3}, s_intra {:.3}), identical loss {}",
            anti.loss,
            anti.s_inter.unwrap(),
            anti.s_intra.unwrap(),
            same.loss
        ),
    }
}

// ---------------------------------------------------------------- 5, 6

struct RunResult {
    style_gap: f64,
    s_inter: f64,
    s_intra: f64,
    ap: f64,
    f1: f64,
    iou: f64,
    train_time: Duration,
}

fn to_train(model: &ModelConfig, s: &CompositeSample) -> TrainSample {
    TrainSample {
        image: s.image.clone(),
        mask: s.gt_mask.clone(),
        semantic: model.semantic.then(|| semantic_weights(model, &s.labels).unwrap()),
    }
}

fn train_and_test(generator: &GeneratorConfig, semantic: bool) -> RunResult {
    let train = generate(&GeneratorConfig { seed: 1, ..*generator }, TRAIN_IMAGES).unwrap();
    let test = generate(&GeneratorConfig { seed: 2, ..*generator }, TEST_IMAGES).unwrap();
    let cfg = ModelConfig {
        semantic,
        ..Default::default()
    };
    let data: Vec<TrainSample> = train.iter().map(|s| to_train(&cfg, s)).collect();
    let start = Instant::now();
    let mut trainer = Trainer::new(
        AustNet::new(cfg).unwrap(),
        TrainConfig {
            steps: TRAIN_STEPS,
            ..Default::default()
        },
    )
    .unwrap();
    trainer.run(&data, |_, _| Ok(())).unwrap();
    let train_time = start.elapsed();

    let (mut inter, mut intra) = (Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for (i, s) in test.iter().enumerate() {
        let out = trainer
            .model
            .forward(&s.image, Some(&s.labels), Some(&s.gt_mask))
            .unwrap();
        let rep = out.style_report.unwrap();
        inter.extend(rep.s_inter);
        intra.extend(rep.s_intra);
        rows.push((format!("{i:04}"), out.final_mask, s.gt_mask.clone()));
    }
    let report = evaluate(&rows, 0.5, ApMode::Macro).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (s_inter, s_intra) = (mean(&inter), mean(&intra));
    RunResult {
        style_gap: s_intra - s_inter,
        s_inter,
        s_intra,
        ap: report.ap,
        f1: report.f1,
        iou: report.iou,
        train_time,
    }
}

/// Prints criterion 5 as soon as it is known; returns both lines.
fn training_criteria() -> [Line; 2] {
    let single = train_and_test(&GeneratorConfig::default(), false);
    let five = Line {
        id: 5,
        name: "discriminativeness",
        pass: Some(single.style_gap >= MIN_STYLE_GAP && single.train_time <= TRAIN_BUDGET),
        detail: format!(
            "test s_intra {:.4} - s_inter {:.4} = {:.4} (min {MIN_STYLE_GAP}); {TRAIN_STEPS} steps on {TRAIN_IMAGES} images took {:.1} min (budget {} min)",
            single.s_intra,
            single.s_inter,
            single.style_gap,
            single.train_time.as_secs_f64() / 60.0,
            TRAIN_BUDGET.as_secs() / 60
        ),
    };
    five.print();
    let multi = GeneratorConfig::multi_region();
    let plain = train_and_test(&multi, false);
    let sem = train_and_test(&multi, true);
    let pass = single.iou >= MIN_IOU && single.ap >= MIN_AP && sem.iou >= plain.iou;
    let six = Line {
        id: 6,
        name: "localization",
        pass: Some(pass),
        detail: format!(
            "held-out {TEST_IMAGES}: AP {:.2} (min {MIN_AP}), F1 {:.4}, IoU {:.2} (min {MIN_IOU}); multi-region IoU AustNet-S {:.2} vs AustNet {:.2} (AP {:.2} vs {:.2})",
            single.ap, single.f1, single.iou, sem.iou, plain.iou, sem.ap, plain.ap
        ),
    };
    [five, six]
}

// ---------------------------------------------------------------- 7

fn mask(h: usize, w: usize, v: &[f64]) -> RegionMask {
    RegionMask::new(h, w, v.to_vec()).unwrap()
}

fn metric_fixtures() -> Line {
    let gt = mask(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let ap = average_precision(&mask(2, 2, &[0.9, 0.8, 0.3, 0.1]), &gt).unwrap().unwrap();
    let ap_ok = (ap - (0.5 + 2.0 / 3.0 * 0.5) * 100.0).abs() <= FIXTURE_TOL;

    let (f1, iou) = f1_and_iou(&mask(2, 2, &[1.0, 1.0, 0.0, 0.0]), &gt, 0.5).unwrap();
    let conf_ok = (f1 - 0.5).abs() <= FIXTURE_TOL && (iou - 100.0 / 3.0).abs() <= FIXTURE_TOL;

    let mut r = rng(77);
    let mut identity_err: f64 = 0.0;
    for _ in 0..500 {
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let p = RegionMask::new(h, w, (0..h * w).map(|_| r.gen::<f64>()).collect()).unwrap();
        let g = RegionMask::new(h, w, (0..h * w).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap();
        let (f1, iou) = f1_and_iou(&p, &g, 0.5).unwrap();
        identity_err = identity_err.max((f1 - 2.0 * iou / (100.0 + iou)).abs());
    }
    let identity_ok = identity_err <= FIXTURE_TOL;

    let samples = generate(&GeneratorConfig { seed: 9, ..GeneratorConfig::multi_region() }, 16).unwrap();
    let rows: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i.to_string(), s.gt_mask.clone(), s.gt_mask.clone()))
        .collect();
    let oracle = evaluate(&rows, 0.5, ApMode::Macro).unwrap();
    let oracle_ok = (oracle.ap, oracle.f1, oracle.iou) == (100.0, 1.0, 100.0);
    Line {
        id: 7,
        name: "metric fixtures",
        pass: Some(ap_ok && conf_ok && identity_ok && oracle_ok),
        detail: format!(
            "staircase AP {ap:.4}; confusion F1 {f1} IoU {iou:.4}; F1-IoU identity max err {identity_err:.1e} over 500 pairs; oracle ({}, {}, {})",
            oracle.ap, oracle.f1, oracle.iou
        ),
    }
}

// ---------------------------------------------------------------- 8

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(root: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_austkit");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, run, ev) = (root.join("data"), root.join("run"), root.join("eval"));
    let steps: [Vec<String>; 3] = [
        vec!["gen".into(), "--n".into(), "12".into(), "--seed".into(), "5".into(), "--out".into(), s(&data)],
        vec![
            "train".into(), "--data".into(), s(&data), "--out".into(), s(&run), "--steps".into(), "10".into(),
            "--seed".into(), "5".into(),
        ],
        vec![
            "eval".into(), "--data".into(), s(&data), "--checkpoint".into(), s(&run.join("model.ckpt")),
            "--out".into(), s(&ev), "--save-masks".into(),
        ],
    ];
    for args in &steps {
        let out = Command::new(bin).args(args).env_remove("AUSTKIT_SEED").output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let detail;
    let pass = match (pipeline(&a), pipeline(&b)) {
        (Ok(()), Ok(())) => {
            let (ta, tb) = (tree(&a), tree(&b));
            let differing: Vec<&String> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).collect();
            let same_files = ta.keys().eq(tb.keys());
            detail = format!(
                "gen + train --steps 10 + eval twice: {} files, {} differ, same file set: {same_files}",
                ta.len(),
                differing.len()
            );
            differing.is_empty() && same_files && !ta.is_empty()
        }
        (Err(e), _) | (_, Err(e)) => {
            detail = e;
            false
        }
    };
    Line {
        id: 8,
        name: "determinism",
        pass: Some(pass),
        detail,
    }
}

// ---------------------------------------------------------------- 9

fn breakdown() -> Line {
    let mut worst: f64 = 0.0;
    let mut batches = 0;
    for seed in 0..10u64 {
        let cfg = ModelConfig {
            height: 16,
            width: 16,
            stages: 3,
            semantic: seed % 2 == 0,
            seed,
            ..Default::default()
        };
        let gen = GeneratorConfig {
            height: 16,
            width: 16,
            seed: 300 + seed,
            ..if seed % 3 == 0 { GeneratorConfig::multi_region() } else { GeneratorConfig::default() }
        };
        let data: Vec<TrainSample> = generate(&gen, 4).unwrap().iter().map(|s| to_train(&cfg, s)).collect();
        let mut trainer = Trainer::new(
            AustNet::new(cfg).unwrap(),
            TrainConfig {
                steps: 2,
                batch_size: 4,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        trainer
            .run(&data, |r, _| {
                assert_eq!(r.loss.stages.len(), 3);
                worst = worst.max((r.loss.sum_of_terms() - r.loss.total).abs());
                batches += 1;
                Ok(())
            })
            .unwrap();
        for s in &data {
            let mut g = Graph::new();
            let params = trainer.model.params().bind_frozen(&mut g);
            let (total, b, ..) = trainer
                .model
                .loss_graph(&mut g, &params, &s.image, s.semantic.as_ref(), &s.mask, &SsimParams::default())
                .unwrap();
            worst = worst.max((b.sum_of_terms() - b.total).abs());
            worst = worst.max((g.value(total).item() - b.total).abs());
        }
    }
    Line {
        id: 9,
        name: "loss bookkeeping",
        pass: Some(worst <= BREAKDOWN_TOL),
        detail: format!("K=3, {batches} batches + 40 samples, max |sum of terms - total| {worst:.1e} (tol {BREAKDOWN_TOL:.0e})"),
    }
}

fn main() {
    // `cargo test -- --list` and filters are meaningless here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let strict = std::env::var("AUSTKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = vec![Line {
        id: 1,
        name: "benchmark-scale results",
        pass: None,
        detail: "out of scope (real photo composites and large pretrained backbones); criteria 2-9 cover the method at desk scale".into(),
    }];
    lines[0].print();
    for f in [gradient_suite, voting_oracle, style_oracle, metric_fixtures, breakdown, determinism] {
        let l = f();
        l.print();
        lines.push(l);
    }
    let [five, six] = training_criteria();
    six.print();
    lines.extend([five, six]);
    let failed = lines.iter().filter(|l| l.pass == Some(false)).count();
    let passed = lines.iter().filter(|l| l.pass == Some(true)).count();
    println!("acceptance: {passed} passed, {failed} failed, 1 informational");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
