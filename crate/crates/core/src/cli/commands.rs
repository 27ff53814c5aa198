use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{self, EvalRun, GenRun, InspectRun, TrainRun};
use super::{init_threads, Cli, Command, EvalArgs, GenArgs, InspectArgs, PredictArgs, TrainArgs};
use crate::checkpoint;
use crate::colorspace::ImagePlane;
use crate::datagen::{generate, GeneratorConfig};
use crate::dataset::{write_dataset, Dataset, LoadedSample};
use crate::error::{Error, Result};
use crate::imageio;
use crate::losses::LossBreakdown;
use crate::mask::RegionMask;
use crate::metrics::evaluate;
use crate::model::{semantic_weights, AustNet, ForwardOptions, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{StepReport, TrainSample, Trainer};

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
pub const REPORT: &str = "report.txt";
pub const PER_IMAGE: &str = "per_image.csv";
pub const RANGES: &str = "ranges.txt";

pub(super) fn dispatch(cli: Cli) -> Result<()> {
    init_threads(cli.jobs)?;
    let file = cli.config.as_deref();
    match cli.command {
        Command::Gen(a) => gen(a, file),
        Command::Train(a) => train(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Predict(a) => predict(a),
        Command::Inspect(a) => inspect(a, file),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen(a: GenArgs, file: Option<&Path>) -> Result<()> {
    let section = config::load_section(file, "gen")?;
    let mut run: GenRun = config::layer(section, config::env_seed()?, &[&["generator", "seed"]])?;
    if let Some(n) = a.n {
        run.n = n;
    }
    if let Some(s) = a.seed {
        run.generator.seed = s;
    }
    if let Some((lo, hi)) = a.regions {
        if hi > 1 {
            let multi = GeneratorConfig::multi_region();
            run.generator.min_distractors = multi.min_distractors;
            run.generator.max_distractors = multi.max_distractors;
        }
        run.generator.min_regions = lo;
        run.generator.max_regions = hi;
    }
    if let Some((h, w)) = a.size {
        run.generator.height = h;
        run.generator.width = w;
    }
    if run.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let samples = generate(&run.generator, run.n)?;
    create_dir(&a.out)?;
    write_dataset(&a.out, &samples)?;
    config::write_snapshot(&a.out, "gen", &run)?;
    let warned = samples.iter().filter(|s| s.meta.warning).count();
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    if warned > 0 {
        println!("{warned} samples fell back to a forced color shift (flagged in the manifest)");
    }
    Ok(())
}

/// All samples, checked to share one size.
fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let ds = Dataset::open(dir)?;
    let samples = ds.load_all()?;
    let (h, w) = (samples[0].image.height(), samples[0].image.width());
    if let Some(s) = samples.iter().find(|s| (s.image.height(), s.image.width()) != (h, w)) {
        return Err(Error::Manifest {
            path: dir.join(crate::dataset::MANIFEST),
            detail: format!("sample {} is {}x{}, expected {h}x{w}", s.id, s.image.height(), s.image.width()),
        });
    }
    Ok(samples)
}

fn check_size(config: &ModelConfig, image: &ImagePlane, what: &str) -> Result<()> {
    if (image.height(), image.width()) != (config.height, config.width) {
        return Err(Error::Config(format!(
            "{what} is {}x{} but the model expects {}x{}",
            image.height(),
            image.width(),
            config.height,
            config.width
        )));
    }
    Ok(())
}

fn loss_header(stages: usize) -> String {
    let mut s = String::from("step,lr,total,style,final_bce,final_ssim,final_iou");
    for k in 1..=stages {
        let _ = write!(s, ",stage{k}_bce,stage{k}_ssim,stage{k}_iou");
    }
    s.push_str(",s_inter,s_intra");
    s
}

fn loss_row(r: &StepReport) -> String {
    let LossBreakdown {
        style,
        final_mask: f,
        stages,
        total,
    } = &r.loss;
    let mut s = format!("{},{},{},{},{},{},{}", r.step, r.lr, total, style, f.bce, f.ssim, f.iou);
    for t in stages {
        let _ = write!(s, ",{},{},{}", t.bce, t.ssim, t.iou);
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let _ = write!(s, ",{},{}", opt(r.s_inter), opt(r.s_intra));
    s
}

fn train(a: TrainArgs, file: Option<&Path>) -> Result<()> {
    let section = config::load_section(file, "train")?;
    let mut run: TrainRun = config::layer(section, config::env_seed()?, &[&["model", "seed"], &["optim", "seed"]])?;
    if let Some(v) = a.steps {
        run.optim.steps = v;
    }
    if let Some(v) = a.batch_size {
        run.optim.batch_size = v;
    }
    if let Some(v) = a.lr {
        run.optim.lr = v;
    }
    if let Some(v) = a.seed {
        run.model.seed = v;
        run.optim.seed = v;
    }
    if a.semantic {
        run.model.semantic = true;
    }
    if let Some(v) = a.stages {
        run.model.stages = v;
    }
    if let Some(v) = a.checkpoint_every {
        run.checkpoint_every = v;
    }
    if let Some(v) = a.n {
        if v == 0 {
            return Err(Error::Config("--n must be at least 1".into()));
        }
        run.limit = v;
    }

    let mut samples = load_dataset(&a.data)?;
    if run.limit > 0 {
        samples.truncate(run.limit);
    }
    run.model.height = samples[0].image.height();
    run.model.width = samples[0].image.width();
    run.optim.validate()?;
    let model = AustNet::new(run.model)?;
    let data: Vec<TrainSample> = samples
        .into_par_iter()
        .map(|s| {
            let semantic = match run.model.semantic {
                true => Some(semantic_weights(&run.model, &s.labels)?),
                false => None,
            };
            Ok(TrainSample {
                image: s.image,
                mask: s.mask,
                semantic,
            })
        })
        .collect::<Result<_>>()?;

    create_dir(&a.out)?;
    config::write_snapshot(&a.out, "train", &run)?;
    let log_path = a.out.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{}", loss_header(run.model.stages)).map_err(io)?;
    let ckpt_dir = a.out.join("checkpoints");
    if run.checkpoint_every > 0 && run.optim.steps > 0 {
        create_dir(&ckpt_dir)?;
    }

    let steps = run.optim.steps;
    let mut trainer = Trainer::new(model, run.optim)?;
    trainer.run(&data, |r, model| {
        writeln!(log, "{}", loss_row(r)).map_err(io)?;
        let done = r.step + 1;
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 {
            log.flush().map_err(io)?;
            checkpoint::save(&ckpt_dir.join(format!("step_{done:06}.ckpt")), model)?;
        }
        if done % 100 == 0 || done == steps {
            eprintln!("step {done}/{steps} loss {:.4}", r.loss.total);
        }
        Ok(())
    })?;
    log.flush().map_err(io)?;
    checkpoint::save(&a.out.join(FINAL_CHECKPOINT), &trainer.model)?;
    println!("wrote {}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn eval(a: EvalArgs, file: Option<&Path>) -> Result<()> {
    let section = config::load_section(file, "eval")?;
    let mut run: EvalRun = config::layer(section, None, &[])?;
    if let Some(t) = a.threshold {
        run.threshold = t;
    }
    if let Some(m) = a.ap_mode {
        run.ap_mode = m;
    }
    if !(0.0..=1.0).contains(&run.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", run.threshold)));
    }
    let samples = load_dataset(&a.data)?;
    let model = match &a.checkpoint {
        Some(p) if !a.oracle => Some(checkpoint::load(p)?),
        _ => None,
    };
    if let Some(m) = &model {
        check_size(m.config(), &samples[0].image, "the dataset")?;
    }
    let rows: Vec<(String, RegionMask, RegionMask)> = samples
        .par_iter()
        .map(|s| {
            let pred = match &model {
                Some(m) => m.forward(&s.image, Some(&s.labels), None)?.final_mask,
                None => s.mask.clone(),
            };
            Ok((s.id.clone(), pred, s.mask.clone()))
        })
        .collect::<Result<_>>()?;
    let report = evaluate(&rows, run.threshold, run.ap_mode)?;

    create_dir(&a.out)?;
    config::write_snapshot(&a.out, "eval", &run)?;
    write_file(&a.out.join(REPORT), &report.to_text())?;
    write_file(&a.out.join(PER_IMAGE), &report.to_csv())?;
    if a.save_masks {
        let dir = a.out.join("masks");
        create_dir(&dir)?;
        rows.par_iter()
            .try_for_each(|(id, pred, _)| imageio::save_mask(&dir.join(format!("{id}.png")), pred))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn load_labels(path: Option<&Path>, image: &ImagePlane, model: &AustNet) -> Result<Option<Vec<u8>>> {
    let Some(path) = path else {
        if model.config().semantic {
            return Err(Error::Config("this checkpoint uses semantic voting; pass --labels".into()));
        }
        return Ok(None);
    };
    let (w, h, bytes) = imageio::load_gray(path)?;
    if (h, w) != (image.height(), image.width()) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            detail: format!("labels are {h}x{w}, image is {}x{}", image.height(), image.width()),
        });
    }
    Ok(Some(bytes))
}

/// What a checkpoint-only command ran with.
#[derive(Serialize)]
struct ModelSnapshot<'a, T: Serialize> {
    #[serde(flatten)]
    run: &'a T,
    model: &'a ModelConfig,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn predict(a: PredictArgs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.images.len() {
        return Err(Error::Config(format!(
            "{} --labels for {} --image",
            a.labels.len(),
            a.images.len()
        )));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let outputs: Vec<(PathBuf, RegionMask)> = a
        .images
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let image = imageio::load_rgb(path)?;
            check_size(model.config(), &image, &path.display().to_string())?;
            let labels = load_labels(a.labels.get(i).map(PathBuf::as_path), &image, &model)?;
            let mask = model.forward(&image, labels.as_deref(), None)?.final_mask;
            Ok((path.clone(), mask))
        })
        .collect::<Result<_>>()?;
    create_dir(&a.out)?;
    let mut seen = std::collections::HashSet::new();
    for (path, mask) in &outputs {
        let name = format!("{}_mask.png", stem(path));
        if !seen.insert(name.clone()) {
            return Err(Error::Config(format!("two inputs would both write {name}")));
        }
        imageio::save_mask(&a.out.join(&name), mask)?;
        println!("{}", a.out.join(&name).display());
    }
    #[derive(Serialize)]
    struct Empty {}
    let snap = ModelSnapshot {
        run: &Empty {},
        model: model.config(),
    };
    config::write_snapshot(&a.out, "predict", &snap)
}

/// Values mapped linearly onto `[0, 1]`; a constant map becomes zeros.
fn min_max(values: &[f64]) -> (f64, f64, Vec<f64>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    (lo, hi, scaled)
}

fn inspect(a: InspectArgs, file: Option<&Path>) -> Result<()> {
    let section = config::load_section(file, "inspect")?;
    let mut run: InspectRun = config::layer(section, None, &[])?;
    if a.zero_voting {
        run.zero_voting = true;
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let image = imageio::load_rgb(&a.image)?;
    check_size(model.config(), &image, &a.image.display().to_string())?;
    let labels = load_labels(a.labels.as_deref(), &image, &model)?;
    let out = model.forward_with(
        &image,
        labels.as_deref(),
        None,
        ForwardOptions {
            zero_voting: run.zero_voting,
        },
    )?;

    create_dir(&a.out)?;
    let mut ranges = String::from("# file min max scaling\n");
    let mut dump = |name: String, t: &Tensor| -> Result<()> {
        let (h, w) = (t.shape()[t.shape().len() - 2], t.shape()[t.shape().len() - 1]);
        let (lo, hi, scaled) = min_max(t.data());
        imageio::save_mask(&a.out.join(&name), &RegionMask::new(h, w, scaled)?)?;
        let _ = writeln!(ranges, "{name} {lo} {hi} minmax");
        Ok(())
    };
    for (k, (score, mask)) in out.score_maps.iter().zip(&out.aux_masks).enumerate() {
        dump(format!("stage{}_score.png", k + 1), score)?;
        dump(format!("stage{}_mask.png", k + 1), &mask.to_tensor())?;
    }
    let f = out.final_mask.data();
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    imageio::save_mask(&a.out.join("final_mask.png"), &out.final_mask)?;
    let _ = writeln!(ranges, "final_mask.png {lo} {hi} identity");
    write_file(&a.out.join(RANGES), &ranges)?;
    config::write_snapshot(
        &a.out,
        "inspect",
        &ModelSnapshot {
            run: &run,
            model: model.config(),
        },
    )?;
    println!("wrote {} stage dumps to {}", 2 * out.score_maps.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_scaling() {
        let (lo, hi, s) = min_max(&[2.0, 4.0, 3.0]);
        assert_eq!((lo, hi), (2.0, 4.0));
        assert_eq!(s, vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max(&[1.5, 1.5]).2, vec![0.0, 0.0]);
    }

    #[test]
    fn loss_header_matches_row_width() {
        let r = StepReport {
            step: 3,
            lr: 0.1,
            loss: LossBreakdown {
                style: 0.5,
                final_mask: Default::default(),
                stages: vec![Default::default(); 2],
                total: 1.0,
            },
            s_inter: None,
            s_intra: Some(0.25),
        };
        assert_eq!(loss_header(2).split(',').count(), loss_row(&r).split(',').count());
        assert!(loss_row(&r).ends_with(",,0.25"));
    }
}
