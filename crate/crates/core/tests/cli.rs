use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use austkit::checkpoint;
use austkit::metrics::ReportSummary;

fn austkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_austkit"))
        .args(args)
        .env_remove("AUSTKIT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = austkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_triplets_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen", "--n", "5", "--seed", "7", "--out", p(&out)]);
    assert_eq!(files(&out.join("images")).len(), 5);
    assert_eq!(files(&out.join("masks")).len(), 5);
    assert_eq!(files(&out.join("labels")).len(), 5);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 5);
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 7"), "{cfg}");
}

#[test]
fn gen_multi_region_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen", "--n", "6", "--seed", "2", "--regions", "2..9", "--out", p(&out)]);
    let ds = austkit::dataset::Dataset::open(&out).unwrap();
    assert!(ds.entries.iter().all(|e| (2..=9).contains(&e.regions)));
}

#[test]
fn exit_codes() {
    assert_eq!(austkit(&["gen", "--out", "x", "--nope"]).status.code(), Some(1));
    assert_eq!(austkit(&["eval", "--data", "/nonexistent", "--out", "/tmp/x", "--oracle"]).status.code(), Some(1));
    assert_eq!(austkit(&["--version"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(austkit(&["gen", "--n", "0", "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(austkit(&["gen", "--n", "1", "--regions", "1..12", "--out", p(&out)]).status.code(), Some(1));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[gen]\nn = 2\n[gen.generator]\nseed = 5\n").unwrap();
    let run = |extra: &[&str], env: Option<&str>, name: &str| -> String {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_austkit"));
        cmd.args(["gen", "--out", p(&out)]).args(extra).env_remove("AUSTKIT_SEED");
        if let Some(s) = env {
            cmd.env("AUSTKIT_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(out.join("config.toml")).unwrap()
    };
    assert!(run(&[], Some("9"), "env").contains("seed = 9"));
    assert!(run(&["--config", p(&cfg)], Some("9"), "file").contains("seed = 5"));
    assert!(run(&["--config", p(&cfg), "--seed", "3"], Some("9"), "flag").contains("seed = 3"));
    assert!(run(&["--config", p(&cfg)], None, "n").contains("n = 2"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[gen]\nsamples = 3\n").unwrap();
    let out = austkit(&["gen", "--config", p(&bad), "--out", p(&dir.path().join("z"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples"));
}

#[test]
fn train_zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--n", "2", "--size", "16", "--out", p(&data)]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "0", "--seed", "4"]);
    let saved = checkpoint::load(&run.join("model.ckpt")).unwrap();
    let fresh = austkit::model::AustNet::new(*saved.config()).unwrap();
    assert_eq!(saved.params(), fresh.params());
    assert_eq!(saved.config().seed, 4);
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn overfit_one_sample_lowers_bce() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--n", "3", "--size", "16", "--seed", "1", "--out", p(&data)]);
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--n", "1", "--steps", "60", "--batch-size", "1",
        "--checkpoint-every", "20",
    ]);
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "final_bce").unwrap();
    let rows: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 60);
    assert!(rows[59] < rows[0], "bce {} -> {}", rows[0], rows[59]);
    assert_eq!(files(&run.join("checkpoints")), ["step_000020.ckpt", "step_000040.ckpt", "step_000060.ckpt"]);
}

#[test]
fn oracle_eval_is_perfect_and_report_parses() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ev = dir.path().join("eval");
    ok(&["gen", "--n", "4", "--regions", "2..9", "--out", p(&data)]);
    ok(&["eval", "--data", p(&data), "--oracle", "--out", p(&ev)]);
    let text = fs::read_to_string(ev.join("report.txt")).unwrap();
    let r: ReportSummary = text.parse().unwrap();
    assert_eq!((r.ap, r.f1, r.iou), (100.0, 1.0, 100.0));
    assert_eq!(r.images, 4);
    let csv = fs::read_to_string(ev.join("per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn inspect_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--n", "2", "--size", "24", "--out", p(&data)]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "2", "--batch-size", "2"]);
    let ckpt = run.join("model.ckpt");
    let image = data.join("images/0000.png");

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["inspect", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&a)]);
    ok(&["inspect", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&b), "--zero-voting"]);
    let pngs: Vec<String> = files(&a).into_iter().filter(|f| f.ends_with(".png")).collect();
    assert_eq!(pngs.len(), 7);
    assert_eq!(pngs.iter().filter(|f| f.starts_with("stage")).count(), 6);
    let ranges = fs::read_to_string(a.join("ranges.txt")).unwrap();
    for line in ranges.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (lo, hi): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(lo <= hi, "{line}");
    }
    // Zeroing the votes changes what later stages see.
    assert_ne!(fs::read(a.join("final_mask.png")).unwrap(), fs::read(b.join("final_mask.png")).unwrap());
    assert_eq!(fs::read(a.join("stage1_score.png")).unwrap(), fs::read(b.join("stage1_score.png")).unwrap());

    let pred = dir.path().join("pred");
    ok(&["predict", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&pred)]);
    let (w, h, _) = austkit::imageio::load_gray(&pred.join("0000_mask.png")).unwrap();
    assert_eq!((w, h), (24, 24));

    let small = dir.path().join("small");
    ok(&["gen", "--n", "1", "--size", "16", "--out", p(&small)]);
    let out = austkit(&[
        "predict", "--checkpoint", p(&ckpt), "--image", p(&small.join("images/0000.png")), "--out", p(&pred),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn semantic_training_needs_and_uses_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--n", "2", "--size", "16", "--out", p(&data)]);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--steps", "1", "--semantic", "--stages", "2"]);
    let m = checkpoint::load(&run.join("model.ckpt")).unwrap();
    assert!(m.config().semantic);
    assert_eq!(m.config().stages, 2);
    let image = data.join("images/0001.png");
    let ckpt = run.join("model.ckpt");
    let out = austkit(&["predict", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(1));
    ok(&[
        "predict", "--checkpoint", p(&ckpt), "--image", p(&image), "--labels", p(&data.join("labels/0001.png")),
        "--out", p(&dir.path().join("p")),
    ]);
}
