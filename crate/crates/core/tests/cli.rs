use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aqe_wmmse::sysmodel::{dataset_read, SystemConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aqe-wmmse"));
    c.env("RIS_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Scene {
    dir: tempfile::TempDir,
    config: PathBuf,
    train: PathBuf,
}

impl Scene {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SystemConfig {
            m: 2,
            k: 2,
            n: 4,
            n_c: 2,
            ..SystemConfig::desk()
        };
        let config = dir.path().join("scene.json");
        fs::write(&config, cfg.to_json()).unwrap();
        let train = dir.path().join("train.json");
        fs::write(&train, r#"{"batch_size": 8, "max_epochs": 4, "seed": 3}"#).unwrap();
        Self { dir, config, train }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, name: &str, n: usize, seed: u64, jobs: usize) -> PathBuf {
        let out = self.path(name);
        let n = n.to_string();
        let seed = seed.to_string();
        let jobs = jobs.to_string();
        ok(&["--config", s(&self.config), "--seed", &seed, "--jobs", &jobs, "gen-data", "--n", &n, "--out", s(&out)]);
        out
    }
}

#[test]
fn gen_data_is_reproducible_and_independent_of_jobs() {
    let sc = Scene::new();
    let a = sc.gen("a.bin", 6, 5, 1);
    let b = sc.gen("b.bin", 6, 5, 2);
    let c = sc.gen("c.bin", 6, 6, 1);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let (cfg, samples) = dataset_read(&a).unwrap();
    assert_eq!((cfg.m, cfg.k, cfg.n, samples.len()), (2, 2, 4, 6));
    assert!(samples.iter().all(|x| x.has_labels()));
}

#[test]
fn missing_inputs_and_bad_flags_exit_with_config_status() {
    let sc = Scene::new();
    let missing = sc.path("none.bin");
    let out = run(&["eval", "--dataset", s(&missing), "--out", s(&sc.path("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let data = sc.gen("d.bin", 4, 1, 1);
    let out = run(&["train", "--dataset", s(&data), "--out", s(&sc.path("o")), "--bits", "3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["eval", "--dataset", s(&data), "--out", s(&sc.path("o")), "--methods", "aqe"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoints"));

    let out = run(&["train", "--dataset", s(&data), "--out", s(&sc.path("o")), "--methods", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn train_then_eval_writes_histories_and_reports() {
    let sc = Scene::new();
    let data = sc.gen("d.bin", 30, 2, 1);
    let run_dir = sc.path("run");
    ok(&["--train-config", s(&sc.train), "train", "--dataset", s(&data), "--out", s(&run_dir)]);
    for m in ["aqe-wmmse", "aqe", "linq"] {
        assert!(run_dir.join(format!("{m}.ckpt")).exists());
        let hist = fs::read_to_string(run_dir.join(format!("{m}_history.csv"))).unwrap();
        assert_eq!(hist.lines().next().unwrap(), "epoch,train_loss,val_loss,lr");
        assert_eq!(hist.lines().count(), 5);
    }
    ok(&["--train-config", s(&sc.train), "--seed", "9", "eval", "--dataset", s(&data), "--out", s(&run_dir), "--fallback"]);
    let report = fs::read_to_string(run_dir.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "method,power_dbm,bits,mean,ci95,fallback");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].starts_with("upper-bound,") && rows[0].contains(",,"));
    assert!(rows.iter().filter(|r| r.ends_with(",true")).count() == 5);
    let per_sample = fs::read_to_string(run_dir.join("per_sample.csv")).unwrap();
    // 30 samples -> 6 in the test split, 5 methods, normal and fallback.
    assert_eq!(per_sample.lines().count(), 1 + 6 * 5 * 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let sc = Scene::new();
    let data = sc.gen("d.bin", 24, 4, 1);
    let short = sc.path("short.json");
    fs::write(&short, r#"{"batch_size": 8, "max_epochs": 2, "seed": 3}"#).unwrap();
    let (a, b) = (sc.path("a"), sc.path("b"));
    let common = ["--methods", "aqe-wmmse,linq"];
    ok(&[&["--train-config", s(&sc.train), "train", "--dataset", s(&data), "--out", s(&a)][..], &common].concat());
    ok(&[&["--train-config", s(&short), "train", "--dataset", s(&data), "--out", s(&b)][..], &common].concat());
    ok(&[&["--train-config", s(&sc.train), "train", "--dataset", s(&data), "--out", s(&b), "--resume"][..], &common].concat());
    for m in ["aqe-wmmse", "linq"] {
        let f = format!("{m}.ckpt");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{m} checkpoint");
        let h = format!("{m}_history.csv");
        assert_eq!(fs::read(a.join(&h)).unwrap(), fs::read(b.join(&h)).unwrap(), "{m} history");
    }

    let other = sc.path("other.json");
    fs::write(&other, r#"{"batch_size": 4, "max_epochs": 6, "seed": 3}"#).unwrap();
    let out = run(&["--train-config", s(&other), "train", "--dataset", s(&data), "--out", s(&b), "--resume", "--methods", "linq"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweeps_skip_untrained_points_and_plot_redraws() {
    let sc = Scene::new();
    let out = sc.path("sweep");
    ok(&[
        "--config", s(&sc.config), "--train-config", s(&sc.train), "sweep-bits", "--out", s(&out),
        "--bits", "2,4", "--samples", "12", "--methods", "upper-bound,naive,linq",
    ]);
    let files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let csv = files.iter().find(|f| f.ends_with(".csv")).expect("sweep csv");
    let rows = fs::read_to_string(out.join(csv)).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "method,axis,axis_value,mean,ci95");
    // Two baselines at two grid points; linq has no checkpoints.
    assert_eq!(rows.lines().count(), 1 + 4);
    assert!(!rows.contains("linq"));

    ok(&[
        "--config", s(&sc.config), "--train-config", s(&sc.train), "sweep-bits", "--out", s(&out),
        "--bits", "2", "--samples", "12", "--methods", "linq", "--train-missing",
    ]);
    let rows = fs::read_to_string(out.join(csv)).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let fields: Vec<&str> = rows.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[..2], ["linq", "bits"]);
    assert_eq!(fields[2].parse::<f64>().unwrap(), 2.0);

    let svg = sc.path("redrawn.svg");
    ok(&["plot", "--csv", s(&out.join(csv)), "--out", s(&svg)]);
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}
