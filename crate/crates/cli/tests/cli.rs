use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semtraj_core::numerics::Checkpoint;
use semtraj_core::{Dataset, Model};

const SMALL: &str = "\
seed = 4
sim.agents = 30
sim.normal_days = 14
sim.outlier_days = 7
sim.hunger_outliers = 3
sim.work_outliers = 3
sim.social_outliers = 3
model.layers = 2
model.dim = 16
model.ff_dim = 32
train.epochs = 4
train.centroids = 3
train.batch = 64
";

fn semtraj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semtraj"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = semtraj(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("small.conf"), SMALL).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn simulate(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let conf = self.path("small.conf");
        let mut args = vec!["simulate", "--config", s(&conf), "--out-dir", s(&dir)];
        args.extend_from_slice(extra);
        ok(&args);
        dir
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let ck = self.path(out);
        let conf = self.path("small.conf");
        let mut args = vec!["train", "--data", s(data), "--config", s(&conf), "--out", s(&ck)];
        args.extend_from_slice(extra);
        ok(&args);
        ck
    }
}

#[test]
fn simulate_writes_a_manifest_and_is_repeatable() {
    let w = Work::new();
    let a = w.simulate("a", &[]);
    let b = w.simulate("b", &[]);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("user = ")).count(), 30);
    assert!(manifest.contains("users = 30"));
    assert!(manifest.starts_with("# config_hash = "));
    for f in ["checkins.jsonl", "labels.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = w.simulate("c", &["--seed", "5"]);
    assert_ne!(
        fs::read(a.join("checkins.jsonl")).unwrap(),
        fs::read(c.join("checkins.jsonl")).unwrap()
    );
}

#[test]
fn default_desk_config_lists_200_users() {
    let w = Work::new();
    fs::write(w.path("desk.conf"), "seed = 1\n").unwrap();
    let out = w.path("desk");
    ok(&["simulate", "--config", s(&w.path("desk.conf")), "--out-dir", s(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("user = ")).count(), 200);
}

#[test]
fn config_errors_exit_with_usage_code() {
    let w = Work::new();
    fs::write(w.path("noseed.conf"), "sim.agents = 30\n").unwrap();
    let out = semtraj(&[
        "simulate",
        "--config",
        s(&w.path("noseed.conf")),
        "--out-dir",
        s(&w.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    fs::write(w.path("typo.conf"), "seed = 1\nsim.agnets = 30\n").unwrap();
    let out = semtraj(&[
        "simulate",
        "--config",
        s(&w.path("typo.conf")),
        "--out-dir",
        s(&w.path("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim.agnets"));

    assert_eq!(semtraj(&["simulate"]).status.code(), Some(1));
    assert_eq!(semtraj(&["bogus"]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_data_error() {
    let w = Work::new();
    let out = semtraj(&[
        "train",
        "--data",
        s(&w.path("nowhere")),
        "--config",
        s(&w.path("small.conf")),
        "--out",
        s(&w.path("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_key() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for k in semtraj_core::config::KEYS {
        assert!(text.contains(&format!("{} = ", k.key)), "{}", k.key);
    }
    assert!(text.contains("sim.agents = 200"));
}

#[test]
fn pipeline_end_to_end() {
    let w = Work::new();
    let data = w.simulate("data", &[]);
    let ck = w.train(&data, "m.ckpt", &[]);
    let log = fs::read_to_string(w.path("m.ckpt.log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[0].contains("config_hash"));
    assert!(lines[1..].iter().all(|l| l.contains("\"epoch\"")));
    assert!(fs::read_to_string(w.path("m.ckpt.timing.csv"))
        .unwrap()
        .contains("epoch,seconds"));

    let (s1, s2) = (w.path("s1.csv"), w.path("s2.csv"));
    ok(&["score", "--model", s(&ck), "--data", s(&data), "--out", s(&s1)]);
    ok(&["score", "--model", s(&ck), "--data", s(&data), "--out", s(&s2)]);
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    let scores = fs::read_to_string(&s1).unwrap();
    assert!(scores.starts_with("# config_hash = "));
    assert_eq!(scores.lines().filter(|l| l.starts_with("u0")).count(), 30);

    let report = w.path("report.txt");
    ok(&[
        "eval",
        "--scores",
        s(&s1),
        "--labels",
        s(&data.join("labels.csv")),
        "--report",
        s(&report),
        "--data",
        s(&data),
        "--timings",
        s(&w.path("m.ckpt.timing.csv")),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    for needle in [
        "# config_hash = ",
        "best_auc = ",
        "[metrics]",
        "baseline,distance_baseline",
        "[breakdown]",
        "[timing]",
    ] {
        assert!(text.contains(needle), "{needle}\n{text}");
    }
}

#[test]
fn arch_and_ablation_flags_reach_the_model() {
    let w = Work::new();
    let data = w.simulate("data", &[]);
    let ck = w.train(
        &data,
        "mlp.ckpt",
        &["--arch", "mlp", "--ablate", "no-semantic", "--set", "train.epochs=2"],
    );
    let c = Checkpoint::load(&ck).unwrap();
    assert_eq!(c.meta["model.arch"], "mlp");
    assert_eq!(c.meta["model.ablation"], "no-semantic");
    let model = Model::from_checkpoint(&c).unwrap();
    let ds = Dataset::load(&data.join("checkins.jsonl"), 16).unwrap();
    let days: Vec<_> = ds.daily.values().next().unwrap().iter().take(3).collect();
    let x = model
        .fusion_values(&model.point_batch(days, &ds.header).unwrap())
        .unwrap();
    let d = model.dim();
    for r in 0..x.rows() {
        assert!(x.row_slice(r)[..d].iter().all(|&v| v == 0.0));
        assert!(x.row_slice(r)[d..].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn scoring_with_a_mismatched_config_is_rejected() {
    let w = Work::new();
    let data = w.simulate("data", &[]);
    let ck = w.train(&data, "m.ckpt", &["--set", "train.epochs=1"]);
    let out = semtraj(&[
        "score",
        "--model",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&w.path("x.csv")),
        "--arch",
        "rnn",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.arch"));
    fs::write(w.path("other.conf"), SMALL.replace("model.dim = 16", "model.dim = 8")).unwrap();
    let out = semtraj(&[
        "score",
        "--model",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&w.path("x.csv")),
        "--config",
        s(&w.path("other.conf")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.dim"));
}

#[test]
fn eval_of_a_perfect_ranking_reports_auc_one() {
    let w = Work::new();
    let mut scores = String::from("user_id,cross_time,cross_population,fused,rank\n");
    let mut labels = String::new();
    for i in 0..10 {
        let outlier = i < 3;
        let v = 10.0 - i as f64;
        scores.push_str(&format!("u{i},{v},{v},{v},{}\n", i + 1));
        let l = if outlier { "1,work,red" } else { "0,none,none" };
        labels.push_str(&format!("u{i},{l}\n"));
    }
    fs::write(w.path("s.csv"), scores).unwrap();
    fs::write(w.path("l.csv"), labels).unwrap();
    let (sp, lp, report, conf) = (w.path("s.csv"), w.path("l.csv"), w.path("r.txt"), w.path("small.conf"));
    let args = ["eval", "--scores", s(&sp), "--labels", s(&lp), "--report", s(&report)];
    assert_eq!(semtraj(&args).status.code(), Some(1));
    let mut with_config = args.to_vec();
    with_config.extend_from_slice(&["--config", s(&conf)]);
    ok(&with_config);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("best_auc = 1.000000"), "{text}");
}

#[test]
fn transfer_report_has_original_and_transfer_rows() {
    let w = Work::new();
    let a = w.simulate("a", &["--seed", "1"]);
    let b = w.simulate("b", &["--seed", "2"]);
    let on_a = w.train(&a, "a.ckpt", &["--seed", "1", "--set", "train.epochs=2"]);
    let on_b = w.train(&b, "b.ckpt", &["--seed", "2", "--set", "train.epochs=2"]);
    let report = w.path("t.txt");
    ok(&[
        "transfer",
        "--model",
        s(&on_a),
        "--data",
        s(&b),
        "--report",
        s(&report),
        "--scratch",
        s(&on_b),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("[transfer]"));
    assert!(text.lines().any(|l| l.starts_with("original,")));
    assert!(text.lines().any(|l| l.starts_with("transfer,")));
    let plain = w.path("p.txt");
    ok(&["transfer", "--model", s(&on_a), "--data", s(&b), "--report", s(&plain)]);
    assert!(!fs::read_to_string(&plain).unwrap().contains("[transfer]"));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let w = Work::new();
    let data = w.simulate("data", &[]);
    let out = w.path("abl");
    ok(&[
        "ablate",
        "--data",
        s(&data),
        "--config",
        s(&w.path("small.conf")),
        "--out-dir",
        s(&out),
        "--variants",
        "none,no-semantic",
        "--set",
        "train.epochs=2",
    ]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("none,")));
    assert!(summary.lines().any(|l| l.starts_with("no-semantic,")));
    assert!(out.join("no-semantic").join("report.txt").exists());
}
