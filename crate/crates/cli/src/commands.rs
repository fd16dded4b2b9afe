use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use semtraj_core::config::{provenance_lines, Config};
use semtraj_core::data::{load_labels, render_checkins, render_labels};
use semtraj_core::evalkit::{evaluate, render_report, transfer_eval, Evaluation};
use semtraj_core::numerics::Checkpoint;
use semtraj_core::objective::train_with;
use semtraj_core::polsim::{generate_map, simulate};
use semtraj_core::scoring::{parse_scores, render_scores, score};
use semtraj_core::{Dataset, Error, Model, Result};

use crate::{Cli, Command};

pub const CHECKINS_FILE: &str = "checkins.jsonl";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
const META_CONFIG: &str = "config";
const META_HASH: &str = "config_hash";

pub fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cli.threads)))?;
    let overrides = overrides(cli)?;
    let ov: Vec<(&str, String)> = overrides.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    match &cli.command {
        Command::Simulate { config, out_dir } => simulate_cmd(&Config::load(config, &ov)?, out_dir),
        Command::Train { data, config, out } => train_cmd(&Config::load(config, &ov)?, data, out),
        Command::Score {
            model,
            data,
            out,
            config,
        } => score_cmd(model, data, out, config.as_deref(), &ov),
        Command::Eval {
            scores,
            labels,
            report,
            data,
            timings,
            config,
        } => eval_cmd(
            scores,
            labels,
            report,
            data.as_deref(),
            timings.as_deref(),
            config.as_deref(),
            &ov,
        ),
        Command::Transfer {
            model,
            data,
            report,
            labels,
            scratch,
        } => transfer_cmd(model, data, report, labels.as_deref(), scratch.as_deref(), &ov),
        Command::Ablate {
            data,
            config,
            out_dir,
            variants,
        } => ablate_cmd(&Config::load(config, &ov)?, data, out_dir, variants),
    }
}

/// Global flags as config overrides, in increasing precedence.
fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(a) = &cli.arch {
        out.push(("model.arch".into(), a.clone()));
    }
    if let Some(a) = &cli.ablate {
        out.push(("model.ablation".into(), a.clone()));
    }
    if let Some(s) = cli.seed {
        out.push(("seed".into(), s.to_string()));
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(dir: &Path, cfg: &Config) -> Result<Dataset> {
    Dataset::load(&dir.join(CHECKINS_FILE), cfg.model()?.encoder.cutoff_len)
}

fn simulate_cmd(cfg: &Config, out_dir: &Path) -> Result<()> {
    let sim_cfg = cfg.sim()?;
    let sim = simulate(&sim_cfg, &generate_map(&sim_cfg)?)?;
    let prov = provenance_lines(cfg);
    write(
        &out_dir.join(CHECKINS_FILE),
        &(prov.clone() + &render_checkins(&sim.checkins)),
    )?;
    write(
        &out_dir.join(LABELS_FILE),
        &(prov.clone() + &render_labels(&sim.labels)),
    )?;
    let mut manifest = prov;
    let _ = writeln!(manifest, "checkins = {CHECKINS_FILE}");
    let _ = writeln!(manifest, "labels = {LABELS_FILE}");
    let _ = writeln!(manifest, "days = {}", sim.checkins.header.n_days);
    let _ = writeln!(manifest, "split_day = {}", sim.checkins.header.split_day);
    let _ = writeln!(manifest, "records = {}", sim.checkins.n_records());
    let _ = writeln!(manifest, "users = {}", sim.labels.len());
    for u in sim.labels.labels.keys() {
        let _ = writeln!(manifest, "user = {u}");
    }
    write(&out_dir.join(MANIFEST_FILE), &manifest)?;
    log::info!(
        "simulated {} users, {} outliers, {} check-ins",
        sim.labels.len(),
        sim.labels.n_outliers(),
        sim.checkins.n_records()
    );
    Ok(())
}

/// Train on `ds`; returns the checkpoint bytes, the JSON-lines log and
/// the per-epoch wall times.
fn train_model(cfg: &Config, ds: &Dataset) -> Result<(Model, String, Vec<f64>)> {
    let mut model = Model::from_config(cfg)?;
    let tc = cfg.train()?;
    let mut log = serde_json::json!({ META_HASH: cfg.hash(), META_CONFIG: cfg.render() }).to_string();
    log.push('\n');
    let report = train_with(&mut model, ds, &tc, |rec, secs| {
        log::info!("{} ({secs:.2}s)", rec.to_json());
    })?;
    for rec in &report.log {
        log.push_str(&rec.to_json());
        log.push('\n');
    }
    if report.skipped_anchors > 0 {
        log::warn!(
            "{} anchor days had no usable positives or negatives",
            report.skipped_anchors
        );
    }
    Ok((model, log, report.epoch_seconds))
}

fn checkpoint(model: &Model, cfg: &Config) -> Checkpoint {
    let meta = BTreeMap::from([
        (META_CONFIG.to_string(), cfg.render()),
        (META_HASH.to_string(), cfg.hash()),
    ]);
    model.to_checkpoint(meta)
}

fn render_timings(cfg: &Config, secs: &[f64]) -> String {
    let mut out = provenance_lines(cfg);
    out.push_str("epoch,seconds\n");
    for (e, s) in secs.iter().enumerate() {
        let _ = writeln!(out, "{e},{s:.6}");
    }
    out
}

fn parse_timings(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Data(format!("bad timing row `{l}`")))
        })
        .collect()
}

fn train_cmd(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let ds = load_data(data, cfg)?;
    let (model, log, secs) = train_model(cfg, &ds)?;
    let bytes = checkpoint(&model, cfg).to_bytes();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, bytes).map_err(|e| Error::io(out, e))?;
    write(&with_suffix(out, ".log.jsonl"), &log)?;
    write(&with_suffix(out, ".timing.csv"), &render_timings(cfg, &secs))?;
    Ok(())
}

/// Keys that fix a checkpoint's architecture and embedding table.
fn model_keys(cfg: &Config) -> BTreeMap<&str, &str> {
    semtraj_core::config::KEYS
        .iter()
        .filter(|k| k.key.starts_with("model.") || k.key == "train.centroids")
        .map(|k| (k.key, cfg.get(k.key)))
        .collect()
}

/// Model plus the configuration it is used with: the recorded one, or
/// `config_file`, with overrides applied. Model keys must agree with the
/// checkpoint.
fn load_model(path: &Path, config_file: Option<&Path>, ov: &[(&str, String)]) -> Result<(Model, Config)> {
    let ck = Checkpoint::load(path)?;
    let recorded_text = ck
        .meta
        .get(META_CONFIG)
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no configuration", path.display())))?;
    let recorded = Config::parse(recorded_text, &path.display().to_string(), &[])?;
    if ck.meta.get(META_HASH).map(String::as_str) != Some(recorded.hash().as_str()) {
        return Err(Error::Checkpoint(format!(
            "{}: configuration hash mismatch",
            path.display()
        )));
    }
    let cfg = match config_file {
        Some(f) => Config::load(f, ov)?,
        None => Config::parse(recorded_text, &path.display().to_string(), ov)?,
    };
    let (want, have) = (model_keys(&recorded), model_keys(&cfg));
    let differ: Vec<String> = want
        .iter()
        .filter(|(k, v)| have.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k} (checkpoint {v}, requested {})", have.get(k).unwrap_or(&"")))
        .collect();
    if !differ.is_empty() {
        return Err(Error::Config(format!(
            "configuration does not match checkpoint {} (hash {}): {}",
            path.display(),
            recorded.hash(),
            differ.join(", ")
        )));
    }
    Ok((Model::from_checkpoint(&ck)?, cfg))
}

fn score_cmd(model: &Path, data: &Path, out: &Path, config: Option<&Path>, ov: &[(&str, String)]) -> Result<()> {
    let (model, cfg) = load_model(model, config, ov)?;
    let ds = load_data(data, &cfg)?;
    let scores = score(&model, &ds, &cfg.score()?)?;
    write(out, &render_scores(&scores, &provenance_lines(&cfg)))
}

/// Rebuild the configuration embedded in a file's `# key = value` lines.
fn embedded_config(text: &str, file: &str, ov: &[(&str, String)]) -> Result<Option<Config>> {
    let mut hash = None;
    let mut body = String::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let l = line.trim_start_matches('#').trim();
        match l.strip_prefix("config_hash =") {
            Some(h) => hash = Some(h.trim().to_string()),
            None => {
                body.push_str(l);
                body.push('\n');
            }
        }
    }
    let Some(hash) = hash else { return Ok(None) };
    let recorded = Config::parse(&body, file, &[])?;
    if recorded.hash() != hash {
        return Err(Error::Data(format!(
            "{file}: embedded configuration does not match its hash"
        )));
    }
    Config::parse(&body, file, ov).map(Some)
}

fn eval_cmd(
    scores: &Path,
    labels: &Path,
    report: &Path,
    data: Option<&Path>,
    timings: Option<&Path>,
    config: Option<&Path>,
    ov: &[(&str, String)],
) -> Result<()> {
    let text = read(scores)?;
    let file = scores.display().to_string();
    let cfg = match config {
        Some(c) => Config::load(c, ov)?,
        None => embedded_config(&text, &file, ov)?
            .ok_or_else(|| Error::Config(format!("{file} carries no configuration; pass --config")))?,
    };
    let parsed = parse_scores(&text, &file)?;
    let labels = load_labels(labels)?;
    let ds = data.map(|d| load_data(d, &cfg)).transpose()?;
    let ev = evaluate(&parsed, &labels, &cfg.top_k()?, ds.as_ref())?;
    let secs = timings.map(|t| read(t).and_then(|s| parse_timings(&s))).transpose()?;
    write(
        report,
        &render_report(&provenance_lines(&cfg), &ev, None, secs.as_deref().unwrap_or(&[])),
    )?;
    log_summary(&ev);
    Ok(())
}

fn log_summary(ev: &Evaluation) {
    let b = ev.best_metrics();
    log::info!("best channel {}: auc {:.4}, ap {:.4}", ev.best.as_str(), b.auc, b.ap);
}

fn transfer_cmd(
    model: &Path,
    data: &Path,
    report: &Path,
    labels: Option<&Path>,
    scratch: Option<&Path>,
    ov: &[(&str, String)],
) -> Result<()> {
    let (model, cfg) = load_model(model, None, ov)?;
    let ds = load_data(data, &cfg)?;
    let labels = load_labels(&labels.map_or_else(|| data.join(LABELS_FILE), Path::to_path_buf))?;
    let ks = cfg.top_k()?;
    let transferred = transfer_eval(&model, &ds, &labels, &cfg.score()?, &ks)?;
    let mut preamble = provenance_lines(&cfg);
    let text = match scratch {
        Some(path) => {
            let (native, native_cfg) = load_model(path, None, ov)?;
            let _ = writeln!(preamble, "# scratch_config_hash = {}", native_cfg.hash());
            let original = evaluate(&score(&native, &ds, &native_cfg.score()?)?, &labels, &ks, Some(&ds))?;
            render_report(&preamble, &original, Some(&transferred), &[])
        }
        None => render_report(&preamble, &transferred, None, &[]),
    };
    log_summary(&transferred);
    write(report, &text)
}

fn ablate_cmd(cfg: &Config, data: &Path, out_dir: &Path, variants: &str) -> Result<()> {
    let ds = load_data(data, cfg)?;
    let labels = load_labels(&data.join(LABELS_FILE))?;
    let mut summary = provenance_lines(cfg);
    summary.push_str("variant,config_hash,best_channel,auc,ap\n");
    for v in variants.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let vcfg = Config::parse(&cfg.render(), "ablate", &[("model.ablation", v.to_string())])?;
        log::info!("ablation variant {v}");
        let (model, log, secs) = train_model(&vcfg, &ds)?;
        let dir = out_dir.join(v);
        let ck = checkpoint(&model, &vcfg);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        ck.save(&dir.join("model.ckpt"))?;
        write(&dir.join("model.ckpt.log.jsonl"), &log)?;
        write(&dir.join("model.ckpt.timing.csv"), &render_timings(&vcfg, &secs))?;
        let scores = score(&model, &ds, &vcfg.score()?)?;
        let prov = provenance_lines(&vcfg);
        write(&dir.join("scores.csv"), &render_scores(&scores, &prov))?;
        let ev = evaluate(&scores, &labels, &vcfg.top_k()?, Some(&ds))?;
        write(&dir.join("report.txt"), &render_report(&prov, &ev, None, &secs))?;
        let b = ev.best_metrics();
        let _ = writeln!(
            summary,
            "{v},{},{},{:.6},{:.6}",
            vcfg.hash(),
            ev.best.as_str(),
            b.auc,
            b.ap
        );
    }
    write(&out_dir.join("summary.csv"), &summary)
}
