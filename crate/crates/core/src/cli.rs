//! `synth`, `train`, `predict`, and `eval` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::{DataKind, RunConfig};
use crate::data::{
    generate_synthetic, ingest_csv, read_synthetic_csv, segment, windowize, windowize_synthetic, write_manifest,
    write_synthetic_csv, Affine, Dataset, SyntheticSets, WindowSample, CGM_MAX_JUMP, CGM_STEP_SECONDS, SHARED_SUBJECT,
};
use crate::dist::{base_variance, gaussian_mle_variance, MixtureSample, SufficientStats};
use crate::error::{Error, Result};
use crate::eval::{
    calibration, emit_reports, metrics_report, point_forecast, predict_all, sharpness_report,
    test_loglik_gaussian_baseline, loglik_of_samples, MetricsReport, Reports, MIN_VARIANCE,
};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::seed::derive_seed;
use crate::train::{train, write_train_log, LossKind};

#[derive(Debug, Parser)]
#[command(name = "immcast", version, about = "Probabilistic forecasting with dropout-sampled infinite mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/validation/test series.
    Synth,
    /// Train a model and write its checkpoint and epoch log.
    Train,
    /// Write per-window forecasts.
    Predict,
    /// Write accuracy, likelihood, calibration, and sharpness reports.
    Eval,
}

/// Command-line settings; each maps onto the config key of the same name.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// imm or mse.
    #[arg(long, global = true)]
    pub loss: Option<String>,
    #[arg(long, global = true)]
    pub k_train: Option<String>,
    #[arg(long, global = true)]
    pub k_eval: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<String>,
    #[arg(long, global = true)]
    pub enc_len: Option<String>,
    #[arg(long, global = true)]
    pub pred_len: Option<String>,
    #[arg(long, global = true)]
    pub dropout: Option<String>,
    /// gaussian or laplace.
    #[arg(long, global = true)]
    pub base: Option<String>,
    #[arg(long, global = true)]
    pub emit_draws: bool,
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// synthetic or cgm.
    #[arg(long, global = true)]
    pub data: Option<String>,
    #[arg(long, global = true)]
    pub data_dir: Option<String>,
    #[arg(long, global = true)]
    pub cgm_csv: Option<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<String>,
    #[arg(long, global = true)]
    pub baseline: Option<String>,
    #[arg(long, global = true)]
    pub input: Option<String>,
    #[arg(long, global = true)]
    pub n_train: Option<String>,
    #[arg(long, global = true)]
    pub n_val: Option<String>,
    #[arg(long, global = true)]
    pub n_test: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let named = [
            ("seed", &self.seed),
            ("loss", &self.loss),
            ("k_train", &self.k_train),
            ("k_eval", &self.k_eval),
            ("epochs", &self.epochs),
            ("enc_len", &self.enc_len),
            ("pred_len", &self.pred_len),
            ("dropout", &self.dropout),
            ("base", &self.base),
            ("out", &self.out),
            ("data", &self.data),
            ("data_dir", &self.data_dir),
            ("cgm_csv", &self.cgm_csv),
            ("checkpoint", &self.checkpoint),
            ("baseline", &self.baseline),
            ("input", &self.input),
            ("n_train", &self.n_train),
            ("n_val", &self.n_val),
            ("n_test", &self.n_test),
        ];
        let mut out: Vec<(String, String)> = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            out.push((k.to_string(), v.to_string()));
        }
        out.extend(named.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))));
        if self.emit_draws {
            out.push(("emit_draws".into(), "true".into()));
        }
        Ok(out)
    }
}

/// Defaults, then the config file, then `IMMCAST_*` variables, then flags.
pub fn resolve_config(o: &Overrides, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &o.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(env)?;
    for (k, v) in o.pairs()? {
        cfg.set(&k, &v)?;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.overrides, std::env::vars())?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Eval => cmd_eval(&cfg),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    let path = cfg.out.join(format!("{command}.conf"));
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    info!("resolved config written to {}", path.display());
    Ok(())
}

const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let sets = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    let ds = Dataset::from_synthetic(&sets, cfg.model.t_enc, cfg.model.t_pred, None);
    let dir = cfg.data_dir();
    create_dir(&cfg.out)?;
    create_dir(&dir)?;
    for (file, series) in SPLIT_FILES.iter().zip([&sets.train, &sets.val, &sets.test]) {
        write_synthetic_csv(&dir.join(file), series)?;
    }
    write_manifest(&dir.join("manifest.txt"), &ds.manifest)?;
    echo_config(cfg, "synth")?;
    info!(
        "wrote {}/{}/{} series to {}",
        sets.train.len(),
        sets.val.len(),
        sets.test.len(),
        dir.display()
    );
    Ok(())
}

fn read_synthetic_sets(dir: &Path) -> Result<SyntheticSets> {
    let read = |f: &str| read_synthetic_csv(&dir.join(f));
    Ok(SyntheticSets { train: read(SPLIT_FILES[0])?, val: read(SPLIT_FILES[1])?, test: read(SPLIT_FILES[2])? })
}

fn cgm_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.cgm_csv.as_deref().ok_or_else(|| Error::Config("data=cgm requires cgm_csv".into()))
}

/// Dataset used for training: read or ingested, split, and normalized.
fn training_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let (t_enc, t_pred) = (cfg.model.t_enc, cfg.model.t_pred);
    match cfg.data {
        DataKind::Synthetic => Ok(Dataset::from_synthetic(&read_synthetic_sets(&cfg.data_dir())?, t_enc, t_pred, None)),
        DataKind::Cgm => Dataset::from_cgm(&ingest_csv(cgm_path(cfg)?)?, t_enc, t_pred, cfg.seed, None),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = training_dataset(cfg)?;
    if ds.train.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    let model_cfg = ModelConfig { d_t: ds.manifest.d_t, n_subjects: ds.manifest.subjects.len(), ..cfg.model.clone() };
    let model = Model::new(model_cfg, derive_seed(cfg.seed, 10))?;
    info!(
        "training {} parameters on {} windows ({} validation), loss {}",
        model.params().numel(),
        ds.train.len(),
        ds.val.len(),
        cfg.train.loss.as_str()
    );
    let train_cfg = crate::train::TrainConfig { seed: derive_seed(cfg.seed, 11), ..cfg.train.clone() };
    let outcome = train(model, &ds.train, &ds.val, &train_cfg)?;

    create_dir(&cfg.out)?;
    let ckpt = cfg.checkpoint();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut meta: BTreeMap<String, String> = outcome.model.config().to_meta().into_iter().collect();
    meta.insert("train.loss".into(), cfg.train.loss.as_str().into());
    meta.insert("norm.mean".into(), ds.manifest.affine.mean.to_string());
    meta.insert("norm.sd".into(), ds.manifest.affine.sd.to_string());
    meta.insert("data.kind".into(), cfg.data.as_str().into());
    meta.insert("data.seed".into(), cfg.seed.to_string());
    meta.insert("data.subjects".into(), ds.manifest.subjects.join(","));
    meta.insert("train.best_epoch".into(), outcome.best_epoch.map_or(String::from("none"), |e| e.to_string()));
    save_checkpoint(&ckpt, &meta, outcome.model.params())?;
    write_train_log(&cfg.out.join("train_log.csv"), &outcome.log)?;
    write_manifest(&cfg.out.join("manifest.txt"), &ds.manifest)?;
    echo_config(cfg, "train")?;
    info!("checkpoint written to {}", ckpt.display());
    Ok(())
}

/// A checkpoint with the preprocessing it was trained under.
pub struct Trained {
    pub model: Model,
    pub loss: LossKind,
    pub affine: Affine,
    pub data: DataKind,
    pub data_seed: u64,
    pub subjects: Vec<String>,
}

pub fn load_trained(path: &Path) -> Result<Trained> {
    let ck = load_checkpoint(path)?;
    let get = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("{k} is not a number"))) };
    let config = ModelConfig::from_meta(&ck.meta)?;
    let data = match get("data.kind")?.as_str() {
        "synthetic" => DataKind::Synthetic,
        "cgm" => DataKind::Cgm,
        other => return Err(Error::Checkpoint(format!("unknown data kind {other}"))),
    };
    Ok(Trained {
        loss: get("train.loss")?.parse()?,
        affine: Affine { mean: num("norm.mean")?, sd: num("norm.sd")? },
        data,
        data_seed: get("data.seed")?.parse().map_err(|_| Error::Checkpoint("data.seed".into()))?,
        subjects: get("data.subjects")?.split(',').map(str::to_string).collect(),
        model: Model::from_params(config, ck.params)?,
    })
}

/// Test windows normalized the way the checkpoint was trained.
fn test_windows(cfg: &RunConfig, t: &Trained) -> Result<Vec<WindowSample>> {
    let c = t.model.config();
    match t.data {
        DataKind::Synthetic => {
            let series = read_synthetic_csv(&cfg.data_dir().join(SPLIT_FILES[2]))?;
            Ok(normalized_synthetic(&series, c.t_enc, c.t_pred, t.affine))
        }
        DataKind::Cgm => {
            let raw = ingest_csv(cgm_path(cfg)?)?;
            let ds = Dataset::from_cgm(&raw, c.t_enc, c.t_pred, t.data_seed, Some((t.affine, t.subjects.clone())))?;
            Ok(ds.test)
        }
    }
}

fn normalized_synthetic(series: &[crate::data::SyntheticSeries], t_enc: usize, t_pred: usize, a: Affine) -> Vec<WindowSample> {
    let mut out: Vec<WindowSample> = series.iter().flat_map(|s| windowize_synthetic(s, t_enc, t_pred, 1)).collect();
    out.iter_mut().for_each(|w| a.apply_window(w));
    out
}

/// Every window of an input file, without splitting.
fn input_windows(path: &Path, t: &Trained) -> Result<Vec<WindowSample>> {
    let c = t.model.config();
    match t.data {
        DataKind::Synthetic => Ok(normalized_synthetic(&read_synthetic_csv(path)?, c.t_enc, c.t_pred, t.affine)),
        DataKind::Cgm => {
            let mut out = Vec::new();
            for series in ingest_csv(path)? {
                let subject = t.subjects.iter().position(|s| *s == series.subject_id).unwrap_or_else(|| {
                    warn!("subject {} unseen in training; using the {SHARED_SUBJECT} row", series.subject_id);
                    0
                });
                for seg in segment(&series, CGM_MAX_JUMP, CGM_STEP_SECONDS, c.t_enc + c.t_pred) {
                    let mut w = windowize(&seg, subject, c.t_enc, c.t_pred, 1)?;
                    w.iter_mut().for_each(|x| t.affine.apply_window(x));
                    out.extend(w);
                }
            }
            Ok(out)
        }
    }
}

/// Standard deviation of one base component.
fn component_sd(kind: crate::dist::BaseKind, log_scale: f64) -> f64 {
    base_variance(kind, log_scale).sqrt()
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let trained = load_trained(&cfg.checkpoint())?;
    let windows = match &cfg.input {
        Some(p) => input_windows(p, &trained)?,
        None => test_windows(cfg, &trained)?,
    };
    let samples = predict_all(&trained.model, &windows, cfg.train.k_eval, derive_seed(cfg.seed, 12))?;
    let a = trained.affine;
    let mut s = String::from("window,horizon,row,mean,sigma\n");
    for (w, m) in windows.iter().zip(&samples) {
        let mean = point_forecast(m);
        for h in 0..m.horizon() {
            let sd = m.variance(h)?.sqrt() * a.sd;
            let _ = writeln!(s, "{},{},mixture,{},{}", w.id, h + 1, a.invert(mean[h]), sd);
            if cfg.emit_draws {
                for (j, d) in m.draws().iter().enumerate() {
                    let sd = component_sd(m.kind(), d.log_scale[h]) * a.sd;
                    let _ = writeln!(s, "{},{},{},{},{}", w.id, h + 1, j, a.invert(d.mean[h]), sd);
                }
            }
        }
    }
    create_dir(&cfg.out)?;
    let path = cfg.out.join("predictions.csv");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    echo_config(cfg, "predict")?;
    info!("{} windows forecast to {}", windows.len(), path.display());
    Ok(())
}

/// Model name in loglik.csv for a training loss.
fn loglik_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Imm => "imm",
        LossKind::Mse => "gaussian",
    }
}

/// Predictive mixtures for evaluation. MSE-trained models get a single
/// Gaussian around the deterministic forecast with the residual MLE variance.
fn evaluation_samples(cfg: &RunConfig, t: &Trained, windows: &[WindowSample]) -> Result<(Vec<MixtureSample>, f64)> {
    let targets: Vec<Vec<f64>> = windows.iter().map(|w| w.y.clone()).collect();
    match t.loss {
        LossKind::Imm => {
            let samples = predict_all(&t.model, windows, cfg.train.k_eval, derive_seed(cfg.seed, 12))?;
            let ll = loglik_of_samples(&samples, &targets)?;
            Ok((samples, ll))
        }
        LossKind::Mse => {
            let preds = windows
                .iter()
                .map(|w| Ok(t.model.deterministic_forward(w)?.mean))
                .collect::<Result<Vec<_>>>()?;
            let ll = test_loglik_gaussian_baseline(&preds, &targets)?;
            let residuals: Vec<Vec<f64>> =
                preds.iter().zip(&targets).map(|(p, y)| y.iter().zip(p).map(|(a, b)| a - b).collect()).collect();
            let log_var = gaussian_mle_variance(&residuals)?.max(MIN_VARIANCE).ln();
            let samples = preds
                .into_iter()
                .map(|p| {
                    let n = p.len();
                    MixtureSample::new(crate::dist::BaseKind::Gaussian, vec![SufficientStats::new(p, vec![log_var; n])?])
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((samples, ll))
        }
    }
}

fn evaluate(cfg: &RunConfig, t: &Trained, windows: &[WindowSample]) -> Result<Reports> {
    let horizon = t.model.config().t_pred;
    if windows.is_empty() {
        warn!("no test windows; writing empty reports");
        return Ok(Reports::default());
    }
    let (samples, ll) = evaluation_samples(cfg, t, windows)?;
    let a = t.affine;
    let y_raw: Vec<Vec<f64>> = windows.iter().map(|w| w.y_raw.clone()).collect();
    let y_hat: Vec<Vec<f64>> =
        samples.iter().map(|s| point_forecast(s).into_iter().map(|v| a.invert(v)).collect()).collect();
    let targets: Vec<Vec<f64>> = windows.iter().map(|w| w.y.clone()).collect();
    Ok(Reports {
        metrics: metrics_report(&y_raw, &y_hat, horizon, t.data == DataKind::Cgm),
        calibration: Some(calibration(&samples, &targets, horizon, cfg.calibration_levels)?),
        sharpness: Some(sharpness_report(&samples, horizon)?),
        loglik: vec![(loglik_name(t.loss).to_string(), ll)],
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let primary = load_trained(&cfg.checkpoint())?;
    let baseline = cfg.baseline.as_deref().map(load_trained).transpose()?;
    let windows = test_windows(cfg, &primary)?;
    let mut reports = evaluate(cfg, &primary, &windows)?;
    let base_reports = match &baseline {
        Some(b) => {
            let w = test_windows(cfg, b)?;
            let r = evaluate(cfg, b, &w)?;
            reports.loglik.extend(r.loglik.iter().cloned());
            Some(r)
        }
        None => None,
    };
    let dir = cfg.out.join("reports");
    emit_reports(&dir, &reports)?;
    if let Some(r) = base_reports {
        emit_reports(&dir.join("baseline"), &r)?;
    }
    echo_config(cfg, "eval")?;
    for (m, v) in &reports.loglik {
        info!("average test log-likelihood {m}: {v:.4}");
    }
    log_metrics(&reports.metrics);
    Ok(())
}

fn log_metrics(m: &MetricsReport) {
    for r in &m.rows {
        info!("window {} {}: median APE {:?}, median RMSE {:.4}, n {}", r.window, r.class, r.ape, r.rmse, r.n);
    }
}
