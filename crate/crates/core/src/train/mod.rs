//! Losses, optimizer, and the training loop.

mod adam;
mod loss;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use loss::{imm_nll, imm_nll_value, mse_loss};

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::WindowSample;
use crate::dist::{gaussian_avg_loglik, gaussian_mle_variance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::{derive_seed, derive_seed_path};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Imm,
    Mse,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Imm => "imm",
            LossKind::Mse => "mse",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imm" => Ok(LossKind::Imm),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::Config(format!("unknown loss '{s}' (expected imm or mse)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub k_train: usize,
    pub k_eval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub eps: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    /// Record elapsed seconds in the log; zeros keep logs reproducible.
    pub log_wall_time: bool,
    /// Stop before an epoch that would likely end past this many seconds.
    pub time_budget: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Imm,
            k_train: 5,
            k_eval: 100,
            epochs: 100,
            batch_size: 64,
            lr: 2e-4,
            beta_a: 0.0,
            beta_b: 0.9,
            eps: 1e-8,
            seed: 0,
            patience: 10,
            clip_norm: 5.0,
            log_wall_time: true,
            time_budget: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.loss == LossKind::Imm && self.k_train < 2 {
            return bad("k_train must be at least 2 for the imm loss");
        }
        if self.k_train == 0 || self.k_eval == 0 {
            return bad("draw counts must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta_a) && (0.0..1.0).contains(&self.beta_b)) {
            return bad("Adam decay rates must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if self.time_budget.is_some_and(|t| !(t > 0.0)) {
            return bad("time budget must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta_a: self.beta_a, beta_b: self.beta_b, eps: self.eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation NLL.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Loss of one window with gradients accumulated into the model's slots,
/// scaled by `weight`.
fn sample_step(model: &mut Model, w: &WindowSample, cfg: &TrainConfig, seed: u64, weight: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let loss = match cfg.loss {
        LossKind::Imm => {
            let draws = (0..cfg.k_train)
                .map(|_| model.forward(&mut tape, w, Some(&mut rng)))
                .collect::<Result<Vec<_>>>()?;
            imm_nll(&mut tape, &draws, &w.y, model.config().base)?
        }
        LossKind::Mse => {
            let out = model.forward(&mut tape, w, Some(&mut rng))?;
            mse_loss(&mut tape, out.mean, &w.y)?
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric { layer: "loss".into(), detail: format!("window {} gave {value}", w.id) });
    }
    let scaled = tape.scale(loss, weight)?;
    tape.backward_into(scaled, model.params_mut())?;
    Ok(value)
}

/// Validation criterion: mixture NLL for the imm loss, Gaussian-baseline NLL
/// of deterministic forecasts for mse.
pub fn validation_nll(model: &Model, windows: &[WindowSample], cfg: &TrainConfig) -> Result<f64> {
    if windows.is_empty() {
        return Ok(f64::NAN);
    }
    match cfg.loss {
        LossKind::Imm => {
            let base = derive_seed(cfg.seed, 3);
            let mut total = 0.0;
            for (i, w) in windows.iter().enumerate() {
                let s = model.predict_distribution(w, cfg.k_eval, derive_seed(base, i as u64))?;
                total += imm_nll_value(&s, &w.y)?;
            }
            Ok(total / windows.len() as f64)
        }
        LossKind::Mse => {
            let residuals = windows
                .iter()
                .map(|w| {
                    let out = model.deterministic_forward(w)?;
                    Ok(w.y.iter().zip(&out.mean).map(|(y, m)| y - m).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let s2 = gaussian_mle_variance(&residuals)?.max(1e-12);
            Ok(-gaussian_avg_loglik(s2, model.config().t_pred)?)
        }
    }
}

/// Minibatch training with early stopping on validation NLL.
pub fn train(mut model: Model, train: &[WindowSample], val: &[WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let adam = cfg.adam();
    let mut state = AdamState::new(model.params());
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut slowest = 0.0f64;
    for epoch in 1..=cfg.epochs {
        if let Some(budget) = cfg.time_budget {
            let elapsed = start.elapsed().as_secs_f64();
            if elapsed + slowest > budget {
                info!("time budget of {budget}s reached after {} epochs", epoch - 1);
                break;
            }
        }
        let epoch_start = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed_path(cfg.seed, &[1, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params_mut().zero_grads();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let seed = derive_seed_path(cfg.seed, &[2, epoch as u64, i as u64]);
                total += sample_step(&mut model, &train[i], cfg, seed, weight).map_err(|e| match e {
                    Error::Numeric { layer, detail } => {
                        Error::Numeric { layer, detail: format!("epoch {epoch}, batch {b}: {detail}") }
                    }
                    other => other,
                })?;
            }
            clip_grad_norm(model.params_mut(), cfg.clip_norm);
            adam_step(model.params_mut(), &mut state, &adam)?;
        }
        model.params_mut().zero_grads();
        let train_loss = total / train.len().max(1) as f64;
        let val_nll = validation_nll(&model, val, cfg)?;
        slowest = slowest.max(epoch_start.elapsed().as_secs_f64());
        let wall_seconds = if cfg.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        info!("epoch {epoch}: train loss {train_loss:.5}, validation nll {val_nll:.5}");
        log.push(EpochRecord { epoch, train_loss, val_nll, wall_seconds });

        let improved = best.as_ref().is_none_or(|(v, _, _)| val_nll < *v) || val.is_empty();
        if improved {
            best = Some((val_nll, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("no validation improvement for {stale} epochs; stopping");
                break;
            }
        }
    }
    Ok(match best {
        Some((_, epoch, m)) => TrainOutcome { model: m, log, best_epoch: Some(epoch) },
        None => TrainOutcome { model, log, best_epoch: None },
    })
}

pub fn write_train_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "epoch,train_loss,val_nll,wall_seconds").map_err(io)?;
    for r in log {
        writeln!(f, "{},{},{},{}", r.epoch, r.train_loss, r.val_nll, r.wall_seconds).map_err(io)?;
    }
    f.flush().map_err(io)
}
