//! Flat `key=value` run configuration with layered overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Prefix of environment variables that override config keys, e.g.
/// `IMMCAST_EPOCHS=3`.
pub const ENV_PREFIX: &str = "IMMCAST_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataKind {
    #[default]
    Synthetic,
    Cgm,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Cgm => "cgm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataKind,
    /// Synthetic CSV directory; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub cgm_csv: Option<PathBuf>,
    /// Defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Optional second checkpoint evaluated alongside the first.
    pub baseline: Option<PathBuf>,
    /// Series to forecast in `predict`; defaults to the test split.
    pub input: Option<PathBuf>,
    pub emit_draws: bool,
    pub calibration_levels: usize,
    pub enc_len: Option<usize>,
    pub pred_len: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataKind::Synthetic,
            data_dir: None,
            cgm_csv: None,
            checkpoint: None,
            baseline: None,
            input: None,
            emit_draws: false,
            calibration_levels: 12,
            enc_len: None,
            pred_len: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one `key=value` setting. Dashes in keys are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_").to_ascii_lowercase();
        let k = key.as_str();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match k {
            "seed" => self.seed = parse(k, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "data" => {
                self.data = match value.trim() {
                    "synthetic" => DataKind::Synthetic,
                    "cgm" => DataKind::Cgm,
                    other => return Err(Error::Config(format!("data: unknown kind '{other}'"))),
                }
            }
            "data_dir" => self.data_dir = opt_path(value),
            "cgm_csv" => self.cgm_csv = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "baseline" => self.baseline = opt_path(value),
            "input" => self.input = opt_path(value),
            "emit_draws" => self.emit_draws = parse_bool(k, value)?,
            "calibration_levels" => self.calibration_levels = parse(k, value)?,
            "enc_len" => self.enc_len = Some(parse(k, value)?),
            "pred_len" => self.pred_len = Some(parse(k, value)?),
            "d" => m.d = parse(k, value)?,
            "heads" => m.heads = parse(k, value)?,
            "d_k" => m.d_k = parse(k, value)?,
            "d_v" => m.d_v = parse(k, value)?,
            "ff" => m.ff = parse(k, value)?,
            "enc_blocks" => m.enc_blocks = parse(k, value)?,
            "dec_blocks" => m.dec_blocks = parse(k, value)?,
            "dropout" => m.dropout = parse(k, value)?,
            "base" => m.base = value.trim().parse()?,
            "loss" => t.loss = value.trim().parse()?,
            "k_train" => t.k_train = parse(k, value)?,
            "k_eval" => t.k_eval = parse(k, value)?,
            "epochs" => t.epochs = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "lr" => t.lr = parse(k, value)?,
            "beta_a" => t.beta_a = parse(k, value)?,
            "beta_b" => t.beta_b = parse(k, value)?,
            "eps" => t.eps = parse(k, value)?,
            "patience" => t.patience = parse(k, value)?,
            "clip_norm" => t.clip_norm = parse(k, value)?,
            "log_wall_time" => t.log_wall_time = parse_bool(k, value)?,
            "time_budget" => {
                t.time_budget = match value.trim() {
                    "" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "n_train" => s.n_train = parse(k, value)?,
            "n_val" => s.n_val = parse(k, value)?,
            "n_test" => s.n_test = parse(k, value)?,
            "t_start" => s.t_start = parse(k, value)?,
            "t_end" => s.t_end = parse(k, value)?,
            "step" => s.step = parse(k, value)?,
            "branch_prob" => s.branch_prob = parse(k, value)?,
            "length_scale" => s.length_scale = parse(k, value)?,
            "amplitude" => s.amplitude = parse(k, value)?,
            "residual_amplitude" => s.residual_amplitude = parse(k, value)?,
            "noise" => s.noise = parse(k, value)?,
            "slope" => s.slope = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    /// Applies `IMMCAST_<KEY>` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        found.sort();
        for (k, v) in found {
            self.set(&k, &v).map_err(|e| Error::Config(format!("{ENV_PREFIX}{}: {e}", k.to_ascii_uppercase())))?;
        }
        Ok(())
    }

    /// Fills data-dependent defaults and copies shared settings into the
    /// component configs.
    pub fn resolve(&mut self) {
        let (enc, pred) = match self.data {
            DataKind::Synthetic => (4, 2),
            DataKind::Cgm => (36, 12),
        };
        self.model.t_enc = self.enc_len.unwrap_or(enc);
        self.model.t_pred = self.pred_len.unwrap_or(pred);
        self.enc_len = Some(self.model.t_enc);
        self.pred_len = Some(self.model.t_pred);
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        m.t_enc = self.enc_len.unwrap_or(m.t_enc);
        m.t_pred = self.pred_len.unwrap_or(m.t_pred);
        m.validate()?;
        self.train.validate()?;
        if self.data == DataKind::Synthetic {
            self.synthetic.validate()?;
            let points = self.synthetic.grid().len();
            if m.t_enc + m.t_pred > points {
                return Err(Error::Config(format!(
                    "enc_len + pred_len = {} exceeds the {points}-point synthetic grid",
                    m.t_enc + m.t_pred
                )));
            }
        }
        if self.calibration_levels == 0 {
            return Err(Error::Config("calibration_levels must be positive".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let p = |v: &Option<PathBuf>| v.as_ref().map_or(String::new(), |p| p.display().to_string());
        let o = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        let (m, t, s) = (&self.model, &self.train, &self.synthetic);
        [
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data", self.data.as_str().to_string()),
            ("data_dir", p(&self.data_dir)),
            ("cgm_csv", p(&self.cgm_csv)),
            ("checkpoint", p(&self.checkpoint)),
            ("baseline", p(&self.baseline)),
            ("input", p(&self.input)),
            ("emit_draws", self.emit_draws.to_string()),
            ("calibration_levels", self.calibration_levels.to_string()),
            ("enc_len", o(self.enc_len)),
            ("pred_len", o(self.pred_len)),
            ("d", m.d.to_string()),
            ("heads", m.heads.to_string()),
            ("d_k", m.d_k.to_string()),
            ("d_v", m.d_v.to_string()),
            ("ff", m.ff.to_string()),
            ("enc_blocks", m.enc_blocks.to_string()),
            ("dec_blocks", m.dec_blocks.to_string()),
            ("dropout", m.dropout.to_string()),
            ("base", m.base.as_str().to_string()),
            ("loss", t.loss.as_str().to_string()),
            ("k_train", t.k_train.to_string()),
            ("k_eval", t.k_eval.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("beta_a", t.beta_a.to_string()),
            ("beta_b", t.beta_b.to_string()),
            ("eps", t.eps.to_string()),
            ("patience", t.patience.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("log_wall_time", t.log_wall_time.to_string()),
            ("time_budget", t.time_budget.map_or(String::new(), |v| v.to_string())),
            ("n_train", s.n_train.to_string()),
            ("n_val", s.n_val.to_string()),
            ("n_test", s.n_test.to_string()),
            ("t_start", s.t_start.to_string()),
            ("t_end", s.t_end.to_string()),
            ("step", s.step.to_string()),
            ("branch_prob", s.branch_prob.to_string()),
            ("length_scale", s.length_scale.to_string()),
            ("amplitude", s.amplitude.to_string()),
            ("residual_amplitude", s.residual_amplitude.to_string()),
            ("noise", s.noise.to_string()),
            ("slope", s.slope.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layered_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.conf");
        std::fs::write(&f, "# comment\nepochs = 7\nloss=mse\nk-train=1\n\nn_train=10\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&f).unwrap();
        c.apply_env([("IMMCAST_EPOCHS".to_string(), "3".to_string()), ("HOME".into(), "/x".into())]).unwrap();
        c.set("dropout", "0.1").unwrap();
        c.resolve();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.k_train, 1);
        assert_eq!(c.synthetic.n_train, 10);
        assert_eq!(c.model.dropout, 0.1);
        assert_eq!((c.model.t_enc, c.model.t_pred), (4, 2));
        c.validate().unwrap();
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("epochs", "many"), Err(Error::Config(_))));
        assert!(matches!(c.set("colour", "red"), Err(Error::Config(_))));
        assert!(matches!(c.set("base", "cauchy"), Err(Error::Config(_))));
        c.set("enc_len", "14").unwrap();
        assert!(c.validate().is_err());
        assert_eq!(Error::Config(String::new()).exit_code(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("seed", "42").unwrap();
        c.set("base", "laplace").unwrap();
        c.set("checkpoint", "m.ckpt").unwrap();
        c.resolve();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("echo.conf");
        std::fs::write(&f, c.to_text()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&f).unwrap();
        back.resolve();
        assert_eq!(back, c);
    }
}
