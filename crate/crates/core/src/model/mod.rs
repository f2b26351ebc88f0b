//! Encoder–decoder attention forecaster whose dropout masks act as the
//! latent variable of an infinite mixture.

mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{attention, conv_distill, multi_head, PositionalTable};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamRegistry, Tape, Tensor, Var};
use crate::data::WindowSample;
use crate::dist::{BaseKind, MixtureSample, SufficientStats};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use layers::{feed_forward, maybe_dropout, FeedForwardVars, HeadVars};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ff: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub dropout: f64,
    pub t_enc: usize,
    pub t_pred: usize,
    pub d_t: usize,
    pub n_subjects: usize,
    pub base: BaseKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 4,
            d_k: 8,
            d_v: 8,
            ff: 64,
            enc_blocks: 2,
            dec_blocks: 1,
            dropout: 0.3,
            t_enc: 36,
            t_pred: 12,
            d_t: 0,
            n_subjects: 1,
            base: BaseKind::Gaussian,
        }
    }
}

impl ModelConfig {
    /// Large configuration: 12 heads of width 43 (d = 516), feed-forward 2048.
    pub fn large() -> Self {
        ModelConfig { d: 516, heads: 12, d_k: 43, d_v: 43, ff: 2048, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_k == 0 || self.d_v == 0 || self.ff == 0 {
            return bad("heads, d_k, d_v, and ff must be positive".into());
        }
        if self.d != self.heads * self.d_v {
            return bad(format!("d = {} must equal heads·d_v = {}", self.d, self.heads * self.d_v));
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("at least one encoder and one decoder block required".into());
        }
        if self.t_enc == 0 || self.t_pred == 0 {
            return bad("encoder and prediction lengths must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_subjects == 0 {
            return bad("subject table needs at least one row".into());
        }
        Ok(())
    }

    /// Number of encoder values repeated as decoder start tokens.
    pub fn start_len(&self) -> usize {
        self.t_enc.div_ceil(4)
    }

    /// Sequence length leaving the encoder: the subject token plus `t_enc`
    /// values, halved between consecutive blocks.
    pub fn encoder_out_len(&self) -> usize {
        (1..self.enc_blocks).fold(self.t_enc + 1, |m, _| m.div_ceil(2))
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let f = |k: &str, v: String| (k.to_string(), v);
        vec![
            f("model.d", self.d.to_string()),
            f("model.heads", self.heads.to_string()),
            f("model.d_k", self.d_k.to_string()),
            f("model.d_v", self.d_v.to_string()),
            f("model.ff", self.ff.to_string()),
            f("model.enc_blocks", self.enc_blocks.to_string()),
            f("model.dec_blocks", self.dec_blocks.to_string()),
            f("model.dropout", self.dropout.to_string()),
            f("model.t_enc", self.t_enc.to_string()),
            f("model.t_pred", self.t_pred.to_string()),
            f("model.d_t", self.d_t.to_string()),
            f("model.n_subjects", self.n_subjects.to_string()),
            f("model.base", self.base.as_str().to_string()),
        ]
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(&format!("model.{k}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing model.{k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("model.{k} is not an integer")))
        };
        let cfg = ModelConfig {
            d: int("d")?,
            heads: int("heads")?,
            d_k: int("d_k")?,
            d_v: int("d_v")?,
            ff: int("ff")?,
            enc_blocks: int("enc_blocks")?,
            dec_blocks: int("dec_blocks")?,
            dropout: get("dropout")?.parse().map_err(|_| Error::Checkpoint("model.dropout".into()))?,
            t_enc: int("t_enc")?,
            t_pred: int("t_pred")?,
            d_t: int("d_t")?,
            n_subjects: int("n_subjects")?,
            base: get("base")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    heads: Vec<[ParamId; 3]>,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncBlock {
    attn: AttnIds,
    ln1: NormIds,
    ff: FfIds,
    ln2: NormIds,
}

#[derive(Debug, Clone)]
struct DecBlock {
    attn: AttnIds,
    ln1: NormIds,
    cross: AttnIds,
    ln2: NormIds,
    ff: FfIds,
    ln3: NormIds,
}

#[derive(Debug, Clone, Copy)]
struct EmbedIds {
    value: ParamId,
    time: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_embed: EmbedIds,
    subject: ParamId,
    enc: Vec<EncBlock>,
    distill: Vec<[ParamId; 2]>,
    dec_embed: EmbedIds,
    dec: Vec<DecBlock>,
    final_norm: NormIds,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform on ±1/√fan_in.
    Uniform(usize),
    Zeros,
    Ones,
}

impl Layout {
    /// Walks the architecture in a fixed order, asking `alloc` for each tensor.
    fn build(cfg: &ModelConfig, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>) -> Result<Self> {
        let d = cfg.d;
        let attn = |prefix: &str, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>| {
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                heads.push([
                    alloc(format!("{prefix}.h{h}.wq"), vec![d, cfg.d_k], Init::Uniform(d))?,
                    alloc(format!("{prefix}.h{h}.wk"), vec![d, cfg.d_k], Init::Uniform(d))?,
                    alloc(format!("{prefix}.h{h}.wv"), vec![d, cfg.d_v], Init::Uniform(d))?,
                ]);
            }
            let wo = alloc(format!("{prefix}.wo"), vec![cfg.heads * cfg.d_v, d], Init::Uniform(cfg.heads * cfg.d_v))?;
            Ok::<_, Error>(AttnIds { heads, wo })
        };
        let norm = |prefix: &str, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>| {
            Ok::<_, Error>(NormIds {
                gain: alloc(format!("{prefix}.gain"), vec![1, d], Init::Ones)?,
                bias: alloc(format!("{prefix}.bias"), vec![1, d], Init::Zeros)?,
            })
        };
        let ff = |prefix: &str, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>| {
            Ok::<_, Error>(FfIds {
                w1: alloc(format!("{prefix}.w1"), vec![d, cfg.ff], Init::Uniform(d))?,
                b1: alloc(format!("{prefix}.b1"), vec![1, cfg.ff], Init::Zeros)?,
                w2: alloc(format!("{prefix}.w2"), vec![cfg.ff, d], Init::Uniform(cfg.ff))?,
                b2: alloc(format!("{prefix}.b2"), vec![1, d], Init::Zeros)?,
            })
        };
        let embed = |prefix: &str, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>| {
            let value = alloc(format!("{prefix}.value"), vec![1, d], Init::Uniform(1))?;
            let time = if cfg.d_t > 0 {
                Some(alloc(format!("{prefix}.time"), vec![cfg.d_t, d], Init::Uniform(cfg.d_t))?)
            } else {
                None
            };
            Ok::<_, Error>(EmbedIds { value, time })
        };

        let enc_embed = embed("embed", alloc)?;
        let subject = alloc("embed.subject".into(), vec![cfg.n_subjects, d], Init::Uniform(d))?;
        let mut enc = Vec::new();
        let mut distill = Vec::new();
        for b in 0..cfg.enc_blocks {
            enc.push(EncBlock {
                attn: attn(&format!("enc{b}.attn"), alloc)?,
                ln1: norm(&format!("enc{b}.ln1"), alloc)?,
                ff: ff(&format!("enc{b}.ff"), alloc)?,
                ln2: norm(&format!("enc{b}.ln2"), alloc)?,
            });
            if b + 1 < cfg.enc_blocks {
                distill.push([
                    alloc(format!("distill{b}.kernel"), vec![3, d, d], Init::Uniform(3 * d))?,
                    alloc(format!("distill{b}.bias"), vec![1, d], Init::Zeros)?,
                ]);
            }
        }
        let dec_embed = embed("dec_embed", alloc)?;
        let mut dec = Vec::new();
        for b in 0..cfg.dec_blocks {
            dec.push(DecBlock {
                attn: attn(&format!("dec{b}.self"), alloc)?,
                ln1: norm(&format!("dec{b}.ln1"), alloc)?,
                cross: attn(&format!("dec{b}.cross"), alloc)?,
                ln2: norm(&format!("dec{b}.ln2"), alloc)?,
                ff: ff(&format!("dec{b}.ff"), alloc)?,
                ln3: norm(&format!("dec{b}.ln3"), alloc)?,
            });
        }
        let final_norm = norm("dec.final", alloc)?;
        let head_w = alloc("head.w".into(), vec![d, 2], Init::Uniform(d))?;
        let head_b = alloc("head.b".into(), vec![1, 2], Init::Zeros)?;
        Ok(Layout { enc_embed, subject, enc, distill, dec_embed, dec, final_norm, head_w, head_b })
    }
}

/// Per-position outputs of one forward pass, each `T_pred × 1`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub mean: Var,
    pub log_scale: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamRegistry,
    layout: Layout,
    positions: PositionalTable,
}

impl Model {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamRegistry::new();
        let layout = Layout::build(&config, &mut |name, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            params.register(name, Tensor::new(shape, data)?)
        })?;
        Ok(Self::assemble(config, params, layout))
    }

    /// Wraps an existing registry, checking that every tensor the
    /// architecture needs is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamRegistry) -> Result<Self> {
        config.validate()?;
        let mut seen = 0;
        let layout = Layout::build(&config, &mut |name, shape, _| {
            let id = params.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if params.tensor(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    params.tensor(id).shape()
                )));
            }
            seen += 1;
            Ok(id)
        })?;
        if seen != params.len() {
            return Err(Error::Checkpoint(format!("{} unexpected tensors", params.len() - seen)));
        }
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: ModelConfig, params: ParamRegistry, layout: Layout) -> Self {
        let rows = config.t_enc.max(config.start_len() + config.t_pred) + 1;
        let positions = PositionalTable::new(rows, config.d);
        Model { config, params, layout, positions }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    fn check_window(&self, w: &WindowSample) -> Result<()> {
        let c = &self.config;
        if w.x.len() != c.t_enc || w.y.len() != c.t_pred {
            return Err(Error::shape(
                "forward",
                format!("window {} has {}+{} values, model expects {}+{}", w.id, w.x.len(), w.y.len(), c.t_enc, c.t_pred),
            ));
        }
        if w.d_t != c.d_t || w.time_features.len() != (c.t_enc + c.t_pred) * c.d_t {
            return Err(Error::shape("forward", format!("window {} has {} time features, model expects {}", w.id, w.d_t, c.d_t)));
        }
        Ok(())
    }

    fn embed_values(&self, tape: &mut Tape, ids: EmbedIds, values: &[f64], time: &[f64]) -> Result<Var> {
        let n = values.len();
        let x = tape.constant(Tensor::from_parts(vec![n, 1], values.to_vec()));
        let wx = tape.param(&self.params, ids.value);
        let mut e = tape.matmul(x, wx)?;
        if let Some(wt) = ids.time {
            let t = tape.constant(Tensor::from_parts(vec![n, self.config.d_t], time.to_vec()));
            let wt = tape.param(&self.params, wt);
            let te = tape.matmul(t, wt)?;
            e = tape.add(e, te)?;
        }
        let p = tape.constant(self.positions.positions(n));
        tape.add(e, p)
    }

    /// Encoder embedding: subject row followed by `value·W_x + time·W_t + p`.
    pub fn embed(&self, tape: &mut Tape, w: &WindowSample) -> Result<Var> {
        self.check_window(w)?;
        let time = &w.time_features[..self.config.t_enc * self.config.d_t];
        let e = self.embed_values(tape, self.layout.enc_embed, &w.x, time)?;
        let table = tape.param(&self.params, self.layout.subject);
        let s = tape.gather_row(table, w.subject)?;
        tape.concat_rows(&[s, e])
    }

    fn attn_vars(&self, tape: &mut Tape, ids: &AttnIds) -> (Vec<HeadVars>, Var) {
        let heads = ids
            .heads
            .iter()
            .map(|[q, k, v]| HeadVars {
                wq: tape.param(&self.params, *q),
                wk: tape.param(&self.params, *k),
                wv: tape.param(&self.params, *v),
            })
            .collect();
        (heads, tape.param(&self.params, ids.wo))
    }

    fn ff_vars(&self, tape: &mut Tape, ids: FfIds) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.param(&self.params, ids.w1),
            b1: tape.param(&self.params, ids.b1),
            w2: tape.param(&self.params, ids.w2),
            b2: tape.param(&self.params, ids.b2),
        }
    }

    fn norm(&self, tape: &mut Tape, x: Var, ids: NormIds) -> Result<Var> {
        let g = tape.param(&self.params, ids.gain);
        let b = tape.param(&self.params, ids.bias);
        tape.layer_norm(x, g, b)
    }

    /// `LN(x + dropout(attn(x, kv)))`.
    fn attn_sublayer(
        &self,
        tape: &mut Tape,
        x: Var,
        kv: Var,
        ids: &AttnIds,
        ln: NormIds,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (heads, wo) = self.attn_vars(tape, ids);
        let a = multi_head(tape, x, kv, &heads, wo)?;
        let a = maybe_dropout(tape, a, self.config.dropout, rng)?;
        let r = tape.add(x, a)?;
        self.norm(tape, r, ln)
    }

    fn ff_sublayer(&self, tape: &mut Tape, x: Var, ids: FfIds, ln: NormIds, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let ff = self.ff_vars(tape, ids);
        let f = feed_forward(tape, x, ff, self.config.dropout, rng)?;
        let f = maybe_dropout(tape, f, self.config.dropout, rng)?;
        let r = tape.add(x, f)?;
        self.norm(tape, r, ln)
    }

    /// Records one pass on `tape`. Dropout is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, w: &WindowSample, mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardVars> {
        let c = &self.config;
        let rng = &mut rng;
        let l = &self.layout;

        let mut x = self.embed(tape, w)?;
        x = maybe_dropout(tape, x, c.dropout, rng)?;
        tape.check_finite(x, "embed")?;
        for (b, block) in l.enc.iter().enumerate() {
            x = self.attn_sublayer(tape, x, x, &block.attn, block.ln1, rng)?;
            tape.check_finite(x, &format!("enc{b}.attn"))?;
            x = self.ff_sublayer(tape, x, block.ff, block.ln2, rng)?;
            tape.check_finite(x, &format!("enc{b}.ff"))?;
            if let Some([k, bias]) = l.distill.get(b) {
                let (k, bias) = (tape.param(&self.params, *k), tape.param(&self.params, *bias));
                x = conv_distill(tape, x, k, bias)?;
                tape.check_finite(x, &format!("distill{b}"))?;
            }
        }
        let memory = x;

        let start = c.start_len();
        let mut dec_values = w.x[c.t_enc - start..].to_vec();
        dec_values.resize(start + c.t_pred, 0.0);
        let dec_time = &w.time_features[(c.t_enc - start) * c.d_t..];
        let mut y = self.embed_values(tape, l.dec_embed, &dec_values, dec_time)?;
        y = maybe_dropout(tape, y, c.dropout, rng)?;
        tape.check_finite(y, "dec_embed")?;
        for (b, block) in l.dec.iter().enumerate() {
            y = self.attn_sublayer(tape, y, y, &block.attn, block.ln1, rng)?;
            tape.check_finite(y, &format!("dec{b}.self"))?;
            y = self.attn_sublayer(tape, y, memory, &block.cross, block.ln2, rng)?;
            tape.check_finite(y, &format!("dec{b}.cross"))?;
            y = self.ff_sublayer(tape, y, block.ff, block.ln3, rng)?;
            tape.check_finite(y, &format!("dec{b}.ff"))?;
        }
        y = self.norm(tape, y, l.final_norm)?;
        let y = tape.slice_rows(y, start, start + c.t_pred)?;
        let hw = tape.param(&self.params, l.head_w);
        let hb = tape.param(&self.params, l.head_b);
        let out = tape.matmul(y, hw)?;
        let out = tape.add_row(out, hb)?;
        tape.check_finite(out, "head")?;
        Ok(ForwardVars { mean: tape.slice_cols(out, 0, 1)?, log_scale: tape.slice_cols(out, 1, 2)? })
    }

    fn run(&self, w: &WindowSample, rng: Option<&mut ChaCha8Rng>) -> Result<SufficientStats> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, w, rng)?;
        SufficientStats::new(tape.value(out.mean).data().to_vec(), tape.value(out.log_scale).data().to_vec())
    }

    /// One pass with dropout masks drawn from `seed`.
    pub fn stochastic_forward(&self, w: &WindowSample, seed: u64) -> Result<SufficientStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.run(w, Some(&mut rng))
    }

    /// One pass with dropout disabled.
    pub fn deterministic_forward(&self, w: &WindowSample) -> Result<SufficientStats> {
        self.run(w, None)
    }

    /// `k` stochastic passes with seeds derived from `(seed, j)`.
    pub fn predict_distribution(&self, w: &WindowSample, k: usize, seed: u64) -> Result<MixtureSample> {
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        let draws = (0..k as u64)
            .map(|j| self.stochastic_forward(w, derive_seed(seed, j)))
            .collect::<Result<Vec<_>>>()?;
        MixtureSample::new(self.config.base, draws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    pub(crate) fn tiny(dropout: f64) -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            d_k: 4,
            d_v: 4,
            ff: 16,
            enc_blocks: 2,
            dec_blocks: 1,
            dropout,
            t_enc: 6,
            t_pred: 2,
            d_t: 0,
            n_subjects: 1,
            base: BaseKind::Gaussian,
        }
    }

    pub(crate) fn window(cfg: &ModelConfig, salt: f64) -> WindowSample {
        let n = cfg.t_enc + cfg.t_pred;
        let v: Vec<f64> = (0..n).map(|i| ((i as f64 + salt) * 0.7).sin()).collect();
        WindowSample {
            id: "w:0".into(),
            x: v[..cfg.t_enc].to_vec(),
            time_features: (0..n * cfg.d_t).map(|i| (i as f64 * 0.13).cos() * 0.5).collect(),
            d_t: cfg.d_t,
            subject: 0,
            y: v[cfg.t_enc..].to_vec(),
            y_raw: v[cfg.t_enc..].to_vec(),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { d: 30, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { t_pred: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { d: 512, heads: 8, d_k: 64, d_v: 64, ff: 2048, ..Default::default() }.validate().is_ok());
        assert!(ModelConfig::large().validate().is_ok());
    }

    #[test]
    fn meta_round_trip() {
        let cfg = ModelConfig { d_t: 5, n_subjects: 7, base: BaseKind::Laplace, ..tiny(0.25) };
        let meta: BTreeMap<String, String> = cfg.to_meta().into_iter().collect();
        assert_eq!(ModelConfig::from_meta(&meta).unwrap(), cfg);
    }

    #[test]
    fn zero_weights_embed_to_positions() {
        let cfg = ModelConfig { d_t: 3, ..tiny(0.0) };
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        for id in model.params.ids().collect::<Vec<_>>() {
            model.params.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let w = window(&cfg, 0.3);
        let mut tape = Tape::new();
        let e = model.embed(&mut tape, &w).unwrap();
        let e = tape.value(e);
        assert_eq!(e.shape(), &[cfg.t_enc + 1, cfg.d]);
        assert!(e.row(0).iter().all(|&v| v == 0.0));
        let p = PositionalTable::new(cfg.t_enc + 1, cfg.d);
        for i in 1..=cfg.t_enc {
            for c in 0..cfg.d {
                assert_eq!(e.get(i, c), p.get(i, c));
            }
        }
    }

    #[test]
    fn embedding_without_time_features() {
        let cfg = tiny(0.0);
        let model = Model::new(cfg.clone(), 2).unwrap();
        assert!(model.params.get("embed.time").is_none());
        let w = window(&cfg, 0.1);
        let mut tape = Tape::new();
        let e = model.embed(&mut tape, &w).unwrap();
        let wx = model.params.tensor(model.params.get("embed.value").unwrap());
        for i in 0..cfg.t_enc {
            for c in 0..cfg.d {
                let expect = w.x[i] * wx.get(0, c) + model.positions.get(i + 1, c);
                assert!((tape.value(e).get(i + 1, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_subject_is_a_lookup_error() {
        let cfg = tiny(0.0);
        let model = Model::new(cfg.clone(), 2).unwrap();
        let mut w = window(&cfg, 0.1);
        w.subject = 3;
        assert!(matches!(model.deterministic_forward(&w), Err(Error::Lookup(_))));
    }

    #[test]
    fn mismatched_window_is_rejected() {
        let cfg = tiny(0.0);
        let model = Model::new(cfg.clone(), 2).unwrap();
        let mut w = window(&cfg, 0.1);
        w.x.pop();
        assert!(matches!(model.deterministic_forward(&w), Err(Error::Shape { .. })));
    }

    #[test]
    fn encoder_shape_contract() {
        for (t_enc, blocks) in [(6, 1), (6, 2), (6, 3), (9, 2), (36, 3), (1, 2)] {
            let cfg = ModelConfig { t_enc, enc_blocks: blocks, ..tiny(0.0) };
            let expect = ((t_enc + 1) as f64 / 2f64.powi(blocks as i32 - 1)).ceil() as usize;
            assert_eq!(cfg.encoder_out_len(), expect);
            let model = Model::new(cfg.clone(), 3).unwrap();
            let out = model.deterministic_forward(&window(&cfg, 0.0)).unwrap();
            assert_eq!(out.mean.len(), cfg.t_pred);
            assert_eq!(out.log_scale.len(), cfg.t_pred);
        }
    }

    #[test]
    fn zero_dropout_ignores_seed() {
        let cfg = tiny(0.0);
        let model = Model::new(cfg.clone(), 4).unwrap();
        let w = window(&cfg, 0.2);
        assert_eq!(model.stochastic_forward(&w, 1).unwrap(), model.stochastic_forward(&w, 99).unwrap());
        assert_eq!(model.stochastic_forward(&w, 1).unwrap(), model.deterministic_forward(&w).unwrap());
    }

    #[test]
    fn dropout_makes_passes_differ() {
        let cfg = tiny(0.3);
        let model = Model::new(cfg.clone(), 4).unwrap();
        let w = window(&cfg, 0.2);
        let a = model.stochastic_forward(&w, 1).unwrap();
        assert_eq!(a, model.stochastic_forward(&w, 1).unwrap());
        assert_ne!(a, model.stochastic_forward(&w, 2).unwrap());
    }

    #[test]
    fn fresh_model_outputs_are_bounded() {
        let cfg = tiny(0.3);
        for seed in 0..10 {
            let model = Model::new(cfg.clone(), seed).unwrap();
            let out = model.stochastic_forward(&window(&cfg, seed as f64), seed).unwrap();
            assert!(out.mean.iter().chain(&out.log_scale).all(|v| v.is_finite()));
            assert!(out.log_scale.iter().all(|v| v.abs() < 20.0));
        }
    }

    #[test]
    fn predict_distribution_contracts() {
        let cfg = tiny(0.3);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let w = window(&cfg, 0.4);
        let one = model.predict_distribution(&w, 1, 8).unwrap();
        assert_eq!(one.draws()[0], model.stochastic_forward(&w, derive_seed(8, 0)).unwrap());
        let a = model.predict_distribution(&w, 6, 8).unwrap();
        assert_eq!(a, model.predict_distribution(&w, 6, 8).unwrap());
        assert_eq!(a.k(), 6);

        let det = Model::new(tiny(0.0), 5).unwrap();
        let s = det.predict_distribution(&w, 4, 8).unwrap();
        assert!(s.draws().iter().all(|d| d == &s.draws()[0]));
        assert!(det.predict_distribution(&w, 0, 8).is_err());
    }

    #[test]
    fn nan_input_names_a_layer() {
        let cfg = tiny(0.0);
        let model = Model::new(cfg.clone(), 6).unwrap();
        let mut w = window(&cfg, 0.0);
        w.x[2] = f64::NAN;
        match model.deterministic_forward(&w) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, "embed"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parameter_names_are_unique_and_complete() {
        let cfg = ModelConfig { d_t: 5, n_subjects: 4, ..tiny(0.3) };
        let model = Model::new(cfg.clone(), 7).unwrap();
        let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
        for n in ["embed.value", "embed.time", "embed.subject", "enc0.attn.h1.wq", "distill0.kernel", "dec0.cross.wo", "head.w"] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(!names.contains(&"distill1.kernel"));
        let rebuilt = Model::from_params(cfg, model.params.clone()).unwrap();
        let w = window(rebuilt.config(), 0.0);
        assert_eq!(rebuilt.stochastic_forward(&w, 3).unwrap(), model.stochastic_forward(&w, 3).unwrap());
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        // Perturb every parameter through leaves that replace the registry
        // values, with dropout masks fixed by the seed.
        let cfg = ModelConfig { d_t: 2, ..tiny(0.3) };
        let model = Model::new(cfg.clone(), 9).unwrap();
        let w = window(&cfg, 0.5);
        let ids: Vec<ParamId> = model.params.ids().collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| model.params.tensor(id).clone()).collect();
        let err = check_gradients(
            &inputs,
            |tape, vars| {
                for (&id, &v) in ids.iter().zip(vars) {
                    tape.bind_param(id, v);
                }
                let m = &model;
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let out = m.forward(tape, &w, Some(&mut rng))?;
                let a = tape.log_density(out.mean, out.log_scale, &w.y, BaseKind::Gaussian)?;
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let out = m.forward(tape, &w, Some(&mut rng))?;
                let b = tape.log_density(out.mean, out.log_scale, &w.y, BaseKind::Gaussian)?;
                let s = tape.stack(&[a, b])?;
                let l = tape.logsumexp(s)?;
                tape.scale(l, -1.0)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
