use crate::autodiff::{Tape, Tensor, Var};
use crate::dist::{mixture_log_pdf, BaseKind, MixtureSample};
use crate::error::{Error, Result};
use crate::model::ForwardVars;

/// Negative log-density of `y` under the equal-weight mixture of `draws`,
/// constants included.
pub fn imm_nll(tape: &mut Tape, draws: &[ForwardVars], y: &[f64], kind: BaseKind) -> Result<Var> {
    if draws.is_empty() {
        return Err(Error::domain("imm_nll", "no draws"));
    }
    let logs = draws
        .iter()
        .map(|d| tape.log_density(d.mean, d.log_scale, y, kind))
        .collect::<Result<Vec<_>>>()?;
    let s = tape.stack(&logs)?;
    let lse = tape.logsumexp(s)?;
    let neg = tape.scale(lse, -1.0)?;
    tape.add_scalar(neg, (draws.len() as f64).ln())
}

/// Value-only counterpart of [`imm_nll`].
pub fn imm_nll_value(sample: &MixtureSample, y: &[f64]) -> Result<f64> {
    Ok(-mixture_log_pdf(sample, y)?)
}

/// `(1/T) Σ (y − μ)²`.
pub fn mse_loss(tape: &mut Tape, mean: Var, y: &[f64]) -> Result<Var> {
    let shape = tape.value(mean).shape().to_vec();
    if shape.iter().product::<usize>() != y.len() {
        return Err(Error::shape("mse_loss", format!("{} predictions for {} targets", shape.iter().product::<usize>(), y.len())));
    }
    let target = tape.constant(Tensor::new(shape, y.to_vec())?);
    let r = tape.sub(mean, target)?;
    let sq = tape.square(r)?;
    tape.mean(sq)
}
