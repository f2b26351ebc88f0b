//! Base distributions and the equal-weight mixtures built from stochastic
//! forward passes.
//!
//! Every component is parameterized by a location and a log-scale. For the
//! Gaussian base the log-scale is `log σ²`; for the Laplace base it is `log b`.
//! Mixtures combine horizons with the independence copula, so the joint
//! density of a component is the product of its per-horizon marginals.

use std::f64::consts::{LN_2, PI, SQRT_2};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Component family of the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseKind {
    #[default]
    Gaussian,
    Laplace,
}

impl BaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseKind::Gaussian => "gaussian",
            BaseKind::Laplace => "laplace",
        }
    }
}

impl std::str::FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(BaseKind::Gaussian),
            "laplace" => Ok(BaseKind::Laplace),
            other => Err(Error::Config(format!("unknown base distribution '{other}'"))),
        }
    }
}

/// Stable `log Σ exp(xᵢ)`.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::domain("logsumexp", "empty input"));
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Ok(m);
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

pub fn base_log_pdf(kind: BaseKind, y: f64, mean: f64, log_scale: f64) -> f64 {
    let r = y - mean;
    match kind {
        BaseKind::Gaussian => -0.5 * (LN_2PI + log_scale) - 0.5 * r * r * (-log_scale).exp(),
        BaseKind::Laplace => -(LN_2 + log_scale) - r.abs() * (-log_scale).exp(),
    }
}

/// Partial derivatives of [`base_log_pdf`] with respect to `(mean, log_scale)`.
pub fn base_log_pdf_grad(kind: BaseKind, y: f64, mean: f64, log_scale: f64) -> (f64, f64) {
    let r = y - mean;
    let inv = (-log_scale).exp();
    match kind {
        BaseKind::Gaussian => (r * inv, -0.5 + 0.5 * r * r * inv),
        BaseKind::Laplace => {
            // Subgradient 0 at the kink.
            let dm = if r == 0.0 { 0.0 } else { r.signum() * inv };
            (dm, -1.0 + r.abs() * inv)
        }
    }
}

/// Independent-horizon log-density: `Σ_h base_log_pdf(y_h; mean_h, log_scale_h)`.
pub fn base_log_pdf_sum(kind: BaseKind, y: &[f64], mean: &[f64], log_scale: &[f64]) -> f64 {
    y.iter()
        .zip(mean)
        .zip(log_scale)
        .map(|((&y, &m), &s)| base_log_pdf(kind, y, m, s))
        .sum()
}

pub fn base_cdf(kind: BaseKind, y: f64, mean: f64, log_scale: f64) -> f64 {
    match kind {
        BaseKind::Gaussian => {
            let sigma = (0.5 * log_scale).exp();
            0.5 * erfc(-(y - mean) / (sigma * SQRT_2))
        }
        BaseKind::Laplace => {
            let z = (y - mean) * (-log_scale).exp();
            if z < 0.0 {
                0.5 * z.exp()
            } else {
                1.0 - 0.5 * (-z).exp()
            }
        }
    }
}

/// Variance of a single component.
pub fn base_variance(kind: BaseKind, log_scale: f64) -> f64 {
    match kind {
        BaseKind::Gaussian => log_scale.exp(),
        BaseKind::Laplace => 2.0 * (2.0 * log_scale).exp(),
    }
}

/// Per-horizon location and log-scale from one stochastic forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub mean: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl SufficientStats {
    pub fn new(mean: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if mean.len() != log_scale.len() || mean.is_empty() {
            return Err(Error::shape(
                "sufficient_stats",
                format!("mean {} vs log_scale {}", mean.len(), log_scale.len()),
            ));
        }
        Ok(SufficientStats { mean, log_scale })
    }

    pub fn horizon(&self) -> usize {
        self.mean.len()
    }
}

/// Equal-weight finite mixture approximating the infinite mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    kind: BaseKind,
    draws: Vec<SufficientStats>,
}

impl MixtureSample {
    pub fn new(kind: BaseKind, draws: Vec<SufficientStats>) -> Result<Self> {
        let Some(first) = draws.first() else {
            return Err(Error::domain("mixture", "k = 0 draws"));
        };
        let t = first.horizon();
        if draws.iter().any(|d| d.horizon() != t) {
            return Err(Error::shape("mixture", "draws disagree on horizon length"));
        }
        Ok(MixtureSample { kind, draws })
    }

    pub fn kind(&self) -> BaseKind {
        self.kind
    }

    pub fn draws(&self) -> &[SufficientStats] {
        &self.draws
    }

    pub fn k(&self) -> usize {
        self.draws.len()
    }

    pub fn horizon(&self) -> usize {
        self.draws[0].horizon()
    }

    fn check_horizon(&self, h: usize) -> Result<()> {
        if h >= self.horizon() {
            return Err(Error::domain("mixture", format!("horizon {h} out of range 0..{}", self.horizon())));
        }
        Ok(())
    }

    /// `log (1/k) Σⱼ Π_h p(y_h; drawⱼ)`.
    pub fn log_pdf(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.horizon() {
            return Err(Error::shape("mixture_log_pdf", format!("target {} vs {}", y.len(), self.horizon())));
        }
        let per_draw: Vec<f64> = self
            .draws
            .iter()
            .map(|d| base_log_pdf_sum(self.kind, y, &d.mean, &d.log_scale))
            .collect();
        Ok(logsumexp(&per_draw)? - (self.k() as f64).ln())
    }

    /// Marginal mixture density at horizon `h` (0-based).
    pub fn marginal_pdf(&self, h: usize, y: f64) -> Result<f64> {
        self.check_horizon(h)?;
        let s: f64 = self
            .draws
            .iter()
            .map(|d| base_log_pdf(self.kind, y, d.mean[h], d.log_scale[h]).exp())
            .sum();
        Ok(s / self.k() as f64)
    }

    /// Marginal mixture CDF at horizon `h` (0-based).
    pub fn cdf(&self, h: usize, y: f64) -> Result<f64> {
        self.check_horizon(h)?;
        let s: f64 = self
            .draws
            .iter()
            .map(|d| base_cdf(self.kind, y, d.mean[h], d.log_scale[h]))
            .sum();
        Ok(s / self.k() as f64)
    }

    /// Mixture mean per horizon.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.k() as f64;
        (0..self.horizon())
            .map(|h| self.draws.iter().map(|d| d.mean[h]).sum::<f64>() / k)
            .collect()
    }

    /// Law-of-total-variance mixture variance at horizon `h`.
    pub fn variance(&self, h: usize) -> Result<f64> {
        self.check_horizon(h)?;
        let k = self.k() as f64;
        let mut second = 0.0;
        let mut first = 0.0;
        for d in &self.draws {
            let m = d.mean[h];
            second += base_variance(self.kind, d.log_scale[h]) + m * m;
            first += m;
        }
        let mu = first / k;
        Ok((second / k - mu * mu).max(0.0))
    }
}

/// Free-function form of [`MixtureSample::log_pdf`].
pub fn mixture_log_pdf(sample: &MixtureSample, y: &[f64]) -> Result<f64> {
    sample.log_pdf(y)
}

/// Free-function form of [`MixtureSample::cdf`].
pub fn mixture_cdf(sample: &MixtureSample, h: usize, y: f64) -> Result<f64> {
    sample.cdf(h, y)
}

/// Maximum-likelihood residual variance: mean of squared residuals over all
/// samples and horizons.
pub fn gaussian_mle_variance(residuals: &[Vec<f64>]) -> Result<f64> {
    let n: usize = residuals.iter().map(Vec::len).sum();
    if residuals.is_empty() || n == 0 {
        return Err(Error::domain("gaussian_mle_variance", "no residuals"));
    }
    let ss: f64 = residuals.iter().flatten().map(|r| r * r).sum();
    Ok(ss / n as f64)
}

/// Closed-form average log-likelihood of a homoscedastic Gaussian with
/// variance fit by maximum likelihood: `−T/2 − (T/2) log(2π σ²)`.
pub fn gaussian_avg_loglik(sigma2: f64, horizon: usize) -> Result<f64> {
    if sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(Error::domain("gaussian_avg_loglik", format!("variance {sigma2} must be positive")));
    }
    let t = horizon as f64;
    Ok(-t / 2.0 - t / 2.0 * (2.0 * PI * sigma2).ln())
}

/// Mean predictive variance at horizon `h` across samples.
pub fn sharpness(samples: &[MixtureSample], h: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("sharpness", "no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += s.variance(h)?;
    }
    Ok(total / samples.len() as f64)
}
