use crate::autodiff::ParamRegistry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Decay of the first moment.
    pub beta_a: f64,
    /// Decay of the second moment.
    pub beta_b: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamRegistry) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.tensor(id).len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(params: &mut ParamRegistry, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Structural("optimizer state does not match parameters".into()));
    }
    if let Some(id) = params.ids().find(|&id| params.tensor(id).grad().is_none()) {
        return Err(Error::Structural(format!("no gradient for {}", params.name(id))));
    }
    state.step += 1;
    let t = state.step as i32;
    let corr_a = 1.0 - cfg.beta_a.powi(t);
    let corr_b = 1.0 - cfg.beta_b.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let tensor = params.tensor_mut(id);
        let g = tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta_a * m[i] + (1.0 - cfg.beta_a) * g[i];
            v[i] = cfg.beta_b * v[i] + (1.0 - cfg.beta_b) * g[i] * g[i];
            let m_hat = m[i] / corr_a;
            let v_hat = v[i] / corr_b;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamRegistry, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.tensor_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}
