//! Central finite differences, used as an independent check on the tape.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of a scalar graph against central
/// differences for every input tensor. Returns the worst relative error.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).expect("graph failed under perturbation");
        tape.value(loss).item()
    };

    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map_or_else(|| vec![0.0; input.len()], <[f64]>::to_vec);
        let numeric = central_difference(
            |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[k].data_mut().copy_from_slice(x);
                eval(&perturbed)
            },
            input.data(),
            h,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
