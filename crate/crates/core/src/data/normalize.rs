use log::warn;

use super::window::WindowSample;

/// z-score transform `(v − mean) / sd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub mean: f64,
    pub sd: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Affine { mean: 0.0, sd: 1.0 }
    }
}

impl Affine {
    /// Fits on training values. Zero variance keeps unit scale.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            warn!("normalization fit on no values; using identity");
            return Affine::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 0.0 && sd.is_finite() {
            Affine { mean, sd }
        } else {
            warn!("training values have zero variance; normalization shifts only");
            Affine { mean, sd: 1.0 }
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }

    /// Normalizes inputs and targets in place; raw targets are left untouched.
    pub fn apply_window(&self, w: &mut WindowSample) {
        w.x.iter_mut().for_each(|v| *v = self.apply(*v));
        w.y.iter_mut().for_each(|v| *v = self.apply(*v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_data_shifts_only() {
        let a = Affine::fit(&[4.0, 4.0, 4.0]);
        assert_eq!(a, Affine { mean: 4.0, sd: 1.0 });
        assert_eq!(a.apply(5.0), 1.0);
    }

    #[test]
    fn standardizes_training_values() {
        let vals: Vec<f64> = (0..50).map(|i| (i as f64 * 1.7).sin() * 30.0 + 120.0).collect();
        let a = Affine::fit(&vals);
        let z: Vec<f64> = vals.iter().map(|&v| a.apply(v)).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn inverse_round_trips(mean in -200.0f64..200.0, sd in 0.01f64..100.0, v in -500.0f64..500.0) {
            let a = Affine { mean, sd };
            prop_assert!((a.invert(a.apply(v)) - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}
