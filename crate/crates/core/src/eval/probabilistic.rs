use log::warn;

use crate::data::WindowSample;
use crate::dist::{gaussian_avg_loglik, gaussian_mle_variance, mixture_cdf, mixture_log_pdf, sharpness, MixtureSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed::derive_seed;

/// Floor applied to the fitted residual variance.
pub const MIN_VARIANCE: f64 = 1e-12;

/// Mixtures for every window, with per-window seeds derived from `seed`.
pub fn predict_all(model: &Model, windows: &[WindowSample], k: usize, seed: u64) -> Result<Vec<MixtureSample>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| model.predict_distribution(w, k, derive_seed(seed, i as u64)))
        .collect()
}

/// Mean mixture log-likelihood of the (normalized) targets.
pub fn loglik_of_samples(samples: &[MixtureSample], targets: &[Vec<f64>]) -> Result<f64> {
    if samples.len() != targets.len() {
        return Err(Error::shape("loglik", format!("{} mixtures for {} targets", samples.len(), targets.len())));
    }
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (s, y) in samples.iter().zip(targets) {
        total += mixture_log_pdf(s, y)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn test_loglik_imm(model: &Model, windows: &[WindowSample], k: usize, seed: u64) -> Result<f64> {
    let samples = predict_all(model, windows, k, seed)?;
    let targets: Vec<Vec<f64>> = windows.iter().map(|w| w.y.clone()).collect();
    loglik_of_samples(&samples, &targets)
}

/// Average log-likelihood of a homoscedastic Gaussian around point
/// forecasts, with the variance fit by maximum likelihood on the same
/// residuals.
pub fn test_loglik_gaussian_baseline(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::shape("gaussian baseline", format!("{} forecasts for {} targets", predictions.len(), targets.len())));
    }
    let residuals: Vec<Vec<f64>> = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| y.iter().zip(p).map(|(a, b)| a - b).collect())
        .collect();
    let mut s2 = gaussian_mle_variance(&residuals)?;
    if s2 < MIN_VARIANCE {
        warn!("residual variance {s2:e} floored at {MIN_VARIANCE:e}");
        s2 = MIN_VARIANCE;
    }
    gaussian_avg_loglik(s2, targets[0].len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// Nominal levels `l/(L+1)`, `l = 1..=L`.
    pub mesh: Vec<f64>,
    /// Empirical frequency per horizon and level.
    pub eta_hat: Vec<Vec<f64>>,
}

pub fn calibration_mesh(levels: usize) -> Vec<f64> {
    (1..=levels).map(|l| l as f64 / (levels + 1) as f64).collect()
}

/// Empirical frequencies from predictive CDF values `pit[i][j] = F̂_ij(y_ij)`.
pub fn calibration_from_pit(pit: &[Vec<f64>], horizon: usize, levels: usize) -> CalibrationReport {
    let mesh = calibration_mesh(levels);
    let n = pit.len();
    let eta_hat = (0..horizon)
        .map(|j| {
            mesh.iter()
                .map(|&eta| {
                    if n == 0 {
                        return f64::NAN;
                    }
                    pit.iter().filter(|p| p[j] < eta).count() as f64 / n as f64
                })
                .collect()
        })
        .collect();
    CalibrationReport { mesh, eta_hat }
}

pub fn calibration(samples: &[MixtureSample], targets: &[Vec<f64>], horizon: usize, levels: usize) -> Result<CalibrationReport> {
    let pit = samples
        .iter()
        .zip(targets)
        .map(|(s, y)| (0..horizon).map(|j| mixture_cdf(s, j, y[j])).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(calibration_from_pit(&pit, horizon, levels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessReport {
    /// Mean predictive variance per horizon.
    pub variance: Vec<f64>,
}

pub fn sharpness_report(samples: &[MixtureSample], horizon: usize) -> Result<SharpnessReport> {
    if samples.is_empty() {
        return Ok(SharpnessReport { variance: Vec::new() });
    }
    Ok(SharpnessReport { variance: (0..horizon).map(|h| sharpness(samples, h)).collect::<Result<_>>()? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{base_log_pdf, BaseKind, SufficientStats};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mix(draws: &[(Vec<f64>, Vec<f64>)]) -> MixtureSample {
        MixtureSample::new(
            BaseKind::Gaussian,
            draws.iter().map(|(m, s)| SufficientStats::new(m.clone(), s.clone()).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unit_height_oracle_gives_zero() {
        // σ² = 1/(2π) makes the density at the mean exactly 1.
        let s = (1.0 / (2.0 * std::f64::consts::PI)).ln();
        let targets = vec![vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.25]];
        let samples: Vec<MixtureSample> = targets.iter().map(|y| mix(&[(y.clone(), vec![s; 3])])).collect();
        assert!(loglik_of_samples(&samples, &targets).unwrap().abs() < 1e-12);
        let dup: Vec<MixtureSample> = targets.iter().map(|y| mix(&[(y.clone(), vec![s; 3]), (y.clone(), vec![s; 3])])).collect();
        assert!(loglik_of_samples(&dup, &targets).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_draw_equals_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut samples = Vec::new();
        let mut targets = Vec::new();
        let mut direct = 0.0;
        for _ in 0..20 {
            let m: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            direct += (0..3).map(|h| base_log_pdf(BaseKind::Gaussian, y[h], m[h], s[h])).sum::<f64>();
            samples.push(mix(&[(m, s)]));
            targets.push(y);
        }
        let got = loglik_of_samples(&samples, &targets).unwrap();
        assert!((got - direct / 20.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_examples() {
        let y = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let ll = test_loglik_gaussian_baseline(&y, &y).unwrap();
        assert!(ll.is_finite() && ll > 0.0);
        let expect = gaussian_avg_loglik(MIN_VARIANCE, 2).unwrap();
        assert_eq!(ll, expect);

        // Residuals of ±c with c² = 1/(2π) give −T/2.
        let c = (1.0 / (2.0 * std::f64::consts::PI)).sqrt();
        let p = vec![vec![1.0 + c, 2.0 - c], vec![3.0 - c, 4.0 + c]];
        assert!((test_loglik_gaussian_baseline(&p, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_matches_density_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let n = rng.random_range(1..20);
            let t = rng.random_range(1..6);
            let p: Vec<Vec<f64>> = (0..n).map(|_| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<Vec<f64>> = (0..n).map(|_| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let s2: f64 = p.iter().flatten().zip(y.iter().flatten()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / (n * t) as f64;
            let brute: f64 = p
                .iter()
                .flatten()
                .zip(y.iter().flatten())
                .map(|(a, b)| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (a - b) * (a - b) / (2.0 * s2))
                .sum::<f64>()
                / n as f64;
            assert!((test_loglik_gaussian_baseline(&p, &y).unwrap() - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn true_cdf_is_calibrated_at_binomial_rate() {
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [100usize, 1000, 10_000] {
            let pit: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| normal.cdf(rng.sample::<f64, _>(StandardNormal))).collect())
                .collect();
            let r = calibration_from_pit(&pit, 3, 12);
            for row in &r.eta_hat {
                for (&eta, &hat) in r.mesh.iter().zip(row) {
                    assert!((hat - eta).abs() <= 3.0 * (eta * (1.0 - eta) / n as f64).sqrt());
                }
            }
        }
    }

    #[test]
    fn degenerate_and_single_indicator() {
        let pit = vec![vec![0.5]; 5];
        let r = calibration_from_pit(&pit, 1, 12);
        for (&eta, &hat) in r.mesh.iter().zip(&r.eta_hat[0]) {
            assert_eq!(hat, if eta <= 0.5 { 0.0 } else { 1.0 });
        }
        let r = calibration_from_pit(&[vec![0.3]], 1, 1);
        assert_eq!(r.mesh, vec![0.5]);
        assert_eq!(r.eta_hat, vec![vec![1.0]]);
    }

    #[test]
    fn calibration_points_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<MixtureSample> = (0..50)
            .map(|_| mix(&[(vec![rng.random_range(-1.0..1.0); 2], vec![0.0; 2]), (vec![1.0, 0.0], vec![-1.0; 2])]))
            .collect();
        let targets: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-2.0..2.0); 2]).collect();
        let r = calibration(&samples, &targets, 2, 12).unwrap();
        for row in &r.eta_hat {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
        assert!(r.mesh.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sharpness_is_nonnegative() {
        let samples = vec![mix(&[(vec![0.0, 1.0], vec![-1.0, 0.0]), (vec![0.5, -1.0], vec![-2.0, 1.0])])];
        let r = sharpness_report(&samples, 2).unwrap();
        assert!(r.variance.iter().all(|&v| v >= 0.0));
        assert!(r.variance[1] > r.variance[0]);
    }
}
