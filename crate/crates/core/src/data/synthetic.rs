//! Branching Gaussian-process trajectories.
//!
//! Every series follows one smooth GP path on the negative part of the grid.
//! At `t = 0` a coin picks the increasing or decreasing branch; from then on a
//! linear ramp of slope `±slope` plus an independent GP residual anchored at
//! zero is added. The marginal over series is unimodal before 0 and bimodal
//! after.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub step: f64,
    /// Probability of the increasing branch.
    pub branch_prob: f64,
    pub length_scale: f64,
    pub amplitude: f64,
    /// Amplitude of the post-branch residual GP.
    pub residual_amplitude: f64,
    pub noise: f64,
    pub slope: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 2000,
            n_val: 100,
            n_test: 100,
            t_start: -4.0,
            t_end: 3.0,
            step: 0.5,
            branch_prob: 0.5,
            length_scale: 1.0,
            amplitude: 0.15,
            residual_amplitude: 0.05,
            noise: 0.02,
            slope: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("synthetic series counts must be positive");
        }
        if !(self.length_scale > 0.0 && self.amplitude > 0.0 && self.noise > 0.0) {
            return bad("length scale, amplitude, and noise must be positive");
        }
        if self.residual_amplitude < 0.0 {
            return bad("residual amplitude must be nonnegative");
        }
        if !(self.branch_prob >= 0.0 && self.branch_prob <= 1.0) {
            return bad("branch probability must lie in [0, 1]");
        }
        if !(self.step > 0.0 && self.t_end > self.t_start && self.t_start < 0.0 && self.t_end >= 0.0) {
            return bad("grid must straddle 0 with a positive step");
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.t_end - self.t_start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.t_start + self.step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub id: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `Some(true)` for the increasing branch; unknown when read back from CSV.
    pub up: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSets {
    pub train: Vec<SyntheticSeries>,
    pub val: Vec<SyntheticSeries>,
    pub test: Vec<SyntheticSeries>,
}

fn se_cholesky(times: &[f64], amplitude: f64, length_scale: f64) -> Result<DMatrix<f64>> {
    let n = times.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d = times[i] - times[j];
        amplitude * amplitude * (-d * d / (2.0 * length_scale * length_scale)).exp()
            + if i == j { 1e-10 } else { 0.0 }
    });
    k.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numeric { layer: "synthetic".into(), detail: "kernel not positive definite".into() })
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn generate_set(cfg: &SyntheticConfig, n: usize, id0: usize, seed: u64) -> Result<Vec<SyntheticSeries>> {
    let grid = cfg.grid();
    let first_pos = grid.iter().position(|&t| t >= 0.0).unwrap_or(grid.len());
    let shared = se_cholesky(&grid, cfg.amplitude, cfg.length_scale)?;
    let positive = &grid[first_pos..];
    let residual = if positive.is_empty() {
        None
    } else {
        Some(se_cholesky(positive, cfg.residual_amplitude.max(1e-12), cfg.length_scale)?)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = &shared * standard_normal(&mut rng, grid.len());
        let up = rng.random::<f64>() < cfg.branch_prob;
        let sign = if up { 1.0 } else { -1.0 };
        let resid = residual.as_ref().map(|l| {
            let r = l * standard_normal(&mut rng, positive.len());
            let r0 = r[0];
            r.map(|v| v - r0)
        });
        let values = grid
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let mut v = base[j] + cfg.noise * rng.sample::<f64, _>(StandardNormal);
                if j >= first_pos {
                    v += sign * cfg.slope * t + resid.as_ref().map_or(0.0, |r| r[j - first_pos]);
                }
                v
            })
            .collect();
        out.push(SyntheticSeries { id: id0 + i, times: grid.clone(), values, up: Some(up) });
    }
    Ok(out)
}

/// Draws the train/validation/test series. Each set uses its own stream
/// derived from `seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticSets> {
    cfg.validate()?;
    Ok(SyntheticSets {
        train: generate_set(cfg, cfg.n_train, 0, derive_seed(seed, 0))?,
        val: generate_set(cfg, cfg.n_val, cfg.n_train, derive_seed(seed, 1))?,
        test: generate_set(cfg, cfg.n_test, cfg.n_train + cfg.n_val, derive_seed(seed, 2))?,
    })
}

/// Writes `series_id,time,value` rows.
pub fn write_synthetic_csv(path: &Path, series: &[SyntheticSeries]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "series_id,time,value").map_err(io)?;
    for s in series {
        for (t, v) in s.times.iter().zip(&s.values) {
            writeln!(f, "{},{},{}", s.id, t, v).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

pub fn read_synthetic_csv(path: &Path) -> Result<Vec<SyntheticSeries>> {
    let data_err = |detail: String| Error::Data { path: path.to_path_buf(), detail };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| data_err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["series_id", "time", "value"] {
        return Err(data_err("expected header series_id,time,value".into()));
    }
    let mut by_id: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| data_err(format!("line {line}: '{}' is not numeric", &record[i])))
        };
        let id: usize = record[0].parse().map_err(|_| data_err(format!("line {line}: bad series_id")))?;
        by_id.entry(id).or_default().push((parse(1)?, parse(2)?));
    }
    Ok(by_id
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            SyntheticSeries {
                id,
                times: rows.iter().map(|r| r.0).collect(),
                values: rows.iter().map(|r| r.1).collect(),
                up: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SyntheticConfig {
        SyntheticConfig { n_train: n, n_val: 5, n_test: 5, ..Default::default() }
    }

    #[test]
    fn grid_layout() {
        let g = SyntheticConfig::default().grid();
        assert_eq!(g.len(), 15);
        assert_eq!(g[0], -4.0);
        assert_eq!(g[14], 3.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(20), 4).unwrap();
        let b = generate_synthetic(&small(20), 4).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(20), 5).unwrap();
        assert_ne!(a.train[0].values, c.train[0].values);
    }

    #[test]
    fn all_up_when_branch_certain() {
        let cfg = SyntheticConfig { branch_prob: 1.0, ..small(300) };
        let s = generate_synthetic(&cfg, 1).unwrap();
        assert!(s.train.iter().all(|x| x.up == Some(true)));
        let at = |j: usize| s.train.iter().map(|x| x.values[j]).sum::<f64>() / 300.0;
        assert!(at(14) > at(8));
    }

    #[test]
    fn final_time_is_bimodal() {
        // Histogram oracle: density at the midpoint of the two branch means is
        // under half of either mode's density.
        let s = generate_synthetic(&small(2000), 11).unwrap();
        let last: Vec<(f64, bool)> = s.train.iter().map(|x| (x.values[14], x.up.unwrap())).collect();
        let mean_of = |up: bool| {
            let v: Vec<f64> = last.iter().filter(|p| p.1 == up).map(|p| p.0).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (hi, lo) = (mean_of(true), mean_of(false));
        let mid = 0.5 * (hi + lo);
        let width = 0.1;
        let density = |c: f64| last.iter().filter(|p| (p.0 - c).abs() < width / 2.0).count() as f64;
        assert!(density(mid) < 0.5 * density(hi), "{} vs {}", density(mid), density(hi));
        assert!(density(mid) < 0.5 * density(lo));
    }

    #[test]
    fn branching_region_has_larger_spread() {
        let s = generate_synthetic(&small(2000), 3).unwrap();
        let grid = SyntheticConfig::default().grid();
        let var_at = |j: usize| {
            let v: Vec<f64> = s.train.iter().map(|x| x.values[j]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let pre: Vec<f64> = (0..grid.len()).filter(|&j| grid[j] < 0.0).map(var_at).collect();
        let post: Vec<f64> = (0..grid.len()).filter(|&j| grid[j] >= 0.0).map(var_at).collect();
        let max_pre = pre.iter().copied().fold(0.0, f64::max);
        // t = 0 itself carries no branch offset yet.
        assert!(post[1..].iter().all(|&v| v > max_pre));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&post) > mean(&pre));
    }

    #[test]
    fn csv_round_trip() {
        let s = generate_synthetic(&small(3), 2).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_synthetic_csv(f.path(), &s.train).unwrap();
        let back = read_synthetic_csv(f.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in s.train.iter().zip(&back) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.times, b.times);
        }
    }
}
