use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::dist::MixtureSample;
use crate::error::{Error, Result};

pub const HYPO_MGDL: f64 = 70.0;
pub const HYPER_MGDL: f64 = 180.0;
/// Targets closer to zero than this are left out of APE.
pub const APE_ZERO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventClass {
    Full,
    Hypo,
    Hyper,
    Event,
}

impl EventClass {
    pub const ALL: [EventClass; 4] = [EventClass::Full, EventClass::Hypo, EventClass::Hyper, EventClass::Event];

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::Full => "full",
            EventClass::Hypo => "hypo",
            EventClass::Hyper => "hyper",
            EventClass::Event => "event",
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown event class '{s}'")))
    }
}

/// Mixture mean per horizon.
pub fn point_forecast(sample: &MixtureSample) -> Vec<f64> {
    sample.mean()
}

/// Average absolute percentage error in percent; `None` when a target is
/// (numerically) zero.
pub fn ape(y: &[f64], y_hat: &[f64]) -> Option<f64> {
    if y.is_empty() || y.len() != y_hat.len() || y.iter().any(|v| v.abs() < APE_ZERO) {
        return None;
    }
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| ((a - b) / a).abs()).sum();
    Some(100.0 * s / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> f64 {
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    (s / y.len() as f64).sqrt()
}

/// Classes of a raw-scale forecast window.
pub fn classify_event(y_raw: &[f64], hypo: f64, hyper: f64) -> Vec<EventClass> {
    let mut out = vec![EventClass::Full];
    let lo = y_raw.iter().any(|&v| v < hypo);
    let hi = y_raw.iter().any(|&v| v > hyper);
    if lo {
        out.push(EventClass::Hypo);
    }
    if hi {
        out.push(EventClass::Hyper);
    }
    if lo || hi {
        out.push(EventClass::Event);
    }
    out
}

/// Median; the two central values are averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Errors of one forecast window.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub ape: Option<f64>,
    pub rmse: f64,
    pub classes: Vec<EventClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Forecast prefix length in steps.
    pub window: usize,
    pub class: EventClass,
    pub ape: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

/// Median APE/RMSE per class for one window length; classes without samples
/// are omitted.
pub fn aggregate_metrics(window: usize, samples: &[SampleError]) -> Vec<MetricsRow> {
    EventClass::ALL
        .into_iter()
        .filter_map(|class| {
            let members: Vec<&SampleError> = samples.iter().filter(|s| s.classes.contains(&class)).collect();
            if members.is_empty() {
                return None;
            }
            let apes: Vec<f64> = members.iter().filter_map(|s| s.ape).collect();
            let rmses: Vec<f64> = members.iter().map(|s| s.rmse).collect();
            Some(MetricsRow { window, class, ape: median(&apes), rmse: median(&rmses)?, n: members.len() })
        })
        .collect()
}

/// Window lengths reported for a prediction length: 3, 6, 9, 12 steps where
/// available, plus the full length.
pub fn report_windows(t_pred: usize) -> Vec<usize> {
    let mut w: Vec<usize> = [3, 6, 9, 12].into_iter().filter(|&w| w <= t_pred).collect();
    if !w.contains(&t_pred) {
        w.push(t_pred);
    }
    w
}

/// Metrics for every report window. `y_raw`/`y_hat_raw` hold one forecast per
/// window in original units; `events` enables hypo/hyper slicing.
pub fn metrics_report(y_raw: &[Vec<f64>], y_hat_raw: &[Vec<f64>], t_pred: usize, events: bool) -> MetricsReport {
    let mut rows = Vec::new();
    for w in report_windows(t_pred) {
        let samples: Vec<SampleError> = y_raw
            .iter()
            .zip(y_hat_raw)
            .map(|(y, p)| {
                let (y, p) = (&y[..w], &p[..w]);
                let classes = if events { classify_event(y, HYPO_MGDL, HYPER_MGDL) } else { vec![EventClass::Full] };
                SampleError { ape: ape(y, p), rmse: rmse(y, p), classes }
            })
            .collect();
        let excluded = samples.iter().filter(|s| s.ape.is_none()).count();
        if excluded > 0 {
            warn!("window {w}: {excluded} of {} samples have a zero target and are left out of APE", samples.len());
        }
        rows.extend(aggregate_metrics(w, &samples));
    }
    MetricsReport { rows }
}
