use chrono::{DateTime, Datelike, Timelike};

use super::cgm::Segment;
use super::synthetic::SyntheticSeries;
use crate::error::{Error, Result};

/// Calendar features per reading: day of year, day of month, day of week,
/// hour, minute.
pub const TIME_FEATURES: usize = 5;

/// One training/evaluation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `<source id>:<offset>`.
    pub id: String,
    /// Encoder inputs (normalized once a dataset is assembled).
    pub x: Vec<f64>,
    /// Row-major `(x.len() + y.len()) × d_t` features covering encoder and
    /// forecast positions.
    pub time_features: Vec<f64>,
    pub d_t: usize,
    pub subject: usize,
    /// Forecast targets (normalized once a dataset is assembled).
    pub y: Vec<f64>,
    /// Targets in original units.
    pub y_raw: Vec<f64>,
}

impl WindowSample {
    pub fn time_row(&self, pos: usize) -> &[f64] {
        &self.time_features[pos * self.d_t..(pos + 1) * self.d_t]
    }
}

/// Calendar features of a Unix timestamp, each scaled affinely to [−0.5, 0.5].
pub fn time_features(timestamp: i64) -> Result<[f64; TIME_FEATURES]> {
    let dt = DateTime::from_timestamp(timestamp, 0)
        .ok_or_else(|| Error::Dataset(format!("timestamp {timestamp} out of range")))?;
    Ok([
        (dt.ordinal0() as f64) / 365.0 - 0.5,
        (dt.day0() as f64) / 30.0 - 0.5,
        (dt.weekday().num_days_from_monday() as f64) / 6.0 - 0.5,
        (dt.hour() as f64) / 23.0 - 0.5,
        (dt.minute() as f64) / 59.0 - 0.5,
    ])
}

fn slide(
    source: &str,
    values: &[f64],
    features: &[f64],
    d_t: usize,
    subject: usize,
    t_enc: usize,
    t_pred: usize,
    stride: usize,
) -> Vec<WindowSample> {
    let span = t_enc + t_pred;
    if values.len() < span || stride == 0 {
        return Vec::new();
    }
    (0..=values.len() - span)
        .step_by(stride)
        .map(|o| WindowSample {
            id: format!("{source}:{o}"),
            x: values[o..o + t_enc].to_vec(),
            time_features: features[o * d_t..(o + span) * d_t].to_vec(),
            d_t,
            subject,
            y: values[o + t_enc..o + span].to_vec(),
            y_raw: values[o + t_enc..o + span].to_vec(),
        })
        .collect()
}

/// Sliding windows over a CGM segment with calendar features.
pub fn windowize(
    segment: &Segment,
    subject: usize,
    t_enc: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    let mut features = Vec::with_capacity(segment.values.len() * TIME_FEATURES);
    for i in 0..segment.values.len() {
        features.extend_from_slice(&time_features(segment.timestamp(i))?);
    }
    Ok(slide(&segment.id(), &segment.values, &features, TIME_FEATURES, subject, t_enc, t_pred, stride))
}

/// Sliding windows over a synthetic series; no calendar features.
pub fn windowize_synthetic(series: &SyntheticSeries, t_enc: usize, t_pred: usize, stride: usize) -> Vec<WindowSample> {
    slide(&format!("s{}", series.id), &series.values, &[], 0, 0, t_enc, t_pred, stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(len: usize) -> Segment {
        Segment {
            subject_id: "p".into(),
            start: 1_600_000_000,
            step: 300,
            values: (0..len).map(|i| 100.0 + i as f64).collect(),
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(windowize(&seg(14), 0, 12, 2, 1).unwrap().len(), 1);
        assert_eq!(windowize(&seg(16), 0, 12, 2, 1).unwrap().len(), 3);
        assert!(windowize(&seg(13), 0, 12, 2, 1).unwrap().is_empty());
    }

    #[test]
    fn windows_are_contiguous() {
        let w = windowize(&seg(20), 3, 4, 2, 1).unwrap();
        for (o, win) in w.iter().enumerate() {
            let expect: Vec<f64> = (o..o + 6).map(|i| 100.0 + i as f64).collect();
            assert_eq!([win.x.clone(), win.y.clone()].concat(), expect);
            assert_eq!(win.time_features.len(), 6 * TIME_FEATURES);
            assert_eq!(win.subject, 3);
        }
    }

    #[test]
    fn hour_scaling() {
        // 2021-03-10 12:30:00 UTC, a Wednesday.
        let f = time_features(1_615_379_400).unwrap();
        assert!((f[3] - (12.0 / 23.0 - 0.5)).abs() < 1e-15);
        assert!((f[3] - 0.0217).abs() < 1e-4);
        assert!((f[4] - (30.0 / 59.0 - 0.5)).abs() < 1e-15);
        assert!((f[2] - (2.0 / 6.0 - 0.5)).abs() < 1e-15);
        assert!((f[1] - (9.0 / 30.0 - 0.5)).abs() < 1e-15);
        assert!((f[0] - (68.0 / 365.0 - 0.5)).abs() < 1e-15);
        assert!(f.iter().all(|v| (-0.5..=0.5).contains(v)));
    }
}
