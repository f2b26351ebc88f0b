use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    /// Unix seconds.
    pub timestamp: i64,
    /// mg/dL.
    pub glucose: f64,
}

/// All readings of one subject, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub subject_id: String,
    pub readings: Vec<Reading>,
}

/// Gap-free run of readings with bounded neighbor-to-neighbor change.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub subject_id: String,
    pub start: i64,
    pub step: i64,
    pub values: Vec<f64>,
}

impl Segment {
    /// Stable identifier: subject plus start time.
    pub fn id(&self) -> String {
        format!("{}@{}", self.subject_id, self.start)
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + self.step * i as i64
    }
}

/// Reads `subject_id,timestamp,glucose_mgdl` rows, grouped by subject and
/// sorted by time.
pub fn ingest_csv(path: &Path) -> Result<Vec<RawSeries>> {
    let data_err = |detail: String| Error::Data { path: path.to_path_buf(), detail };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| data_err(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(format!("missing column '{name}'")))
    };
    let (c_subject, c_time, c_glucose) = (col("subject_id")?, col("timestamp")?, col("glucose_mgdl")?);

    let mut by_subject: BTreeMap<String, Vec<Reading>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let subject = field(c_subject).to_string();
        if subject.is_empty() {
            return Err(data_err(format!("line {line}: empty subject_id")));
        }
        let timestamp: i64 = field(c_time)
            .parse()
            .map_err(|_| data_err(format!("line {line}: timestamp '{}' is not an integer", field(c_time))))?;
        let glucose: f64 = field(c_glucose)
            .parse()
            .map_err(|_| data_err(format!("line {line}: glucose '{}' is not numeric", field(c_glucose))))?;
        if !glucose.is_finite() || glucose <= 0.0 {
            return Err(data_err(format!("line {line}: glucose {glucose} must be positive")));
        }
        by_subject.entry(subject).or_default().push(Reading { timestamp, glucose });
    }

    let mut out = Vec::with_capacity(by_subject.len());
    for (subject_id, mut readings) in by_subject {
        readings.sort_by_key(|r| r.timestamp);
        if let Some(w) = readings.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(data_err(format!(
                "duplicate timestamp {} for subject {subject_id}",
                w[0].timestamp
            )));
        }
        out.push(RawSeries { subject_id, readings });
    }
    Ok(out)
}

/// Splits a series at every irregular time step and at every change larger
/// than `max_jump`, dropping pieces shorter than `min_len`. Gaps are never
/// filled.
pub fn segment(series: &RawSeries, max_jump: f64, step: i64, min_len: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut current: Vec<Reading> = Vec::new();
    let flush = |run: &mut Vec<Reading>, out: &mut Vec<Segment>| {
        if !run.is_empty() && run.len() >= min_len {
            out.push(Segment {
                subject_id: series.subject_id.clone(),
                start: run[0].timestamp,
                step,
                values: run.iter().map(|r| r.glucose).collect(),
            });
        }
        run.clear();
    };
    for &r in &series.readings {
        if let Some(prev) = current.last() {
            let contiguous = r.timestamp - prev.timestamp == step;
            let smooth = (r.glucose - prev.glucose).abs() <= max_jump;
            if !(contiguous && smooth) {
                flush(&mut current, &mut out);
            }
        }
        current.push(r);
    }
    flush(&mut current, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
    /// `(segment id, split)` in input order.
    pub assignment: Vec<(String, Split)>,
}

/// Assigns whole segments to train/val/test in 20:1:1 proportion by seeded
/// shuffle. Validation and test sizes are `⌊n/22⌋`; the remainder trains.
pub fn partition(segments: &[Segment], seed: u64) -> Partition {
    let n = segments.len();
    let mut order: Vec<usize> = (0..n).collect();
    let held_out = if n < 22 {
        warn!("only {n} segments; need at least 22 for a 20:1:1 split, assigning all to train");
        0
    } else {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        n / 22
    };
    let mut split = vec![Split::Train; n];
    for &i in &order[..held_out] {
        split[i] = Split::Val;
    }
    for &i in &order[held_out..2 * held_out] {
        split[i] = Split::Test;
    }
    let mut p = Partition::default();
    for (seg, &s) in segments.iter().zip(&split) {
        p.assignment.push((seg.id(), s));
        match s {
            Split::Train => p.train.push(seg.clone()),
            Split::Val => p.val.push(seg.clone()),
            Split::Test => p.test.push(seg.clone()),
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn series(values: &[(i64, f64)]) -> RawSeries {
        RawSeries {
            subject_id: "a".into(),
            readings: values.iter().map(|&(timestamp, glucose)| Reading { timestamp, glucose }).collect(),
        }
    }

    #[test]
    fn ingest_header_only() {
        let f = write_csv("subject_id,timestamp,glucose_mgdl\n");
        assert!(ingest_csv(f.path()).unwrap().is_empty());
    }

    #[test]
    fn ingest_groups_and_sorts() {
        let f = write_csv(
            "subject_id,timestamp,glucose_mgdl\nb,600,110\na,300,100\nb,0,90\nb,300,95\n",
        );
        let s = ingest_csv(f.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].subject_id, "a");
        let times: Vec<i64> = s[1].readings.iter().map(|r| r.timestamp).collect();
        assert_eq!(times, vec![0, 300, 600]);
    }

    #[test]
    fn ingest_three_rows_one_subject() {
        let f = write_csv("subject_id,timestamp,glucose_mgdl\nx,0,100\nx,300,101\nx,600,102\n");
        let s = ingest_csv(f.path()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].readings.len(), 3);
    }

    #[test]
    fn ingest_errors() {
        let missing = write_csv("subject_id,timestamp\nx,0\n");
        assert!(ingest_csv(missing.path()).unwrap_err().to_string().contains("glucose_mgdl"));

        let bad = write_csv("subject_id,timestamp,glucose_mgdl\nx,0,100\nx,300,high\n");
        let msg = ingest_csv(bad.path()).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");

        let dup = write_csv("subject_id,timestamp,glucose_mgdl\nx,0,100\nx,0,101\n");
        assert!(ingest_csv(dup.path()).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn segment_jump_rule_is_strict() {
        let split = segment(&series(&[(0, 100.0), (300, 145.0)]), 40.0, 300, 1);
        assert_eq!(split.len(), 2);
        let kept = segment(&series(&[(0, 100.0), (300, 140.0)]), 40.0, 300, 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].values, vec![100.0, 140.0]);
    }

    #[test]
    fn segment_splits_gaps_without_filling() {
        let s = segment(&series(&[(0, 100.0), (300, 101.0), (900, 102.0), (1200, 103.0)]), 40.0, 300, 1);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].values.len() + s[1].values.len(), 4);
        assert_eq!(s[1].start, 900);
    }

    #[test]
    fn segment_drops_short_pieces() {
        let s = segment(&series(&[(0, 100.0), (300, 101.0), (600, 200.0)]), 40.0, 300, 2);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].values, vec![100.0, 101.0]);
    }

    fn segs(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| Segment { subject_id: format!("s{}", i % 3), start: i as i64, step: 300, values: vec![1.0] })
            .collect()
    }

    #[test]
    fn partition_ratios() {
        let p = partition(&segs(22), 1);
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (20, 1, 1));
        let p = partition(&segs(44), 1);
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (40, 2, 2));
        let p = partition(&segs(10), 1);
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (10, 0, 0));
    }

    #[test]
    fn partition_is_deterministic_and_disjoint() {
        let s = segs(67);
        let a = partition(&s, 7);
        let b = partition(&s, 7);
        assert_eq!(a.assignment, b.assignment);
        let mut ids: Vec<String> = a.train.iter().chain(&a.val).chain(&a.test).map(Segment::id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 67);
    }
}
