use std::fmt::Write as _;
use std::path::Path;

use super::cgm::{partition, segment, RawSeries, Segment, Split};
use super::normalize::Affine;
use super::synthetic::SyntheticSets;
use super::window::{windowize, windowize_synthetic, WindowSample, TIME_FEATURES};
use super::{CGM_MAX_JUMP, CGM_STEP_SECONDS};
use crate::error::{Error, Result};

/// Name of the embedding row shared by subjects unseen at training time.
pub const SHARED_SUBJECT: &str = "<shared>";

/// Normalized windows for all three splits plus what is needed to rerun or
/// invert the preprocessing.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub manifest: Manifest,
}

/// Text-serializable record of split assignment and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// `synthetic` or `cgm`.
    pub kind: String,
    pub affine: Affine,
    /// Embedding-table order; index 0 is the shared row.
    pub subjects: Vec<String>,
    pub d_t: usize,
    /// `(source id, split)`.
    pub assignment: Vec<(String, Split)>,
}

impl Manifest {
    pub fn subject_index(&self, id: &str) -> usize {
        self.subjects.iter().position(|s| s == id).unwrap_or(0)
    }
}

impl Dataset {
    /// Windows every synthetic series with unit stride. The affine is fit on
    /// training values unless `affine` is given.
    pub fn from_synthetic(sets: &SyntheticSets, t_enc: usize, t_pred: usize, affine: Option<Affine>) -> Self {
        let affine = affine.unwrap_or_else(|| {
            let vals: Vec<f64> = sets.train.iter().flat_map(|s| s.values.iter().copied()).collect();
            Affine::fit(&vals)
        });
        let build = |series: &[super::SyntheticSeries]| -> Vec<WindowSample> {
            let mut out: Vec<WindowSample> =
                series.iter().flat_map(|s| windowize_synthetic(s, t_enc, t_pred, 1)).collect();
            out.iter_mut().for_each(|w| affine.apply_window(w));
            out
        };
        let mut assignment = Vec::new();
        for (set, split) in [(&sets.train, Split::Train), (&sets.val, Split::Val), (&sets.test, Split::Test)] {
            assignment.extend(set.iter().map(|s| (format!("s{}", s.id), split)));
        }
        Dataset {
            train: build(&sets.train),
            val: build(&sets.val),
            test: build(&sets.test),
            manifest: Manifest {
                kind: "synthetic".into(),
                affine,
                subjects: vec![SHARED_SUBJECT.into()],
                d_t: 0,
                assignment,
            },
        }
    }

    /// Segments, partitions, windows, and normalizes CGM series.
    ///
    /// `fixed` carries normalization and subject table from a trained model so
    /// new data is mapped identically.
    pub fn from_cgm(
        raw: &[RawSeries],
        t_enc: usize,
        t_pred: usize,
        seed: u64,
        fixed: Option<(Affine, Vec<String>)>,
    ) -> Result<Self> {
        let mut segments: Vec<Segment> = raw
            .iter()
            .flat_map(|s| segment(s, CGM_MAX_JUMP, CGM_STEP_SECONDS, t_enc + t_pred))
            .collect();
        segments.sort_by(|a, b| a.subject_id.cmp(&b.subject_id).then(a.start.cmp(&b.start)));
        let parts = partition(&segments, seed);

        let (affine, subjects) = match fixed {
            Some(f) => f,
            None => {
                let vals: Vec<f64> = parts.train.iter().flat_map(|s| s.values.iter().copied()).collect();
                let mut subjects = vec![SHARED_SUBJECT.to_string()];
                subjects.extend(raw.iter().map(|s| s.subject_id.clone()));
                (Affine::fit(&vals), subjects)
            }
        };
        let manifest = Manifest { kind: "cgm".into(), affine, subjects, d_t: TIME_FEATURES, assignment: parts.assignment.clone() };
        let build = |segs: &[Segment]| -> Result<Vec<WindowSample>> {
            let mut out = Vec::new();
            for s in segs {
                let mut w = windowize(s, manifest.subject_index(&s.subject_id), t_enc, t_pred, 1)?;
                w.iter_mut().for_each(|x| affine.apply_window(x));
                out.extend(w);
            }
            Ok(out)
        };
        Ok(Dataset { train: build(&parts.train)?, val: build(&parts.val)?, test: build(&parts.test)?, manifest })
    }
}

/// Writes the manifest as `key=value` lines.
pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "kind={}", m.kind);
    let _ = writeln!(s, "norm.mean={}", m.affine.mean);
    let _ = writeln!(s, "norm.sd={}", m.affine.sd);
    let _ = writeln!(s, "d_t={}", m.d_t);
    let _ = writeln!(s, "subjects={}", m.subjects.join(","));
    for (id, split) in &m.assignment {
        let _ = writeln!(s, "split.{id}={}", split.as_str());
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: String| Error::Data { path: path.to_path_buf(), detail: d };
    let mut m = Manifest {
        kind: String::new(),
        affine: Affine::default(),
        subjects: Vec::new(),
        d_t: 0,
        assignment: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("line {}: bad number", n + 1)));
        match k {
            "kind" => m.kind = v.to_string(),
            "norm.mean" => m.affine.mean = num(v)?,
            "norm.sd" => m.affine.sd = num(v)?,
            "d_t" => m.d_t = v.parse().map_err(|_| bad(format!("line {}: bad d_t", n + 1)))?,
            "subjects" => m.subjects = v.split(',').map(str::to_string).collect(),
            _ => {
                let id = k.strip_prefix("split.").ok_or_else(|| bad(format!("line {}: unknown key {k}", n + 1)))?;
                m.assignment.push((id.to_string(), v.parse()?));
            }
        }
    }
    Ok(m)
}
