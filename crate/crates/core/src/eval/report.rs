use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{MetricsReport, MetricsRow};
use super::probabilistic::{CalibrationReport, SharpnessReport};
use crate::error::{Error, Result};

/// Everything written by [`emit_reports`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reports {
    pub metrics: MetricsReport,
    pub calibration: Option<CalibrationReport>,
    pub sharpness: Option<SharpnessReport>,
    /// `(model, average log-likelihood)`.
    pub loglik: Vec<(String, f64)>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes metrics.csv, calibration.csv, sharpness.csv, loglik.csv, and,
/// when a calibration report is present, calibration.svg.
pub fn emit_reports(dir: &Path, r: &Reports) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut s = String::from("window,class,ape,rmse,n\n");
    for row in &r.metrics.rows {
        let _ = writeln!(s, "{},{},{},{},{}", row.window, row.class, opt(row.ape), row.rmse, row.n);
    }
    write(&dir.join("metrics.csv"), &s)?;

    let mut s = String::from("horizon,eta,eta_hat\n");
    if let Some(c) = &r.calibration {
        for (j, row) in c.eta_hat.iter().enumerate() {
            for (eta, hat) in c.mesh.iter().zip(row) {
                let _ = writeln!(s, "{},{},{}", j + 1, eta, hat);
            }
        }
    }
    write(&dir.join("calibration.csv"), &s)?;

    let mut s = String::from("horizon,variance\n");
    if let Some(sh) = &r.sharpness {
        for (j, v) in sh.variance.iter().enumerate() {
            let _ = writeln!(s, "{},{}", j + 1, v);
        }
    }
    write(&dir.join("sharpness.csv"), &s)?;

    let mut s = String::from("model,avg_ll\n");
    for (m, v) in &r.loglik {
        let _ = writeln!(s, "{m},{v}");
    }
    write(&dir.join("loglik.csv"), &s)?;

    if let Some(c) = &r.calibration {
        write(&dir.join("calibration.svg"), &calibration_svg(c))?;
    }
    Ok(())
}

/// Reliability diagram: one polyline per horizon and the diagonal.
pub fn calibration_svg(c: &CalibrationReport) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let xy = |eta: f64, hat: f64| (PAD + eta * SIZE, PAD + (1.0 - hat) * SIZE);
    let total = SIZE + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#);
    let (x0, y0) = xy(0.0, 0.0);
    let (x1, y1) = xy(1.0, 1.0);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="gray" stroke-dasharray="4 4"/>"#);
    let n = c.eta_hat.len().max(1);
    for (j, row) in c.eta_hat.iter().enumerate() {
        let points: Vec<String> = c
            .mesh
            .iter()
            .zip(row)
            .filter(|(_, h)| h.is_finite())
            .map(|(&e, &h)| {
                let (x, y) = xy(e, h);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let hue = 240.0 * j as f64 / n as f64;
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="hsl({hue:.0},70%,45%)" stroke-width="1.5"><title>horizon {}</title></polyline>"#,
            points.join(" "),
            j + 1
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">nominal level</text>"#, PAD + SIZE / 2.0, total - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">empirical frequency</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let bad = |d: String| Error::Data { path: path.to_path_buf(), detail: d };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let h: Vec<String> = reader.headers().map_err(|e| bad(e.to_string()))?.iter().map(str::to_string).collect();
    if h.join(",") != header {
        return Err(bad(format!("expected header {header}")));
    }
    reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| bad(e.to_string())))
        .collect()
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Data { path: path.to_path_buf(), detail: format!("'{s}' is not a number") })
}

/// Parses the CSVs written by [`emit_reports`].
pub fn read_reports(dir: &Path) -> Result<Reports> {
    let p = dir.join("metrics.csv");
    let metrics = MetricsReport {
        rows: rows(&p, "window,class,ape,rmse,n")?
            .iter()
            .map(|r| {
                Ok(MetricsRow {
                    window: num(&p, &r[0])?,
                    class: r[1].parse()?,
                    ape: if r[2].is_empty() { None } else { Some(num(&p, &r[2])?) },
                    rmse: num(&p, &r[3])?,
                    n: num(&p, &r[4])?,
                })
            })
            .collect::<Result<_>>()?,
    };

    let p = dir.join("calibration.csv");
    let cal = rows(&p, "horizon,eta,eta_hat")?;
    let calibration = if cal.is_empty() {
        None
    } else {
        let mut mesh = Vec::new();
        let mut eta_hat: Vec<Vec<f64>> = Vec::new();
        for r in &cal {
            let j: usize = num(&p, &r[0])?;
            if j > eta_hat.len() {
                eta_hat.push(Vec::new());
            }
            if j == 1 {
                mesh.push(num(&p, &r[1])?);
            }
            eta_hat[j - 1].push(num(&p, &r[2])?);
        }
        Some(CalibrationReport { mesh, eta_hat })
    };

    let p = dir.join("sharpness.csv");
    let sh = rows(&p, "horizon,variance")?;
    let sharpness = if sh.is_empty() {
        None
    } else {
        Some(SharpnessReport { variance: sh.iter().map(|r| num(&p, &r[1])).collect::<Result<_>>()? })
    };

    let p = dir.join("loglik.csv");
    let loglik = rows(&p, "model,avg_ll")?
        .iter()
        .map(|r| Ok((r[0].clone(), num(&p, &r[1])?)))
        .collect::<Result<_>>()?;
    Ok(Reports { metrics, calibration, sharpness, loglik })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EventClass;

    fn sample_reports() -> Reports {
        Reports {
            metrics: MetricsReport {
                rows: vec![
                    MetricsRow { window: 3, class: EventClass::Full, ape: Some(7.25), rmse: 12.0 / 7.0, n: 10 },
                    MetricsRow { window: 3, class: EventClass::Hypo, ape: None, rmse: 0.1, n: 2 },
                ],
            },
            calibration: Some(CalibrationReport {
                mesh: vec![0.25, 0.5, 0.75],
                eta_hat: vec![vec![0.2, 0.5, 0.9], vec![0.1, 0.4, 0.7]],
            }),
            sharpness: Some(SharpnessReport { variance: vec![0.01, 1.0 / 3.0] }),
            loglik: vec![("imm".into(), -0.65), ("gaussian".into(), -4.0 / 3.0)],
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_reports();
        emit_reports(dir.path(), &r).unwrap();
        assert_eq!(read_reports(dir.path()).unwrap(), r);
    }

    #[test]
    fn empty_reports_are_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_reports(dir.path(), &Reports::default()).unwrap();
        for (f, h) in [
            ("metrics.csv", "window,class,ape,rmse,n\n"),
            ("calibration.csv", "horizon,eta,eta_hat\n"),
            ("sharpness.csv", "horizon,variance\n"),
            ("loglik.csv", "model,avg_ll\n"),
        ] {
            assert_eq!(std::fs::read_to_string(dir.path().join(f)).unwrap(), h);
        }
        assert_eq!(read_reports(dir.path()).unwrap(), Reports::default());
    }

    #[test]
    fn svg_has_one_polyline_per_horizon_and_one_reference_line() {
        for t in [1, 2, 12] {
            let c = CalibrationReport { mesh: vec![0.5], eta_hat: vec![vec![0.4]; t] };
            let svg = calibration_svg(&c);
            assert_eq!(svg.matches("<polyline").count(), t);
            assert_eq!(svg.matches("<line").count(), 1);
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }
}
