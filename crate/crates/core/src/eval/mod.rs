//! Point-forecast accuracy, likelihoods, calibration, and sharpness.

mod metrics;
mod probabilistic;
mod report;

pub use metrics::{
    aggregate_metrics, ape, classify_event, median, metrics_report, point_forecast, report_windows, rmse, EventClass,
    MetricsReport, MetricsRow, SampleError, APE_ZERO, HYPER_MGDL, HYPO_MGDL,
};
pub use probabilistic::{
    calibration, calibration_from_pit, calibration_mesh, loglik_of_samples, predict_all, sharpness_report,
    test_loglik_gaussian_baseline, test_loglik_imm, CalibrationReport, SharpnessReport, MIN_VARIANCE,
};
pub use report::{calibration_svg, emit_reports, read_reports, Reports};
