//! Data sources and preprocessing: the synthetic branching-trajectory
//! generator and the CGM ingestion, segmentation, split, and windowing chain.

mod cgm;
mod dataset;
mod normalize;
mod synthetic;
mod window;

pub use cgm::{ingest_csv, partition, segment, Partition, RawSeries, Reading, Segment, Split};
pub use dataset::{read_manifest, write_manifest, Dataset, Manifest, SHARED_SUBJECT};
pub use normalize::Affine;
pub use synthetic::{
    generate_synthetic, read_synthetic_csv, write_synthetic_csv, SyntheticConfig, SyntheticSeries,
    SyntheticSets,
};
pub use window::{time_features, windowize, windowize_synthetic, WindowSample, TIME_FEATURES};

/// Nominal CGM sampling interval in seconds.
pub const CGM_STEP_SECONDS: i64 = 300;
/// Largest allowed change between consecutive readings, in mg/dL.
pub const CGM_MAX_JUMP: f64 = 40.0;
