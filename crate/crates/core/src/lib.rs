//! ECG biometric authentication toolkit.
//!
//! The pipeline runs from raw traces to accept/reject decisions:
//!
//! * [`ingest`] loads WFDB / CSV records and synthesizes desk-scale cohorts.
//! * [`dsp`] filters, resamples and normalizes traces and finds R/P/T peaks.
//! * [`segment`] cuts fixed 1000-sample encoder inputs (NPD, R2R, P2T).
//! * [`encoder`] is the 1D CNN feature extractor with hand-written backprop.
//! * [`metric`] scores feature vectors by absolute Pearson correlation.
//! * [`trainer`] runs siamese and triplet contrastive training.
//! * [`compress`] quantizes to power-of-two weights, prunes, and counts cycles.
//! * [`authdb`] stores enrolled templates and makes decisions.
//! * [`evalkit`] runs the genuine/impostor protocol, threshold sweeps and ROC.

pub mod authdb;
mod codec;
pub use codec::write_atomic;
pub mod compress;
pub mod dsp;
pub mod encoder;
pub mod evalkit;
pub mod ingest;
pub mod metric;
pub mod segment;
pub mod trainer;

/// Sampling rate every record is brought to before segmentation.
pub const TARGET_FS: u32 = 200;

/// Samples per encoder input segment.
pub const SEGMENT_LEN: usize = 1000;

/// Dimension of the canonical encoder's feature vector.
pub const FEATURE_DIM: usize = 2304;
