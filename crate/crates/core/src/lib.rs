//! Measurement, classification, and repair of the modality gap between
//! paired image/text embedding sets.
//!
//! The crate covers the full pipeline over precomputed embeddings:
//!
//! * [`embstore`] — matrix file formats, pairing, and row normalization
//! * [`gapmetrics`] — centroid distance, linear separability, minimum
//!   cosine distance, severity bands, and the piecewise severity curves
//! * [`transforms`] — post-hoc repairs (standardization, clipping,
//!   shift-along-the-gap)
//! * [`activation`] — per-dimension profiling, peak detection, and the
//!   peak-induced cosine upper bound
//! * [`bnlayer`] — per-modality batch-norm state over frozen embeddings
//! * [`losses`] — contrastive/cyclic objectives and analytic gradients
//!   for the batch-norm parameters
//! * [`trainer`] — running-statistics fitting and affine training
//! * [`evaltasks`] — retrieval, zero-shot classification, human-judgment
//!   correlation, pair scoring, and mean-rank aggregation
//! * [`synth`] — seeded synthetic datasets for tests and benchmarks

pub mod activation;
pub mod bnlayer;
pub mod embstore;
pub mod error;
pub mod evaltasks;
pub mod gapmetrics;
mod linalg;
pub mod losses;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod transforms;

pub use embstore::{EmbFormat, EmbeddingMatrix, PairedDataset};
pub use error::{Error, ErrorCategory, Result};
pub use gapmetrics::{GapReport, Severity};

/// Cosine similarity between two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    linalg::cosine(a, b)
}
