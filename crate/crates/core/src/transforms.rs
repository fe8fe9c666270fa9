//! Post-hoc embedding repairs: per-modality standardization, activation
//! clipping, and the shift-along-the-gap baseline.
//!
//! All transforms preserve the row count, the hidden dimension, and the
//! row order, and never mutate their inputs.

use serde::{Deserialize, Serialize};

use crate::embstore::{normalize_rows, EmbeddingMatrix, PairedDataset};
use crate::error::{Error, Result};
use crate::linalg;

/// Default clipping range for activation clamping.
pub const DEFAULT_CLIP_LO: f64 = -0.1;
pub const DEFAULT_CLIP_HI: f64 = 0.1;

/// Column mean and population standard deviation of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub mean: Vec<f64>,
    pub per_dim_std: Vec<f64>,
    pub source_n: usize,
}

/// Shift strength for the gap-vector baseline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MgShiftConfig {
    pub lambda: f64,
}

impl MgShiftConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::InvalidConfig {
                what: format!("lambda must be finite, got {lambda}"),
            });
        }
        Ok(Self { lambda })
    }
}

/// Column-wise mean and population standard deviation.
pub fn compute_modality_stats(m: &EmbeddingMatrix) -> ModalityStats {
    let mean = linalg::column_means(m.data(), m.n(), m.d());
    let variances = linalg::column_variances(m.data(), m.n(), m.d(), &mean);
    let per_dim_std = variances.iter().map(|v| v.sqrt()).collect();
    ModalityStats {
        mean,
        per_dim_std,
        source_n: m.n(),
    }
}

fn check_dim(m: &EmbeddingMatrix, stats: &ModalityStats) -> Result<()> {
    if stats.mean.len() != m.d() {
        return Err(Error::DimensionMismatch {
            context: "modality stats mean".into(),
            expected: m.d(),
            found: stats.mean.len(),
        });
    }
    Ok(())
}

/// Subtracts the modality mean from every row without renormalizing.
///
/// When `stats` was computed from `m` itself, the column means of the
/// result are exactly zero up to accumulated rounding.
pub fn subtract_mean(m: &EmbeddingMatrix, stats: &ModalityStats) -> Result<EmbeddingMatrix> {
    check_dim(m, stats)?;
    let mut data = Vec::with_capacity(m.n() * m.d());
    for row in m.rows() {
        data.extend(row.iter().zip(&stats.mean).map(|(v, mu)| v - mu));
    }
    EmbeddingMatrix::from_vec(m.n(), m.d(), data)
}

/// Standardization repair: subtract the modality mean, then renormalize
/// each row to unit norm.
pub fn i0t_post(m: &EmbeddingMatrix, stats: &ModalityStats) -> Result<EmbeddingMatrix> {
    normalize_rows(&subtract_mean(m, stats)?)
}

/// Elementwise clamp to `[lo, hi]` without renormalizing.
pub fn clamp_activations(m: &EmbeddingMatrix, lo: f64, hi: f64) -> Result<EmbeddingMatrix> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig {
            what: format!("clip range must satisfy lo < hi, got [{lo}, {hi}]"),
        });
    }
    let data = m.data().iter().map(|v| v.clamp(lo, hi)).collect();
    EmbeddingMatrix::from_vec(m.n(), m.d(), data)
}

/// Clipping repair: clamp activations to `[lo, hi]`, then renormalize rows.
pub fn clip_activations(m: &EmbeddingMatrix, lo: f64, hi: f64) -> Result<EmbeddingMatrix> {
    normalize_rows(&clamp_activations(m, lo, hi)?)
}

/// Shift both modalities along the gap vector without renormalizing.
///
/// With gap vector delta = (image mean - text mean), image rows move by
/// -lambda * delta and text rows by +lambda * delta, so the centroid
/// distance of the result is exactly |1 - 2 lambda| times the original.
pub fn mg_shift_raw(
    ds: &PairedDataset,
    cfg: &MgShiftConfig,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let image_stats = compute_modality_stats(ds.images());
    let text_stats = compute_modality_stats(ds.texts());
    let delta: Vec<f64> = image_stats
        .mean
        .iter()
        .zip(&text_stats.mean)
        .map(|(x, y)| x - y)
        .collect();

    let shift = |m: &EmbeddingMatrix, sign: f64| -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(m.n() * m.d());
        for row in m.rows() {
            data.extend(
                row.iter()
                    .zip(&delta)
                    .map(|(v, dlt)| v + sign * cfg.lambda * dlt),
            );
        }
        EmbeddingMatrix::from_vec(m.n(), m.d(), data)
    };

    Ok((shift(ds.images(), -1.0)?, shift(ds.texts(), 1.0)?))
}

/// Shift-along-the-gap repair with row renormalization.
pub fn mg_shift(ds: &PairedDataset, cfg: &MgShiftConfig) -> Result<PairedDataset> {
    let (images, texts) = mg_shift_raw(ds, cfg)?;
    PairedDataset::new(
        normalize_rows(&images)?,
        normalize_rows(&texts)?,
        ds.ids().to_vec(),
    )
}
