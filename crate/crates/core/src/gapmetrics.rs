//! The three modality-gap quantities, severity classification, and the
//! piecewise curves relating them.
//!
//! * centroid distance: Euclidean norm of the difference between the two
//!   modalities' mean unit-normalized embeddings
//! * linear separability: 1 - test MSE of a linear regressor predicting the
//!   modality label (image 1.0, text 0.0) on a held-out split
//! * minimum cosine distance: mean over queries of (1 - top-1 cross-modal
//!   cosine similarity)

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embstore::{EmbeddingMatrix, PairedDataset};
use crate::error::{Error, Result};
use crate::linalg;

/// Centroid distance at or above this is a severe gap.
pub const SEVERE_THRESHOLD: f64 = 0.63;
/// Centroid distance at or above this (and below severe) is moderate.
pub const MODERATE_THRESHOLD: f64 = 0.19;

/// Severity band of the modality gap, a deterministic function of the
/// centroid distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Severe,
    Moderate,
    Low,
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Severity::Severe => write!(f, "severe"),
            Severity::Moderate => write!(f, "moderate"),
            Severity::Low => write!(f, "low"),
        }
    }
}

/// Gap measurements for one paired dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub centroid_distance: f64,
    pub linear_separability: f64,
    pub min_cosine_distance: f64,
    pub severity: Severity,
}

/// Split and stabilization settings for the linear-separability fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsConfig {
    pub train_fraction: f64,
    pub shuffle_seed: u64,
    pub ridge_epsilon: f64,
}

impl Default for LsConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            shuffle_seed: 42,
            ridge_epsilon: 1e-8,
        }
    }
}

impl LsConfig {
    fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig {
                what: format!(
                    "train_fraction must be in (0, 1), got {}",
                    self.train_fraction
                ),
            });
        }
        if !(self.ridge_epsilon >= 0.0 && self.ridge_epsilon.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("ridge_epsilon must be finite and >= 0, got {}", self.ridge_epsilon),
            });
        }
        Ok(())
    }
}

/// Which modality queries which in the minimum-cosine-distance scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McdDirection {
    /// Each image's top-1 text (retrieval convention, the default).
    ImageToText,
    /// Mean of the image-to-text and text-to-image values.
    Symmetric,
}

/// Mean of each modality's unit-normalized rows.
fn normalized_centroid(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; m.d()];
    for (i, row) in m.rows().enumerate() {
        let norm = linalg::norm(row);
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        for (slot, v) in mean.iter_mut().zip(row) {
            *slot += v / norm;
        }
    }
    let inv = 1.0 / m.n() as f64;
    for slot in &mut mean {
        *slot *= inv;
    }
    Ok(mean)
}

/// Euclidean norm of (mean image row - mean text row), rows normalized
/// internally.
pub fn centroid_distance(ds: &PairedDataset) -> Result<f64> {
    let image_mean = normalized_centroid(ds.images())?;
    let text_mean = normalized_centroid(ds.texts())?;
    let mut acc = 0.0;
    for (a, b) in image_mean.iter().zip(&text_mean) {
        let diff = a - b;
        acc += diff * diff;
    }
    Ok(acc.sqrt())
}

/// Severity band for a centroid distance.
pub fn classify_severity(cd: f64) -> Result<Severity> {
    if !cd.is_finite() || cd < 0.0 {
        return Err(Error::InvalidConfig {
            what: format!("centroid distance must be finite and >= 0, got {cd}"),
        });
    }
    Ok(if cd >= SEVERE_THRESHOLD {
        Severity::Severe
    } else if cd >= MODERATE_THRESHOLD {
        Severity::Moderate
    } else {
        Severity::Low
    })
}

/// 1 - held-out MSE of a linear regressor separating the modalities.
///
/// Images are labeled 1.0 and texts 0.0, the pooled 2n rows are shuffled
/// with the configured seed, and an intercept-augmented least-squares fit
/// (ridge-stabilized normal equations) is trained on the leading fraction.
/// Can be negative when the held-out MSE exceeds 1.
pub fn linear_separability(ds: &PairedDataset, cfg: &LsConfig) -> Result<f64> {
    cfg.validate()?;
    let n = ds.len();
    let pooled = 2 * n;
    if pooled < 10 {
        return Err(Error::InsufficientSamples {
            needed: 10,
            found: pooled,
        });
    }
    let d = ds.images().d();

    let mut order: Vec<usize> = (0..pooled).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    order.shuffle(&mut rng);

    let train_len = (cfg.train_fraction * pooled as f64).floor() as usize;
    if train_len == 0 || train_len >= pooled {
        return Err(Error::InsufficientSamples {
            needed: 10,
            found: pooled,
        });
    }

    let row_of = |idx: usize| -> (&[f64], f64) {
        if idx < n {
            (ds.images().row(idx), 1.0)
        } else {
            (ds.texts().row(idx - n), 0.0)
        }
    };

    // Normal equations with an intercept column appended.
    let cols = d + 1;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(cols, cols);
    let mut rhs = nalgebra::DVector::<f64>::zeros(cols);
    let mut features = vec![0.0; cols];
    for &idx in &order[..train_len] {
        let (row, label) = row_of(idx);
        features[..d].copy_from_slice(row);
        features[d] = 1.0;
        for a in 0..cols {
            let fa = features[a];
            rhs[a] += fa * label;
            for b in a..cols {
                gram[(a, b)] += fa * features[b];
            }
        }
    }
    for a in 0..cols {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
        gram[(a, a)] += cfg.ridge_epsilon;
    }

    let weights = gram
        .cholesky()
        .ok_or(Error::DegenerateSystem)?
        .solve(&rhs);

    let mut sse = 0.0;
    let test = &order[train_len..];
    for &idx in test {
        let (row, label) = row_of(idx);
        let mut pred = weights[d];
        for (w, v) in weights.as_slice()[..d].iter().zip(row) {
            pred += w * v;
        }
        let resid = pred - label;
        sse += resid * resid;
    }
    let mse = sse / test.len() as f64;
    Ok(1.0 - mse)
}

fn row_norms(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(m.n());
    for (i, row) in m.rows().enumerate() {
        let norm = linalg::norm(row);
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        norms.push(norm);
    }
    Ok(norms)
}

fn directed_mcd(
    queries: &EmbeddingMatrix,
    candidates: &EmbeddingMatrix,
    query_norms: &[f64],
    candidate_norms: &[f64],
) -> f64 {
    let best: Vec<f64> = (0..queries.n())
        .into_par_iter()
        .map(|i| {
            let qi = queries.row(i);
            let mut best = f64::NEG_INFINITY;
            for j in 0..candidates.n() {
                let cos = linalg::dot(qi, candidates.row(j))
                    / (query_norms[i] * candidate_norms[j]);
                if cos > best {
                    best = cos;
                }
            }
            best
        })
        .collect();
    let mut acc = 0.0;
    for b in &best {
        acc += 1.0 - b;
    }
    acc / queries.n() as f64
}

/// Mean over images of (1 - max cosine to any text).
pub fn min_cosine_distance(ds: &PairedDataset) -> Result<f64> {
    min_cosine_distance_directed(ds, McdDirection::ImageToText)
}

/// Directed or symmetric minimum cosine distance.
pub fn min_cosine_distance_directed(ds: &PairedDataset, direction: McdDirection) -> Result<f64> {
    let image_norms = row_norms(ds.images())?;
    let text_norms = row_norms(ds.texts())?;
    let i2t = directed_mcd(ds.images(), ds.texts(), &image_norms, &text_norms);
    match direction {
        McdDirection::ImageToText => Ok(i2t),
        McdDirection::Symmetric => {
            let t2i = directed_mcd(ds.texts(), ds.images(), &text_norms, &image_norms);
            Ok((i2t + t2i) / 2.0)
        }
    }
}

/// Full gap report; the severity is always the classification of the
/// computed centroid distance.
pub fn gap_report(ds: &PairedDataset, cfg: &LsConfig, direction: McdDirection) -> Result<GapReport> {
    let cd = centroid_distance(ds)?;
    Ok(GapReport {
        centroid_distance: cd,
        linear_separability: linear_separability(ds, cfg)?,
        min_cosine_distance: min_cosine_distance_directed(ds, direction)?,
        severity: classify_severity(cd)?,
    })
}

/// Piecewise-linear predictions of (linear separability, minimum cosine
/// distance) from the centroid distance.
///
/// The first curve changes slope at 0.19, the second at 0.63; each piece
/// is anchored so both sides agree at the breakpoint.
pub fn severity_curves(cd: f64) -> (f64, f64) {
    let y1 = if cd < 0.19 {
        4.53 * cd + 0.97 - 4.53 * 0.19
    } else {
        0.04 * cd + 0.97 - 0.04 * 0.19
    };
    let y2 = if cd < 0.63 {
        0.17 * cd + 0.39 - 0.17 * 0.63
    } else {
        0.75 * cd + 0.39 - 0.75 * 0.63
    };
    (y1, y2)
}
