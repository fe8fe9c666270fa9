//! Per-modality batch normalization over frozen embeddings: running-mean
//! and running-variance accumulation plus the learnable affine transform,
//! followed by row renormalization.
//!
//! Each modality owns an independent state; the forward pass always uses
//! the running statistics (never in-batch statistics).

use serde::{Deserialize, Serialize};

use crate::embstore::{normalize_rows, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg;

/// Default momentum for the running-statistics update.
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Default variance-floor epsilon of the normalization denominator.
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Exponentially averaged per-dimension mean and variance.
///
/// Initialized to mean 0 and variance 1, so an untrained layer with
/// identity parameters is a no-op up to row renormalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub alpha: f64,
    pub step: u64,
}

impl RunningStats {
    pub fn new(d: usize, alpha: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::EmptyMatrix {
                context: "running stats need at least one dimension".into(),
            });
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig {
                what: format!("momentum alpha must be in (0, 1], got {alpha}"),
            });
        }
        Ok(Self {
            mean: vec![0.0; d],
            var: vec![1.0; d],
            alpha,
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Learnable per-dimension scale and shift of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormParams {
    /// Identity initialization: weight 1, bias 0.
    pub fn identity(d: usize) -> Self {
        Self {
            weight: vec![1.0; d],
            bias: vec![0.0; d],
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.weight.len() != d || self.bias.len() != d {
            return Err(Error::DimensionMismatch {
                context: "batch norm parameters".into(),
                expected: d,
                found: self.weight.len().min(self.bias.len()),
            });
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("epsilon must be finite and > 0, got {}", self.epsilon),
            });
        }
        for v in self.weight.iter().chain(&self.bias) {
            if !v.is_finite() {
                return Err(Error::InvalidConfig {
                    what: "batch norm parameters must be finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// One full update of the running statistics from a batch:
/// `mean <- alpha * batch_mean + (1 - alpha) * mean`, and the same
/// momentum rule on the per-dimension population variance.
pub fn update_running_stats(rs: &RunningStats, batch: &EmbeddingMatrix) -> Result<RunningStats> {
    if batch.d() != rs.dim() {
        return Err(Error::DimensionMismatch {
            context: "running stats update".into(),
            expected: rs.dim(),
            found: batch.d(),
        });
    }
    if batch.n() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            found: batch.n(),
        });
    }
    let batch_mean = linalg::column_means(batch.data(), batch.n(), batch.d());
    let batch_var = linalg::column_variances(batch.data(), batch.n(), batch.d(), &batch_mean);
    let alpha = rs.alpha;
    let mean = rs
        .mean
        .iter()
        .zip(&batch_mean)
        .map(|(old, new)| alpha * new + (1.0 - alpha) * old)
        .collect();
    let var = rs
        .var
        .iter()
        .zip(&batch_var)
        .map(|(old, new)| alpha * new + (1.0 - alpha) * old)
        .collect();
    Ok(RunningStats {
        mean,
        var,
        alpha,
        step: rs.step + 1,
    })
}

/// Inference transform: `Normalize(weight * (x - mean) / sqrt(var + eps) + bias)`
/// elementwise per row, with the running statistics.
///
/// Expects `x` to be row-normalized already; `encode_with_optional_bn` is
/// the entry point that normalizes first.
pub fn bn_forward(
    x: &EmbeddingMatrix,
    rs: &RunningStats,
    params: &BatchNormParams,
) -> Result<EmbeddingMatrix> {
    if x.d() != rs.dim() {
        return Err(Error::DimensionMismatch {
            context: "batch norm forward".into(),
            expected: rs.dim(),
            found: x.d(),
        });
    }
    params.validate(x.d())?;
    let inv_std: Vec<f64> = rs.var.iter().map(|v| 1.0 / (v + params.epsilon).sqrt()).collect();
    let mut data = Vec::with_capacity(x.n() * x.d());
    for row in x.rows() {
        for (c, v) in row.iter().enumerate() {
            let standardized = (v - rs.mean[c]) * inv_std[c];
            data.push(params.weight[c] * standardized + params.bias[c]);
        }
    }
    normalize_rows(&EmbeddingMatrix::from_vec(x.n(), x.d(), data)?)
}

/// Embedding extraction branch: returns the input unchanged when the flag
/// is off, otherwise row-normalizes and applies the batch-norm transform.
pub fn encode_with_optional_bn(
    m: &EmbeddingMatrix,
    rs: &RunningStats,
    params: &BatchNormParams,
    add_batch_norm: bool,
) -> Result<EmbeddingMatrix> {
    if !add_batch_norm {
        return Ok(m.clone());
    }
    bn_forward(&normalize_rows(m)?, rs, params)
}

/// Full state of one modality's layer: running statistics plus learnable
/// parameters. Serialized flat as
/// `{alpha, t, mean, var, weight, bias, epsilon}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub stats: RunningStats,
    pub params: BatchNormParams,
}

impl BnState {
    pub fn identity(d: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            stats: RunningStats::new(d, alpha)?,
            params: BatchNormParams::identity(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    /// Applies the layer to already-normalized rows.
    pub fn forward(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        bn_forward(x, &self.stats, &self.params)
    }
}

#[derive(Serialize, Deserialize)]
struct BnStateWire {
    alpha: f64,
    t: u64,
    mean: Vec<f64>,
    var: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    epsilon: f64,
}

impl Serialize for BnState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        BnStateWire {
            alpha: self.stats.alpha,
            t: self.stats.step,
            mean: self.stats.mean.clone(),
            var: self.stats.var.clone(),
            weight: self.params.weight.clone(),
            bias: self.params.bias.clone(),
            epsilon: self.params.epsilon,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BnState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = BnStateWire::deserialize(deserializer)?;
        Ok(BnState {
            stats: RunningStats {
                mean: wire.mean,
                var: wire.var,
                alpha: wire.alpha,
                step: wire.t,
            },
            params: BatchNormParams {
                weight: wire.weight,
                bias: wire.bias,
                epsilon: wire.epsilon,
            },
        })
    }
}

/// Both modalities' layer states, as stored in a state file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatePair {
    pub image: BnState,
    pub text: BnState,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;
    use crate::transforms::{compute_modality_stats, i0t_post};
    use rand::Rng;

    fn unit_rows(n: usize, d: usize, name: &str) -> EmbeddingMatrix {
        let mut rng = stream_rng(31, name);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize_rows(&EmbeddingMatrix::from_vec(n, d, data).unwrap()).unwrap()
    }

    #[test]
    fn single_update_from_zero_mean() {
        let rs = RunningStats::new(3, 0.1).unwrap();
        let batch =
            EmbeddingMatrix::from_vec(2, 3, vec![0.5, -0.2, 0.8, 0.5, -0.2, 0.8]).unwrap();
        let updated = update_running_stats(&rs, &batch).unwrap();
        for (slot, c) in updated.mean.iter().zip([0.5, -0.2, 0.8]) {
            assert!((slot - 0.1 * c).abs() < 1e-15);
        }
        assert_eq!(updated.step, 1);
    }

    #[test]
    fn repeated_batches_converge_geometrically() {
        let batch = unit_rows(16, 5, "geometric");
        let target = linalg::column_means(batch.data(), batch.n(), batch.d());
        let mut rs = RunningStats::new(5, 0.1).unwrap();
        let initial_gap: Vec<f64> = target.iter().map(|t| (t - 0.0).abs()).collect();
        let steps = 20;
        for _ in 0..steps {
            rs = update_running_stats(&rs, &batch).unwrap();
        }
        let shrink = 0.9f64.powi(steps);
        for ((m, t), g0) in rs.mean.iter().zip(&target).zip(&initial_gap) {
            assert!(((m - t).abs() - shrink * g0).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_one_adopts_batch_statistics_exactly() {
        let batch = unit_rows(8, 4, "alpha-one");
        let rs = RunningStats::new(4, 1.0).unwrap();
        let updated = update_running_stats(&rs, &batch).unwrap();
        let mean = linalg::column_means(batch.data(), batch.n(), batch.d());
        let var = linalg::column_variances(batch.data(), batch.n(), batch.d(), &mean);
        assert_eq!(updated.mean, mean);
        assert_eq!(updated.var, var);
    }

    #[test]
    fn singleton_batch_is_rejected() {
        let rs = RunningStats::new(2, 0.1).unwrap();
        let batch = EmbeddingMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            update_running_stats(&rs, &batch),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn identity_configuration_is_a_no_op() {
        let x = unit_rows(6, 4, "identity");
        let rs = RunningStats::new(4, 0.1).unwrap();
        let params = BatchNormParams::identity(4);
        let out = bn_forward(&x, &rs, &params).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_variance_stats_reduce_to_standardization() {
        let x = unit_rows(40, 8, "matches-post");
        let stats = compute_modality_stats(&x);
        let mut rs = RunningStats::new(8, 0.1).unwrap();
        rs.mean = stats.mean.clone();
        // var stays at its initialization of 1, the regime the running
        // variance is observed to occupy after fitting
        let out = bn_forward(&x, &rs, &BatchNormParams::identity(8)).unwrap();
        let reference = i0t_post(&x, &stats).unwrap();
        for (a, b) in out.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        // cosine structure agrees even tighter
        for i in 0..4 {
            for j in 0..4 {
                let c1 = linalg::dot(out.row(i), out.row(j));
                let c2 = linalg::dot(reference.row(i), reference.row(j));
                assert!((c1 - c2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_weight_collapses_to_bias_direction() {
        let x = unit_rows(5, 4, "collapse");
        let rs = RunningStats::new(4, 0.1).unwrap();
        let params = BatchNormParams {
            weight: vec![0.0; 4],
            bias: vec![100.0, -50.0, 25.0, 10.0],
            epsilon: DEFAULT_BN_EPSILON,
        };
        let out = bn_forward(&x, &rs, &params).unwrap();
        let bias = EmbeddingMatrix::from_vec(1, 4, params.bias.clone()).unwrap();
        let direction = normalize_rows(&bias).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(direction.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bn_forward_rows_are_unit_norm() {
        let x = unit_rows(20, 6, "unit-norm-out");
        let mut rs = RunningStats::new(6, 0.1).unwrap();
        rs = update_running_stats(&rs, &x).unwrap();
        let mut params = BatchNormParams::identity(6);
        params.weight = vec![0.5, 2.0, 1.0, 0.1, 3.0, 1.5];
        params.bias = vec![0.1, -0.2, 0.0, 0.3, 0.0, -0.1];
        let out = bn_forward(&x, &rs, &params).unwrap();
        for row in out.rows() {
            assert!((linalg::norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn optional_bn_flag_off_is_identity() {
        let x = unit_rows(4, 5, "flag-off");
        let rs = RunningStats::new(5, 0.1).unwrap();
        let params = BatchNormParams::identity(5);
        let out = encode_with_optional_bn(&x, &rs, &params, false).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn optional_bn_flag_on_normalizes_first() {
        // scaled (non-unit) rows must go through row normalization before BN
        let mut rng = stream_rng(31, "flag-on");
        let data: Vec<f64> = (0..4 * 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let raw = EmbeddingMatrix::from_vec(4, 5, data).unwrap();
        let rs = RunningStats::new(5, 0.1).unwrap();
        let params = BatchNormParams::identity(5);
        let out = encode_with_optional_bn(&raw, &rs, &params, true).unwrap();
        let expected = normalize_rows(&raw).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn modality_states_are_independent() {
        let x = unit_rows(10, 4, "independent-x");
        let y = unit_rows(10, 4, "independent-y");
        let image = BnState::identity(4, 0.1).unwrap();
        let mut text = BnState::identity(4, 0.1).unwrap();
        let image_before = image.forward(&x).unwrap();
        // mutate the text state heavily
        text.stats = update_running_stats(&text.stats, &y).unwrap();
        text.params.weight = vec![9.0; 4];
        let image_after = image.forward(&x).unwrap();
        assert_eq!(image_before.data(), image_after.data());
    }

    #[test]
    fn state_serializes_to_flat_json() {
        let state = BnState::identity(2, 0.1).unwrap();
        let json = serde_json::to_value(&state).unwrap();
        for key in ["alpha", "t", "mean", "var", "weight", "bias", "epsilon"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back: BnState = serde_json::from_value(json).unwrap();
        assert_eq!(back, state);
    }
}
