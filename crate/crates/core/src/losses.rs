//! Contrastive and cyclic-consistency losses over paired embedding batches,
//! their four-way augmented composition, and analytic gradients with
//! respect to the batch-norm scale/shift parameters of both modalities.
//!
//! The contrastive loss is the symmetric cross-entropy over cosine logits
//! scaled by `exp(temperature_log_scale)`; the cyclic penalties are mean
//! squared consistency gaps over raw cosines (no temperature).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bnlayer::BnState;
use crate::embstore::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg;

/// Which objective a batch is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Clip,
    Cyclip,
    McsieCyclip,
}

/// Loss hyperparameters. The temperature is a frozen constant, not learned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Logits are multiplied by `exp` of this.
    pub temperature_log_scale: f64,
    /// Weight of each cyclic penalty in the combined objective.
    pub cyclic_weight: f64,
    pub loss_kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature_log_scale: 4.6052,
            cyclic_weight: 0.25,
            loss_kind: LossKind::Cyclip,
        }
    }
}

impl LossConfig {
    fn validate(&self) -> Result<()> {
        if !self.temperature_log_scale.exp().is_finite() {
            return Err(Error::InvalidConfig {
                what: format!(
                    "exp(temperature_log_scale) must be finite, got log scale {}",
                    self.temperature_log_scale
                ),
            });
        }
        if !(self.cyclic_weight >= 0.0 && self.cyclic_weight.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("cyclic_weight must be finite and >= 0, got {}", self.cyclic_weight),
            });
        }
        Ok(())
    }
}

/// A total loss plus its named components; the total always equals the
/// weighted component sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

fn check_batch(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<(usize, usize)> {
    if x.n() != y.n() {
        return Err(Error::DimensionMismatch {
            context: "batch sizes".into(),
            expected: x.n(),
            found: y.n(),
        });
    }
    if x.d() != y.d() {
        return Err(Error::DimensionMismatch {
            context: "batch hidden dimensions".into(),
            expected: x.d(),
            found: y.d(),
        });
    }
    if x.n() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            found: x.n(),
        });
    }
    Ok((x.n(), x.d()))
}

/// Mean over rows of `lse(row) - row[diag]` for a row-major `m x m` matrix.
fn diagonal_cross_entropy_rows(logits: &[f64], m: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        let row = &logits[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
        total += max + sum.ln() - row[i];
    }
    total / m as f64
}

fn transpose(a: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[j * m + i] = a[i * m + j];
        }
    }
    out
}

/// Symmetric contrastive loss with diagonal targets over scaled cosine
/// logits, averaged over the two directions.
pub fn clip_loss(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    let (m, d) = check_batch(x, y)?;
    let scale = cfg.temperature_log_scale.exp();
    let mut logits = linalg::cross_gram(x.data(), y.data(), m, m, d);
    for l in &mut logits {
        *l *= scale;
    }
    let row_ce = diagonal_cross_entropy_rows(&logits, m);
    let col_ce = diagonal_cross_entropy_rows(&transpose(&logits, m), m);
    let total = 0.5 * (row_ce + col_ce);
    let mut components = BTreeMap::new();
    components.insert("clip".to_string(), total);
    Ok(LossValue { total, components })
}

/// In-modal cyclic penalty: mean squared gap between the image and text
/// Gram matrices, `(1/m^2) sum_jk (<x_j,x_k> - <y_j,y_k>)^2`.
pub fn i_cyclic_loss(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64> {
    let (m, d) = check_batch(x, y)?;
    let a = linalg::cross_gram(x.data(), x.data(), m, m, d);
    let b = linalg::cross_gram(y.data(), y.data(), m, m, d);
    let mut acc = 0.0;
    for (av, bv) in a.iter().zip(&b) {
        let diff = av - bv;
        acc += diff * diff;
    }
    Ok(acc / (m * m) as f64)
}

/// Cross-modal cyclic penalty: mean squared asymmetry of the cross-cosine
/// matrix, `(1/m^2) sum_jk (<x_j,y_k> - <x_k,y_j>)^2`.
pub fn c_cyclic_loss(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64> {
    let (m, d) = check_batch(x, y)?;
    let s = linalg::cross_gram(x.data(), y.data(), m, m, d);
    let mut acc = 0.0;
    for j in 0..m {
        for k in 0..m {
            let diff = s[j * m + k] - s[k * m + j];
            acc += diff * diff;
        }
    }
    Ok(acc / (m * m) as f64)
}

/// Contrastive plus weighted cyclic penalties.
pub fn cyclip_loss(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &LossConfig) -> Result<LossValue> {
    let clip = clip_loss(x, y, cfg)?.total;
    let i_cyc = i_cyclic_loss(x, y)?;
    let c_cyc = c_cyclic_loss(x, y)?;
    let total = clip + cfg.cyclic_weight * i_cyc + cfg.cyclic_weight * c_cyc;
    let mut components = BTreeMap::new();
    components.insert("clip".to_string(), clip);
    components.insert("i_cyclic".to_string(), i_cyc);
    components.insert("c_cyclic".to_string(), c_cyc);
    Ok(LossValue { total, components })
}

/// The pairwise objective selected by `cfg.loss_kind` (the four-way
/// composition uses this as its base).
pub fn batch_loss(x: &EmbeddingMatrix, y: &EmbeddingMatrix, cfg: &LossConfig) -> Result<LossValue> {
    match cfg.loss_kind {
        LossKind::Clip => clip_loss(x, y, cfg),
        LossKind::Cyclip | LossKind::McsieCyclip => cyclip_loss(x, y, cfg),
    }
}

/// Four-way composition over original and augmented batches: the base loss
/// summed over every (image set, text set) combination.
pub fn mcsie_loss(
    images: &EmbeddingMatrix,
    aug_images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    aug_texts: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<LossValue> {
    check_batch(images, aug_images)?;
    check_batch(texts, aug_texts)?;
    let orig_orig = batch_loss(images, texts, cfg)?.total;
    let orig_aug = batch_loss(images, aug_texts, cfg)?.total;
    let aug_orig = batch_loss(aug_images, texts, cfg)?.total;
    let aug_aug = batch_loss(aug_images, aug_texts, cfg)?.total;
    // paired summation: exact 4x when the four terms coincide
    let total = (orig_orig + orig_aug) + (aug_orig + aug_aug);
    let mut components = BTreeMap::new();
    components.insert("orig_orig".to_string(), orig_orig);
    components.insert("orig_aug".to_string(), orig_aug);
    components.insert("aug_orig".to_string(), aug_orig);
    components.insert("aug_aug".to_string(), aug_aug);
    Ok(LossValue { total, components })
}

/// Frozen embedding batches fed to the gradient computation. Augmented
/// sets are required only for the four-way composition.
#[derive(Debug, Clone, Copy)]
pub struct BnBatch<'a> {
    pub images: &'a EmbeddingMatrix,
    pub texts: &'a EmbeddingMatrix,
    pub aug_images: Option<&'a EmbeddingMatrix>,
    pub aug_texts: Option<&'a EmbeddingMatrix>,
}

/// Gradients of the total loss with respect to the four learnable vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BnGradients {
    pub weight_image: Vec<f64>,
    pub bias_image: Vec<f64>,
    pub weight_text: Vec<f64>,
    pub bias_text: Vec<f64>,
}

/// Forward cache for one input set through one modality's layer.
struct ForwardCache {
    /// Standardized input before the affine step, row-major.
    standardized: Vec<f64>,
    /// Unit-normalized outputs, row-major.
    out: Vec<f64>,
    /// Row norms of the affine output.
    pre_norm: Vec<f64>,
    m: usize,
    d: usize,
}

fn forward_cache(x: &EmbeddingMatrix, state: &BnState) -> Result<ForwardCache> {
    if x.d() != state.dim() {
        return Err(Error::DimensionMismatch {
            context: "batch norm forward".into(),
            expected: state.dim(),
            found: x.d(),
        });
    }
    let (m, d) = (x.n(), x.d());
    let rs = &state.stats;
    let params = &state.params;
    let inv_std: Vec<f64> = rs
        .var
        .iter()
        .map(|v| 1.0 / (v + params.epsilon).sqrt())
        .collect();
    let mut standardized = Vec::with_capacity(m * d);
    let mut affine = Vec::with_capacity(m * d);
    for row in x.rows() {
        for (c, v) in row.iter().enumerate() {
            let z = (v - rs.mean[c]) * inv_std[c];
            standardized.push(z);
            affine.push(params.weight[c] * z + params.bias[c]);
        }
    }
    let mut out = vec![0.0; m * d];
    let mut pre_norm = vec![0.0; m];
    for i in 0..m {
        let u = &affine[i * d..(i + 1) * d];
        let norm = linalg::norm(u);
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        pre_norm[i] = norm;
        for (slot, v) in out[i * d..(i + 1) * d].iter_mut().zip(u) {
            *slot = v / norm;
        }
    }
    Ok(ForwardCache {
        standardized,
        out,
        pre_norm,
        m,
        d,
    })
}

/// Adds the loss and output-gradients of one (image set, text set) pair.
///
/// `g_img` and `g_txt` accumulate dLoss/dOutput for the respective sets.
fn accumulate_pair(
    u: &ForwardCache,
    v: &ForwardCache,
    cfg: &LossConfig,
    g_img: &mut [f64],
    g_txt: &mut [f64],
) -> Result<LossValue> {
    let m = u.m;
    let d = u.d;
    let s = linalg::cross_gram(&u.out, &v.out, m, m, d);

    // loss pieces
    let scale = cfg.temperature_log_scale.exp();
    let logits: Vec<f64> = s.iter().map(|v| v * scale).collect();
    let row_ce = diagonal_cross_entropy_rows(&logits, m);
    let col_ce = diagonal_cross_entropy_rows(&transpose(&logits, m), m);
    let clip = 0.5 * (row_ce + col_ce);

    let with_cyclic = matches!(cfg.loss_kind, LossKind::Cyclip | LossKind::McsieCyclip);
    let w = cfg.cyclic_weight;

    // dLoss/dS from the contrastive term: (scale / 2m) (P + Q - 2I)
    let mut g_s = vec![0.0; m * m];
    {
        let factor = scale / (2.0 * m as f64);
        for i in 0..m {
            let row = &logits[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|l| (l - max).exp()).sum();
            for j in 0..m {
                let p = (row[j] - max).exp() / denom;
                g_s[i * m + j] += factor * (p - if i == j { 1.0 } else { 0.0 });
            }
        }
        for j in 0..m {
            let mut max = f64::NEG_INFINITY;
            for i in 0..m {
                max = max.max(logits[i * m + j]);
            }
            let mut denom = 0.0;
            for i in 0..m {
                denom += (logits[i * m + j] - max).exp();
            }
            for i in 0..m {
                let q = (logits[i * m + j] - max).exp() / denom;
                g_s[i * m + j] += factor * (q - if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    let mut components = BTreeMap::new();
    components.insert("clip".to_string(), clip);
    let mut total = clip;

    let mut g_a = Vec::new();
    if with_cyclic {
        let a = linalg::cross_gram(&u.out, &u.out, m, m, d);
        let b = linalg::cross_gram(&v.out, &v.out, m, m, d);
        let mut i_cyc = 0.0;
        for (av, bv) in a.iter().zip(&b) {
            let diff = av - bv;
            i_cyc += diff * diff;
        }
        i_cyc /= (m * m) as f64;

        let mut c_cyc = 0.0;
        for j in 0..m {
            for k in 0..m {
                let diff = s[j * m + k] - s[k * m + j];
                c_cyc += diff * diff;
            }
        }
        c_cyc /= (m * m) as f64;

        // same expression shape as cyclip_loss so both paths agree bit-for-bit
        total = clip + w * i_cyc + w * c_cyc;
        components.insert("i_cyclic".to_string(), i_cyc);
        components.insert("c_cyclic".to_string(), c_cyc);

        // cross-modal asymmetry contribution: w (4/m^2) (S - S^T)
        let c_factor = w * 4.0 / (m * m) as f64;
        for j in 0..m {
            for k in 0..m {
                g_s[j * m + k] += c_factor * (s[j * m + k] - s[k * m + j]);
            }
        }
        // in-modal Gram contribution: dL/dA = w (2/m^2) (A - B), dL/dB = -dL/dA
        let a_factor = w * 2.0 / (m * m) as f64;
        g_a = a.iter().zip(&b).map(|(av, bv)| a_factor * (av - bv)).collect();
    }

    // dL/dU = G_S V + 2 G_A U ; dL/dV = G_S^T U - 2 G_A V
    let gs_v = linalg::matmul(&g_s, &v.out, m, m, d);
    let gst_u = linalg::matmul(&transpose(&g_s, m), &u.out, m, m, d);
    for (slot, v) in g_img.iter_mut().zip(&gs_v) {
        *slot += v;
    }
    for (slot, v) in g_txt.iter_mut().zip(&gst_u) {
        *slot += v;
    }
    if with_cyclic {
        let ga_u = linalg::matmul(&g_a, &u.out, m, m, d);
        let ga_v = linalg::matmul(&g_a, &v.out, m, m, d);
        for (slot, v) in g_img.iter_mut().zip(&ga_u) {
            *slot += 2.0 * v;
        }
        for (slot, v) in g_txt.iter_mut().zip(&ga_v) {
            *slot -= 2.0 * v;
        }
    }

    Ok(LossValue { total, components })
}

/// Backpropagates output gradients of one input set through the row
/// renormalization and the affine step, accumulating into (weight, bias).
fn backprop_set(cache: &ForwardCache, g_out: &[f64], g_weight: &mut [f64], g_bias: &mut [f64]) {
    let d = cache.d;
    for i in 0..cache.m {
        let out = &cache.out[i * d..(i + 1) * d];
        let g = &g_out[i * d..(i + 1) * d];
        let radial = linalg::dot(g, out);
        let inv = 1.0 / cache.pre_norm[i];
        let standardized = &cache.standardized[i * d..(i + 1) * d];
        for c in 0..d {
            let g_affine = (g[c] - radial * out[c]) * inv;
            g_weight[c] += g_affine * standardized[c];
            g_bias[c] += g_affine;
        }
    }
}

fn ensure_finite(gradient: &[f64], param: &'static str) -> Result<()> {
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { param });
    }
    Ok(())
}

/// Total loss over the batch plus analytic gradients with respect to the
/// four learnable vectors. Gradients flow only through the affine step and
/// the final row renormalization; the embeddings themselves are frozen.
pub fn loss_and_grad_bn(
    batch: &BnBatch,
    image_state: &BnState,
    text_state: &BnState,
    cfg: &LossConfig,
) -> Result<(LossValue, BnGradients)> {
    cfg.validate()?;
    check_batch(batch.images, batch.texts)?;
    let d = batch.images.d();

    let img = forward_cache(batch.images, image_state)?;
    let txt = forward_cache(batch.texts, text_state)?;
    let mut g_img = vec![0.0; img.out.len()];
    let mut g_txt = vec![0.0; txt.out.len()];

    let mut g_weight_image = vec![0.0; d];
    let mut g_bias_image = vec![0.0; d];
    let mut g_weight_text = vec![0.0; d];
    let mut g_bias_text = vec![0.0; d];

    let loss = if cfg.loss_kind == LossKind::McsieCyclip {
        let (aug_images, aug_texts) = match (batch.aug_images, batch.aug_texts) {
            (Some(i), Some(t)) => (i, t),
            _ => {
                return Err(Error::InvalidConfig {
                    what: "the four-way loss needs augmented image and text batches".into(),
                })
            }
        };
        check_batch(batch.images, aug_images)?;
        check_batch(batch.texts, aug_texts)?;
        let aug_img = forward_cache(aug_images, image_state)?;
        let aug_txt = forward_cache(aug_texts, text_state)?;
        let mut g_aug_img = vec![0.0; aug_img.out.len()];
        let mut g_aug_txt = vec![0.0; aug_txt.out.len()];

        let orig_orig = accumulate_pair(&img, &txt, cfg, &mut g_img, &mut g_txt)?;
        let orig_aug = accumulate_pair(&img, &aug_txt, cfg, &mut g_img, &mut g_aug_txt)?;
        let aug_orig = accumulate_pair(&aug_img, &txt, cfg, &mut g_aug_img, &mut g_txt)?;
        let aug_aug = accumulate_pair(&aug_img, &aug_txt, cfg, &mut g_aug_img, &mut g_aug_txt)?;

        backprop_set(&aug_img, &g_aug_img, &mut g_weight_image, &mut g_bias_image);
        backprop_set(&aug_txt, &g_aug_txt, &mut g_weight_text, &mut g_bias_text);

        let total = (orig_orig.total + orig_aug.total) + (aug_orig.total + aug_aug.total);
        let mut components = BTreeMap::new();
        components.insert("orig_orig".to_string(), orig_orig.total);
        components.insert("orig_aug".to_string(), orig_aug.total);
        components.insert("aug_orig".to_string(), aug_orig.total);
        components.insert("aug_aug".to_string(), aug_aug.total);
        LossValue { total, components }
    } else {
        accumulate_pair(&img, &txt, cfg, &mut g_img, &mut g_txt)?
    };

    backprop_set(&img, &g_img, &mut g_weight_image, &mut g_bias_image);
    backprop_set(&txt, &g_txt, &mut g_weight_text, &mut g_bias_text);

    ensure_finite(&g_weight_image, "weight_image")?;
    ensure_finite(&g_bias_image, "bias_image")?;
    ensure_finite(&g_weight_text, "weight_text")?;
    ensure_finite(&g_bias_text, "bias_text")?;

    Ok((
        loss,
        BnGradients {
            weight_image: g_weight_image,
            bias_image: g_bias_image,
            weight_text: g_weight_text,
            bias_text: g_bias_text,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embstore::normalize_rows;
    use crate::seed::stream_rng;
    use rand::Rng;

    fn unit_rows(n: usize, d: usize, name: &str) -> EmbeddingMatrix {
        let mut rng = stream_rng(47, name);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize_rows(&EmbeddingMatrix::from_vec(n, d, data).unwrap()).unwrap()
    }

    #[test]
    fn orthonormal_matched_pairs_have_near_zero_loss() {
        let x = EmbeddingMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = LossConfig::default();
        let loss = clip_loss(&x, &x.clone(), &cfg).unwrap();
        let scale = cfg.temperature_log_scale.exp();
        let closed_form = (1.0 + (-scale).exp()).ln();
        assert!((loss.total - closed_form).abs() < 1e-15);
        assert!(loss.total < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_m() {
        // identical rows on both sides make every logit equal
        let row = vec![0.6, 0.8];
        let x = EmbeddingMatrix::from_rows(&vec![row.clone(); 4]).unwrap();
        let y = EmbeddingMatrix::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
        let loss = clip_loss(&x, &y, &LossConfig::default()).unwrap();
        assert!((loss.total - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clip_loss_is_permutation_invariant() {
        let x = unit_rows(6, 8, "perm-x");
        let y = unit_rows(6, 8, "perm-y");
        let cfg = LossConfig::default();
        let base = clip_loss(&x, &y, &cfg).unwrap().total;

        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = EmbeddingMatrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let yp = EmbeddingMatrix::from_rows(&perm.iter().map(|&i| y.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let permuted = clip_loss(&xp, &yp, &cfg).unwrap().total;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn cyclic_losses_vanish_for_identical_batches() {
        let x = unit_rows(5, 6, "cyclic-zero");
        assert_eq!(i_cyclic_loss(&x, &x.clone()).unwrap(), 0.0);
        assert_eq!(c_cyclic_loss(&x, &x.clone()).unwrap(), 0.0);
    }

    #[test]
    fn cyclic_losses_match_double_loop_oracle() {
        let x = unit_rows(8, 16, "cyclic-oracle-x");
        let y = unit_rows(8, 16, "cyclic-oracle-y");
        let m = 8;

        let mut i_acc = 0.0;
        let mut c_acc = 0.0;
        for j in 0..m {
            for k in 0..m {
                let a = linalg::dot(x.row(j), x.row(k)) - linalg::dot(y.row(j), y.row(k));
                i_acc += a * a;
                let c = linalg::dot(x.row(j), y.row(k)) - linalg::dot(x.row(k), y.row(j));
                c_acc += c * c;
            }
        }
        let i_oracle = i_acc / (m * m) as f64;
        let c_oracle = c_acc / (m * m) as f64;

        assert_eq!(i_cyclic_loss(&x, &y).unwrap().to_bits(), i_oracle.to_bits());
        assert_eq!(c_cyclic_loss(&x, &y).unwrap().to_bits(), c_oracle.to_bits());
    }

    #[test]
    fn cyclip_total_is_the_weighted_component_sum() {
        let x = unit_rows(7, 9, "cyclip-x");
        let y = unit_rows(7, 9, "cyclip-y");
        let cfg = LossConfig::default();
        let loss = cyclip_loss(&x, &y, &cfg).unwrap();
        let recomposed = loss.components["clip"]
            + cfg.cyclic_weight * loss.components["i_cyclic"]
            + cfg.cyclic_weight * loss.components["c_cyclic"];
        assert!((loss.total - recomposed).abs() < 1e-10);
        assert!(loss.components["i_cyclic"] >= 0.0);
        assert!(loss.components["c_cyclic"] >= 0.0);
    }

    #[test]
    fn mcsie_with_duplicate_augmentations_is_four_times_base() {
        let x = unit_rows(6, 10, "mcsie-x");
        let y = unit_rows(6, 10, "mcsie-y");
        let cfg = LossConfig {
            loss_kind: LossKind::McsieCyclip,
            ..LossConfig::default()
        };
        let base = cyclip_loss(&x, &y, &cfg).unwrap().total;
        let four_way = mcsie_loss(&x, &x.clone(), &y, &y.clone(), &cfg).unwrap();
        assert_eq!(four_way.total.to_bits(), (4.0 * base).to_bits());
        assert_eq!(four_way.components.len(), 4);
        let sum: f64 = four_way.components.values().sum();
        assert!((sum - four_way.total).abs() < 1e-10);
    }

    #[test]
    fn mcsie_equals_explicit_four_call_sum() {
        let x = unit_rows(5, 8, "mcsie4-x");
        let xa = unit_rows(5, 8, "mcsie4-xa");
        let y = unit_rows(5, 8, "mcsie4-y");
        let ya = unit_rows(5, 8, "mcsie4-ya");
        let cfg = LossConfig {
            loss_kind: LossKind::McsieCyclip,
            ..LossConfig::default()
        };
        let four_way = mcsie_loss(&x, &xa, &y, &ya, &cfg).unwrap();
        let explicit = cyclip_loss(&x, &y, &cfg).unwrap().total
            + cyclip_loss(&x, &ya, &cfg).unwrap().total
            + cyclip_loss(&xa, &y, &cfg).unwrap().total
            + cyclip_loss(&xa, &ya, &cfg).unwrap().total;
        assert!((four_way.total - explicit).abs() < 1e-12);
    }

    fn identity_state(d: usize) -> BnState {
        BnState::identity(d, 0.1).unwrap()
    }

    #[test]
    fn cyclic_gradients_vanish_for_identical_modalities() {
        let x = unit_rows(6, 8, "grad-zero");
        let batch = BnBatch {
            images: &x,
            texts: &x,
            aug_images: None,
            aug_texts: None,
        };
        let cyclip_cfg = LossConfig::default();
        let clip_cfg = LossConfig {
            loss_kind: LossKind::Clip,
            ..LossConfig::default()
        };
        let (_, g_cyclip) =
            loss_and_grad_bn(&batch, &identity_state(8), &identity_state(8), &cyclip_cfg).unwrap();
        let (_, g_clip) =
            loss_and_grad_bn(&batch, &identity_state(8), &identity_state(8), &clip_cfg).unwrap();
        // with X == Y the cyclic terms contribute exactly nothing
        assert_eq!(g_cyclip, g_clip);
    }

    /// Central finite differences on one parameter vector.
    fn fd_gradient(
        batch: &BnBatch,
        image_state: &BnState,
        text_state: &BnState,
        cfg: &LossConfig,
        which: &str,
    ) -> Vec<f64> {
        let d = image_state.dim();
        let h = 1e-5;
        let mut grad = vec![0.0; d];
        for c in 0..d {
            let probe = |delta: f64| -> f64 {
                let mut img = image_state.clone();
                let mut txt = text_state.clone();
                match which {
                    "weight_image" => img.params.weight[c] += delta,
                    "bias_image" => img.params.bias[c] += delta,
                    "weight_text" => txt.params.weight[c] += delta,
                    "bias_text" => txt.params.bias[c] += delta,
                    _ => unreachable!(),
                }
                loss_and_grad_bn(batch, &img, &txt, cfg).unwrap().0.total
            };
            grad[c] = (probe(h) - probe(-h)) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = 4;
        let d = 6;
        let x = unit_rows(m, d, "fd-x");
        let y = unit_rows(m, d, "fd-y");
        let xa = unit_rows(m, d, "fd-xa");
        let ya = unit_rows(m, d, "fd-ya");

        for kind in [LossKind::Clip, LossKind::Cyclip, LossKind::McsieCyclip] {
            let cfg = LossConfig {
                loss_kind: kind,
                ..LossConfig::default()
            };
            let batch = BnBatch {
                images: &x,
                texts: &y,
                aug_images: (kind == LossKind::McsieCyclip).then_some(&xa),
                aug_texts: (kind == LossKind::McsieCyclip).then_some(&ya),
            };
            let mut image_state = identity_state(d);
            let mut text_state = identity_state(d);
            // move off the exactly-symmetric identity point
            let mut rng = stream_rng(53, "fd-params");
            for v in image_state
                .params
                .weight
                .iter_mut()
                .chain(image_state.params.bias.iter_mut())
                .chain(text_state.params.weight.iter_mut())
                .chain(text_state.params.bias.iter_mut())
            {
                *v += rng.gen_range(-0.2..0.2);
            }

            let (_, analytic) = loss_and_grad_bn(&batch, &image_state, &text_state, &cfg).unwrap();
            for (name, grad) in [
                ("weight_image", &analytic.weight_image),
                ("bias_image", &analytic.bias_image),
                ("weight_text", &analytic.weight_text),
                ("bias_text", &analytic.bias_text),
            ] {
                let numeric = fd_gradient(&batch, &image_state, &text_state, &cfg, name);
                let err = max_rel_err(grad, &numeric);
                assert!(err < 1e-4, "{kind:?} {name}: rel err {err}");
            }
        }
    }

    #[test]
    fn loss_is_invariant_to_uniform_weight_scale_with_zero_bias() {
        let x = unit_rows(5, 7, "scale-x");
        let y = unit_rows(5, 7, "scale-y");
        let batch = BnBatch {
            images: &x,
            texts: &y,
            aug_images: None,
            aug_texts: None,
        };
        let cfg = LossConfig::default();
        let mut state = identity_state(7);
        let mut rng = stream_rng(59, "scale-w");
        for v in state.params.weight.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        let (base, grads) = loss_and_grad_bn(&batch, &state, &identity_state(7), &cfg).unwrap();

        let mut scaled = state.clone();
        for v in scaled.params.weight.iter_mut() {
            *v *= 3.0;
        }
        let (scaled_loss, _) = loss_and_grad_bn(&batch, &scaled, &identity_state(7), &cfg).unwrap();
        assert!((base.total - scaled_loss.total).abs() < 1e-12);

        // row renormalization absorbs uniform scale, so the directional
        // derivative along the weight vector itself is zero
        let directional: f64 = grads
            .weight_image
            .iter()
            .zip(&state.params.weight)
            .map(|(g, w)| g * w)
            .sum();
        assert!(directional.abs() < 1e-8, "directional derivative {directional}");
    }

    #[test]
    fn zero_weight_and_bias_is_a_numeric_error() {
        let x = unit_rows(4, 5, "zero-wb");
        let batch = BnBatch {
            images: &x,
            texts: &x,
            aug_images: None,
            aug_texts: None,
        };
        let mut state = identity_state(5);
        state.params.weight = vec![0.0; 5];
        state.params.bias = vec![0.0; 5];
        assert!(matches!(
            loss_and_grad_bn(&batch, &state, &identity_state(5), &LossConfig::default()),
            Err(Error::ZeroNormRow { .. })
        ));
    }

    #[test]
    fn mcsie_gradients_require_augmented_batches() {
        let x = unit_rows(4, 5, "mcsie-missing");
        let batch = BnBatch {
            images: &x,
            texts: &x,
            aug_images: None,
            aug_texts: None,
        };
        let cfg = LossConfig {
            loss_kind: LossKind::McsieCyclip,
            ..LossConfig::default()
        };
        assert!(matches!(
            loss_and_grad_bn(&batch, &identity_state(5), &identity_state(5), &cfg),
            Err(Error::InvalidConfig { .. })
        ));
    }
}
