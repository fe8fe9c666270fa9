//! Small dense-matrix helpers over row-major `&[f64]` slices.
//!
//! Accumulation order is fixed (ascending index, per-row) so results are
//! reproducible run to run and independent of the rayon thread count.

use rayon::prelude::*;

/// Dot product, accumulated in ascending index order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with explicit norm division.
#[inline]
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Column means of an `n x d` row-major matrix.
pub fn column_means(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut means = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / n as f64;
    for m in &mut means {
        *m *= inv;
    }
    means
}

/// Column population variances given precomputed means.
pub fn column_variances(data: &[f64], n: usize, d: usize, means: &[f64]) -> Vec<f64> {
    let mut vars = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for ((v, x), m) in vars.iter_mut().zip(row).zip(means) {
            let c = x - m;
            *v += c * c;
        }
    }
    let inv = 1.0 / n as f64;
    for v in &mut vars {
        *v *= inv;
    }
    vars
}

/// `X * Y^T` for row-major `X (m x d)` and `Y (k x d)`, giving `m x k`.
///
/// Rows of the output are computed independently (safe to parallelize);
/// each entry is a sequential dot product.
pub fn cross_gram(x: &[f64], y: &[f64], m: usize, k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let xi = &x[i * d..(i + 1) * d];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = dot(xi, &y[j * d..(j + 1) * d]);
        }
    });
    out
}

/// `A * B` for row-major `A (m x k)` and `B (k x d)`, giving `m x d`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (l, &alk) in arow.iter().enumerate() {
            let brow = &b[l * d..(l + 1) * d];
            for (slot, &blj) in row.iter_mut().zip(brow) {
                *slot += alk * blj;
            }
        }
    });
    out
}
