//! Seeded synthetic data generators used by tests, benchmarks, and desk
//! experiments: gapped cluster pairs, peaked modality profiles, and a
//! Gaussian embedding augmenter.

use rand::Rng;

use crate::embstore::{normalize_rows, EmbeddingMatrix, PairedDataset};
use crate::seed::stream_rng;

/// Unit-normalized rows with uniform random entries.
pub fn random_unit_rows(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = stream_rng(seed, "random-unit-rows");
    loop {
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = EmbeddingMatrix::from_vec(n, d, data).expect("finite random data");
        if let Ok(normalized) = normalize_rows(&m) {
            return normalized;
        }
        // an all-zero row has probability zero; resample if it ever occurs
    }
}

/// Two noisy spherical clusters with centroids `separation` apart, one per
/// modality. Larger `separation` and smaller `noise` give a wider gap.
pub fn gapped_clusters(n: usize, d: usize, separation: f64, noise: f64, seed: u64) -> PairedDataset {
    assert!(d >= 2, "need at least two dimensions");
    assert!((0.0..=2.0).contains(&separation), "unit centroids are at most 2 apart");
    let theta = 2.0 * (separation / 2.0).asin();
    let mut centers = (vec![0.0; d], vec![0.0; d]);
    centers.0[0] = 1.0;
    centers.1[0] = theta.cos();
    centers.1[1] = theta.sin();

    let make = |center: &[f64], name: &str| {
        let mut rng = stream_rng(seed, name);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for &c in center {
                data.push(c + rng.gen_range(-noise..noise));
            }
        }
        normalize_rows(&EmbeddingMatrix::from_vec(n, d, data).expect("finite cluster data"))
            .expect("cluster rows are near unit centers")
    };
    let images = make(&centers.0, "cluster-images");
    let texts = make(&centers.1, "cluster-texts");
    PairedDataset::with_index_ids(images, texts).expect("aligned cluster pair")
}

/// A paired dataset whose modalities carry persistent per-dimension
/// profiles: a broad baseline in [-0.08, 0.08] on every dimension plus one
/// large negative image peak and two positive text peaks. Clipping the
/// peaks alone leaves the baseline mismatch (and therefore the gap) in
/// place, while per-modality standardization removes it.
pub fn peaked_modality_pair(n: usize, d: usize, seed: u64) -> PairedDataset {
    assert!(d >= 3, "need at least three dimensions for the peak layout");
    let baseline = |name: &str| -> Vec<f64> {
        let mut rng = stream_rng(seed, name);
        (0..d).map(|_| rng.gen_range(-0.08..0.08)).collect()
    };
    let mut image_profile = baseline("image-profile");
    image_profile[0] = -0.5;
    let mut text_profile = baseline("text-profile");
    text_profile[1] = 1.0 / 3.0;
    text_profile[2] = 1.0 / 3.0;

    let make = |profile: &[f64], name: &str| {
        let mut rng = stream_rng(seed, name);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for &p in profile {
                data.push(p + rng.gen_range(-0.02..0.02));
            }
        }
        normalize_rows(&EmbeddingMatrix::from_vec(n, d, data).expect("finite profile data"))
            .expect("profile rows are far from zero")
    };
    let images = make(&image_profile, "peaked-images");
    let texts = make(&text_profile, "peaked-texts");
    PairedDataset::with_index_ids(images, texts).expect("aligned peaked pair")
}

/// Paired embeddings that share a per-item latent direction but carry
/// opposite modality offsets along the first axis. True pairs stay
/// correlated through the shared latent; the offsets skew every raw
/// cross-modal cosine until a per-modality repair removes them.
pub fn offset_correlated_pairs(
    n: usize,
    d: usize,
    offset: f64,
    noise: f64,
    seed: u64,
) -> PairedDataset {
    assert!(d >= 2, "need at least two dimensions");
    let latents = random_unit_rows(n, d, seed ^ 0x517c_c1b7_2722_0a95);
    let make = |sign: f64, name: &str| {
        let mut rng = stream_rng(seed, name);
        let mut data = Vec::with_capacity(n * d);
        for row in latents.rows() {
            for (c, &g) in row.iter().enumerate() {
                let shift = if c == 0 { sign * offset } else { 0.0 };
                data.push(g + shift + rng.gen_range(-noise..noise));
            }
        }
        normalize_rows(&EmbeddingMatrix::from_vec(n, d, data).expect("finite offset data"))
            .expect("offset rows keep nonzero norm")
    };
    let images = make(1.0, "offset-images");
    let texts = make(-1.0, "offset-texts");
    PairedDataset::with_index_ids(images, texts).expect("aligned offset pair")
}

/// Adds seeded Gaussian noise to every activation and renormalizes rows;
/// stands in for encoder-side augmentation when only embeddings exist.
pub fn gaussian_augment(m: &EmbeddingMatrix, sigma: f64, seed: u64) -> EmbeddingMatrix {
    assert!(sigma > 0.0 && sigma.is_finite());
    let mut rng = stream_rng(seed, "gaussian-augment");
    let mut normal = move || {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let data: Vec<f64> = m.data().iter().map(|v| v + sigma * normal()).collect();
    normalize_rows(&EmbeddingMatrix::from_vec(m.n(), m.d(), data).expect("finite augmented data"))
        .expect("augmented rows keep nonzero norm")
}
