//! Downstream evaluations over paired embeddings: cross-modal retrieval,
//! zero-shot classification, rank correlation against human judgments,
//! cosine pair scoring, and mean-rank aggregation across models.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnlayer::BnState;
use crate::embstore::{
    normalize_rows, ClassTemplateSet, EmbeddingMatrix, HumanJudgmentSet, PairedDataset,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::transforms::{i0t_post, ModalityStats};

/// Scaling and clamping of the cosine pair score.
///
/// The conventional reference-free configuration scales by 2.5 and clamps
/// negatives; the repaired-embedding configuration reports the raw cosine.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub omega: f64,
    pub clamp_negative: bool,
}

impl ScoreConfig {
    /// CLIP-S style: omega 2.5, negatives clamped to zero.
    pub fn clip_s() -> Self {
        Self {
            omega: 2.5,
            clamp_negative: true,
        }
    }

    /// I0T-S style: omega 1, no clamping.
    pub fn i0t_s() -> Self {
        Self {
            omega: 1.0,
            clamp_negative: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("omega must be finite and > 0, got {}", self.omega),
            });
        }
        Ok(())
    }
}

/// Embedding repair applied to both rows before scoring.
#[derive(Debug, Clone, Copy)]
pub enum PairTransform<'a> {
    None,
    I0tPost {
        image: &'a ModalityStats,
        text: &'a ModalityStats,
    },
    Bn {
        image: &'a BnState,
        text: &'a BnState,
    },
}

impl PairTransform<'_> {
    /// Applies the repair to a whole matrix of one modality
    /// (`is_image` selects which side's state is used).
    fn apply(&self, m: &EmbeddingMatrix, is_image: bool) -> Result<EmbeddingMatrix> {
        let normalized = normalize_rows(m)?;
        match self {
            PairTransform::None => Ok(normalized),
            PairTransform::I0tPost { image, text } => {
                i0t_post(&normalized, if is_image { image } else { text })
            }
            PairTransform::Bn { image, text } => {
                (if is_image { image } else { text }).forward(&normalized)
            }
        }
    }
}

/// Cosine pair score with optional repair, clamping, and scaling.
pub fn pair_score(
    image_row: &[f64],
    text_row: &[f64],
    transform: &PairTransform,
    cfg: &ScoreConfig,
) -> Result<f64> {
    cfg.validate()?;
    if image_row.len() != text_row.len() {
        return Err(Error::DimensionMismatch {
            context: "pair score rows".into(),
            expected: image_row.len(),
            found: text_row.len(),
        });
    }
    let image = EmbeddingMatrix::from_vec(1, image_row.len(), image_row.to_vec())?;
    let text = EmbeddingMatrix::from_vec(1, text_row.len(), text_row.to_vec())?;
    let image = transform.apply(&image, true)?;
    let text = transform.apply(&text, false)?;
    let mut s = linalg::cosine(image.row(0), text.row(0));
    if cfg.clamp_negative {
        s = s.max(0.0);
    }
    Ok(cfg.omega * s)
}

/// Summary of pair scores over all true pairs of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub histogram: Vec<usize>,
}

/// Scores every true pair and summarizes the distribution into
/// equal-width bins between the observed minimum and maximum.
pub fn score_distribution(
    ds: &PairedDataset,
    transform: &PairTransform,
    cfg: &ScoreConfig,
    bins: usize,
) -> Result<ScoreSummary> {
    cfg.validate()?;
    if bins == 0 {
        return Err(Error::InvalidConfig {
            what: "histogram needs at least one bin".into(),
        });
    }
    let images = transform.apply(ds.images(), true)?;
    let texts = transform.apply(ds.texts(), false)?;
    let mut scores = Vec::with_capacity(ds.len());
    for (x, y) in images.rows().zip(texts.rows()) {
        let mut s = linalg::cosine(x, y);
        if cfg.clamp_negative {
            s = s.max(0.0);
        }
        scores.push(cfg.omega * s);
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut histogram = vec![0usize; bins];
    for &s in &scores {
        let bin = if max > min {
            (((s - min) / (max - min)) * bins as f64).floor() as usize
        } else {
            0
        };
        histogram[bin.min(bins - 1)] += 1;
    }
    Ok(ScoreSummary {
        count: scores.len(),
        min,
        max,
        mean,
        histogram,
    })
}

/// Recall@1 for both retrieval directions, as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub r_at_1_i2t: f64,
    pub r_at_1_t2i: f64,
}

fn top1_hits(queries: &EmbeddingMatrix, candidates: &EmbeddingMatrix) -> usize {
    let hits: Vec<bool> = (0..queries.n())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let qn = linalg::norm(q);
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0;
            for j in 0..candidates.n() {
                let c = candidates.row(j);
                let cos = linalg::dot(q, c) / (qn * linalg::norm(c));
                // ties keep the lowest candidate index
                if cos > best {
                    best = cos;
                    best_j = j;
                }
            }
            best_j == i
        })
        .collect();
    hits.iter().filter(|&&h| h).count()
}

/// Fraction of queries whose top-1 cross-modal neighbor is their own pair,
/// both directions.
pub fn retrieval_r1(ds: &PairedDataset) -> Result<RetrievalResult> {
    let n = ds.len() as f64;
    let i2t = top1_hits(ds.images(), ds.texts());
    let t2i = top1_hits(ds.texts(), ds.images());
    Ok(RetrievalResult {
        r_at_1_i2t: 100.0 * i2t as f64 / n,
        r_at_1_t2i: 100.0 * t2i as f64 / n,
    })
}

/// Zero-shot classification accuracy against per-class template averages,
/// as a percentage.
///
/// Each class embedding is the renormalized mean of its template rows;
/// images are assigned to the argmax-cosine class. The default is balanced
/// accuracy (unweighted mean of per-class recall over classes that have
/// images); `support_weighted` weights each class by its image count.
pub fn zero_shot_classify(
    images: &EmbeddingMatrix,
    templates: &ClassTemplateSet,
    support_weighted: bool,
) -> Result<f64> {
    if templates.dim() != images.d() {
        return Err(Error::DimensionMismatch {
            context: "class template hidden dimension".into(),
            expected: images.d(),
            found: templates.dim(),
        });
    }
    if templates.image_labels().len() != images.n() {
        return Err(Error::DimensionMismatch {
            context: "image labels".into(),
            expected: images.n(),
            found: templates.image_labels().len(),
        });
    }
    let classes = templates.class_count();
    let mut class_rows = Vec::with_capacity(classes * images.d());
    for c in 0..classes {
        let group = templates.templates_for(c);
        let mean = linalg::column_means(group.data(), group.n(), group.d());
        class_rows.extend(mean);
    }
    let class_matrix =
        normalize_rows(&EmbeddingMatrix::from_vec(classes, images.d(), class_rows)?)?;

    let mut correct = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (i, row) in images.rows().enumerate() {
        let qn = linalg::norm(row);
        if qn == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_c = 0;
        for (c, class_row) in class_matrix.rows().enumerate() {
            let cos = linalg::dot(row, class_row) / qn;
            if cos > best {
                best = cos;
                best_c = c;
            }
        }
        let label = templates.image_labels()[i];
        support[label] += 1;
        if best_c == label {
            correct[label] += 1;
        }
    }

    let populated = support.iter().filter(|&&s| s > 0).count();
    if populated == 0 {
        return Err(Error::EmptyMatrix {
            context: "no labeled images".into(),
        });
    }
    let accuracy = if support_weighted {
        let total: usize = support.iter().sum();
        correct.iter().sum::<usize>() as f64 / total as f64
    } else {
        let mut acc = 0.0;
        for c in 0..classes {
            if support[c] > 0 {
                acc += correct[c] as f64 / support[c] as f64;
            }
        }
        acc / populated as f64
    };
    Ok(100.0 * accuracy)
}

/// Kendall rank correlation with tie correction:
/// `(concordant - discordant) / sqrt((n0 - n1)(n0 - n2))` where `n0` is the
/// pair count and `n1`, `n2` the tie-pair counts of each list.
///
/// Returns `None` when either list is entirely tied (zero variance makes
/// the coefficient undefined).
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "rank correlation lists".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            found: a.len(),
        });
    }
    for (idx, v) in a.iter().chain(b).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: idx % a.len(),
                col: idx / a.len(),
            });
        }
    }
    let n = a.len();
    let mut concordant: i64 = 0;
    let mut discordant: i64 = 0;
    let mut ties_a: i64 = 0;
    let mut ties_b: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                ties_a += 1;
            }
            if db == 0.0 {
                ties_b += 1;
            }
            let product = da * db;
            if product > 0.0 {
                concordant += 1;
            } else if product < 0.0 {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    if n0 == ties_a || n0 == ties_b {
        return Ok(None);
    }
    let tau = (concordant - discordant) as f64
        / (((n0 - ties_a) as f64) * ((n0 - ties_b) as f64)).sqrt();
    Ok(Some(tau))
}

/// Scores every judged (image, candidate) pair and correlates the metric
/// scores with the human scores.
pub fn judgment_correlation(
    images: &EmbeddingMatrix,
    image_ids: &[String],
    candidates: &EmbeddingMatrix,
    judgments: &HumanJudgmentSet,
    transform: &PairTransform,
    cfg: &ScoreConfig,
) -> Result<Option<f64>> {
    judgments.validate_against(image_ids, candidates.n())?;
    let index: HashMap<&str, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let transformed_images = transform.apply(images, true)?;
    let transformed_candidates = transform.apply(candidates, false)?;
    let mut human = Vec::with_capacity(judgments.records.len());
    let mut metric = Vec::with_capacity(judgments.records.len());
    for record in &judgments.records {
        let image_row = transformed_images.row(index[record.image_id.as_str()]);
        let candidate_row = transformed_candidates.row(record.candidate);
        let mut s = linalg::cosine(image_row, candidate_row);
        if cfg.clamp_negative {
            s = s.max(0.0);
        }
        human.push(record.score);
        metric.push(cfg.omega * s);
    }
    kendall_tau_b(&human, &metric)
}

/// Whether larger or smaller values of a metric are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Higher,
    Lower,
}

/// One model's metric values. Non-finite values are allowed and rank last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRank {
    pub name: String,
    pub mean_rank: f64,
}

/// Mean-rank aggregation result, best model first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankOutcome {
    pub ranking: Vec<ModelRank>,
    /// (model, metric) cells that were non-finite and therefore ranked last.
    pub flagged: Vec<(String, String)>,
}

/// Ranks models per metric (dense ranks, ties share a rank, non-finite
/// values rank last) and orders them by mean rank.
pub fn rank_models(
    models: &[ModelMetrics],
    directions: &BTreeMap<String, Direction>,
) -> Result<RankOutcome> {
    if models.is_empty() {
        return Err(Error::InvalidConfig {
            what: "need at least one model to rank".into(),
        });
    }
    if directions.is_empty() {
        return Err(Error::InvalidConfig {
            what: "need at least one metric to rank by".into(),
        });
    }
    for model in models {
        for metric in directions.keys() {
            if !model.values.contains_key(metric) {
                return Err(Error::MissingMetric {
                    model: model.name.clone(),
                    metric: metric.clone(),
                });
            }
        }
    }

    let mut rank_sums = vec![0.0; models.len()];
    let mut flagged = Vec::new();
    for (metric, direction) in directions {
        let mut scored: Vec<(usize, f64)> = Vec::new();
        let mut unscored: Vec<usize> = Vec::new();
        for (idx, model) in models.iter().enumerate() {
            let value = model.values[metric];
            if value.is_finite() {
                scored.push((idx, value));
            } else {
                unscored.push(idx);
                flagged.push((model.name.clone(), metric.clone()));
            }
        }
        scored.sort_by(|(_, a), (_, b)| match direction {
            Direction::Higher => b.partial_cmp(a).expect("finite"),
            Direction::Lower => a.partial_cmp(b).expect("finite"),
        });
        let mut dense = 0usize;
        let mut previous = f64::NAN;
        for &(idx, value) in &scored {
            if value != previous {
                dense += 1;
                previous = value;
            }
            rank_sums[idx] += dense as f64;
        }
        for &idx in &unscored {
            rank_sums[idx] += (dense + 1) as f64;
        }
    }

    let metric_count = directions.len() as f64;
    let mut ranking: Vec<ModelRank> = models
        .iter()
        .zip(&rank_sums)
        .map(|(model, sum)| ModelRank {
            name: model.name.clone(),
            mean_rank: sum / metric_count,
        })
        .collect();
    ranking.sort_by(|a, b| {
        a.mean_rank
            .partial_cmp(&b.mean_rank)
            .expect("finite mean ranks")
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(RankOutcome { ranking, flagged })
}
