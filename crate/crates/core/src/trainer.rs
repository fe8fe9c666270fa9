//! Second-stage optimization on frozen embeddings: fit the running
//! statistics, then train the batch-norm scale/shift of both modalities
//! with decoupled-weight-decay Adam.
//!
//! The input embeddings are never mutated; every randomized step draws
//! from a named stream of the configured seed, so a run is reproducible
//! bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bnlayer::{update_running_stats, BnState, RunningStats};
use crate::embstore::{EmbeddingMatrix, PairedDataset};
use crate::error::{Error, Result};
use crate::gapmetrics::centroid_distance;
use crate::losses::{loss_and_grad_bn, BnBatch, LossConfig, LossKind};
use crate::seed::stream_rng;

/// Learning rate used for full encoder fine-tuning at corpus scale; kept
/// selectable next to the faster desk default.
pub const PAPER_LEARNING_RATE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub shuffle_seed: u64,
    pub loss: LossConfig,
    /// Momentum of the running-statistics update.
    pub stats_alpha: f64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Probe metrics are recorded every this many steps.
    pub log_every: usize,
    /// Fraction of pairs held out for the probe gap measurement.
    pub probe_fraction: f64,
    /// Keep updating running statistics while the affine parameters train
    /// (default off: statistics freeze after the fitting phase).
    pub update_stats_during_training: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 3,
            learning_rate: 1e-2,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_seed: 42,
            loss: LossConfig::default(),
            stats_alpha: 0.1,
            max_steps: None,
            log_every: 10,
            probe_fraction: 0.1,
            update_stats_during_training: false,
        }
    }
}

impl TrainerConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig {
                what: format!("batch_size must be at least 2, got {}", self.batch_size),
            });
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig {
                what: "epochs must be at least 1".into(),
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("learning_rate must be finite and >= 0, got {}", self.learning_rate),
            });
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("weight_decay must be finite and >= 0, got {}", self.weight_decay),
            });
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig {
                    what: format!("{name} must be in [0, 1), got {beta}"),
                });
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::InvalidConfig {
                what: format!("adam_eps must be finite and > 0, got {}", self.adam_eps),
            });
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig {
                what: "log_every must be at least 1".into(),
            });
        }
        if !(0.0..=0.5).contains(&self.probe_fraction) {
            return Err(Error::InvalidConfig {
                what: format!("probe_fraction must be in [0, 0.5], got {}", self.probe_fraction),
            });
        }
        Ok(())
    }

    fn batch_size_warning(&self) -> Option<String> {
        if matches!(self.batch_size, 64 | 128 | 256 | 512) {
            None
        } else {
            Some(format!(
                "batch size {} is outside the evaluated set {{64, 128, 256, 512}}; \
                 batch size has minimal effect on the outcome",
                self.batch_size
            ))
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// Centroid distance of the held-out probe set under the current
    /// layer state; absent when no probe pairs were held out.
    pub probe_cd: Option<f64>,
}

/// Step records (strictly increasing) plus any configuration warnings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub warnings: Vec<String>,
}

/// Final layer states for both modalities plus the training log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub image: BnState,
    pub text: BnState,
    pub log: TrainLog,
}

/// Adam with decoupled weight decay over a fixed set of parameter vectors.
///
/// The decay term is scaled by the learning rate, so a zero learning rate
/// leaves parameters untouched entirely.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainerConfig, param_lens: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            first_moment: param_lens.iter().map(|&len| vec![0.0; len]).collect(),
            second_moment: param_lens.iter().map(|&len| vec![0.0; len]).collect(),
        }
    }

    /// One update over all parameter vectors, in declaration order.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.first_moment.len());
        assert_eq!(grads.len(), self.first_moment.len());
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            for c in 0..param.len() {
                let g = grad[c];
                m[c] = self.beta1 * m[c] + (1.0 - self.beta1) * g;
                v[c] = self.beta2 * v[c] + (1.0 - self.beta2) * g * g;
                let m_hat = m[c] / bias1;
                let v_hat = v[c] / bias2;
                param[c] -=
                    self.lr * m_hat / (v_hat.sqrt() + self.eps) + self.lr * self.weight_decay * param[c];
            }
        }
    }
}

fn gather(m: &EmbeddingMatrix, indices: &[usize]) -> EmbeddingMatrix {
    let mut data = Vec::with_capacity(indices.len() * m.d());
    for &i in indices {
        data.extend_from_slice(m.row(i));
    }
    EmbeddingMatrix::from_vec(indices.len(), m.d(), data).expect("gathered rows stay valid")
}

/// Streams shuffled mini-batches for the configured number of epochs,
/// updating the running statistics of both modalities; returns the final
/// states. Rows are expected to be normalized already.
pub fn fit_running_stats(
    ds: &PairedDataset,
    cfg: &TrainerConfig,
) -> Result<(RunningStats, RunningStats)> {
    cfg.validate()?;
    if ds.len() < cfg.batch_size {
        return Err(Error::InsufficientSamples {
            needed: cfg.batch_size,
            found: ds.len(),
        });
    }
    let d = ds.images().d();
    let mut image_stats = RunningStats::new(d, cfg.stats_alpha)?;
    let mut text_stats = RunningStats::new(d, cfg.stats_alpha)?;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream_rng(cfg.shuffle_seed, &format!("stats/epoch/{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a singleton has a degenerate batch variance
            }
            let mut batch: Vec<usize> = chunk.to_vec();
            batch.sort_unstable();
            image_stats = update_running_stats(&image_stats, &gather(ds.images(), &batch))?;
            text_stats = update_running_stats(&text_stats, &gather(ds.texts(), &batch))?;
        }
    }
    Ok((image_stats, text_stats))
}

fn probe_gap(
    probe_images: &EmbeddingMatrix,
    probe_texts: &EmbeddingMatrix,
    image: &BnState,
    text: &BnState,
) -> Result<f64> {
    let transformed = PairedDataset::with_index_ids(
        image.forward(probe_images)?,
        text.forward(probe_texts)?,
    )?;
    centroid_distance(&transformed)
}

/// Fits running statistics on the training split, then trains the four
/// affine parameter vectors with the configured loss.
///
/// When the four-way loss is selected but no augmented dataset is given,
/// the originals stand in for their augmentations (the loss becomes four
/// identical terms). A non-finite loss aborts with the last good state
/// wrapped in the error.
pub fn train_bn(
    ds: &PairedDataset,
    augmented: Option<&PairedDataset>,
    cfg: &TrainerConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if let Some(aug) = augmented {
        if aug.len() != ds.len() || aug.images().d() != ds.images().d() {
            return Err(Error::DimensionMismatch {
                context: "augmented dataset alignment".into(),
                expected: ds.len(),
                found: aug.len(),
            });
        }
    }

    let normalized = ds.normalized()?;
    let normalized_aug = augmented.map(|a| a.normalized()).transpose()?;

    // probe split
    let n = normalized.len();
    let probe_count = (cfg.probe_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(cfg.shuffle_seed, "probe-split"));
    let mut probe_idx: Vec<usize> = order[..probe_count].to_vec();
    let mut train_idx: Vec<usize> = order[probe_count..].to_vec();
    probe_idx.sort_unstable();
    train_idx.sort_unstable();

    let train_images = gather(normalized.images(), &train_idx);
    let train_texts = gather(normalized.texts(), &train_idx);
    let train_ids: Vec<String> = train_idx.iter().map(|&i| normalized.ids()[i].clone()).collect();
    let train_ds = PairedDataset::new(train_images, train_texts, train_ids)?;
    let probe = (!probe_idx.is_empty()).then(|| {
        (
            gather(normalized.images(), &probe_idx),
            gather(normalized.texts(), &probe_idx),
        )
    });

    let (image_stats, text_stats) = fit_running_stats(&train_ds, cfg)?;
    let d = train_ds.images().d();
    let mut image = BnState {
        stats: image_stats,
        params: crate::bnlayer::BatchNormParams::identity(d),
    };
    let mut text = BnState {
        stats: text_stats,
        params: crate::bnlayer::BatchNormParams::identity(d),
    };

    let mut log = TrainLog::default();
    if let Some(warning) = cfg.batch_size_warning() {
        log.warnings.push(warning);
    }

    let mut optimizer = AdamW::new(cfg, &[d, d, d, d]);
    let mut step: u64 = 0;
    let step_budget = cfg.max_steps.unwrap_or(usize::MAX);
    // most recent state that produced a finite loss
    let mut last_good = (image.clone(), text.clone());
    let mut last_loss: Option<(f64, BTreeMap<String, f64>)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut stream_rng(cfg.shuffle_seed, &format!("train/epoch/{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            if step as usize >= step_budget {
                break 'epochs;
            }
            if chunk.len() < 2 {
                continue;
            }
            let mut batch_idx: Vec<usize> = chunk.to_vec();
            batch_idx.sort_unstable();

            let images = gather(train_ds.images(), &batch_idx);
            let texts = gather(train_ds.texts(), &batch_idx);
            // the training split indexes the full dataset for augmentations
            let full_idx: Vec<usize> = batch_idx.iter().map(|&i| train_idx[i]).collect();
            let (aug_images, aug_texts) = match (&normalized_aug, cfg.loss.loss_kind) {
                (Some(aug), LossKind::McsieCyclip) => (
                    Some(gather(aug.images(), &full_idx)),
                    Some(gather(aug.texts(), &full_idx)),
                ),
                (None, LossKind::McsieCyclip) => (Some(images.clone()), Some(texts.clone())),
                _ => (None, None),
            };

            if cfg.update_stats_during_training {
                image.stats = update_running_stats(&image.stats, &images)?;
                text.stats = update_running_stats(&text.stats, &texts)?;
            }

            let batch = BnBatch {
                images: &images,
                texts: &texts,
                aug_images: aug_images.as_ref(),
                aug_texts: aug_texts.as_ref(),
            };
            let step_result = loss_and_grad_bn(&batch, &image, &text, &cfg.loss);
            let (loss, grads) = match step_result {
                Ok((loss, grads)) if loss.total.is_finite() => (loss, grads),
                _ => {
                    return Err(Error::TrainDiverged {
                        step: step + 1,
                        last_good: Box::new(TrainOutput {
                            image: last_good.0,
                            text: last_good.1,
                            log,
                        }),
                    })
                }
            };
            last_good = (image.clone(), text.clone());
            last_loss = Some((loss.total, loss.components.clone()));

            step += 1;
            {
                let (img_params, txt_params) = (&mut image.params, &mut text.params);
                optimizer.step(
                    &mut [
                        &mut img_params.weight,
                        &mut img_params.bias,
                        &mut txt_params.weight,
                        &mut txt_params.bias,
                    ],
                    &[
                        &grads.weight_image,
                        &grads.bias_image,
                        &grads.weight_text,
                        &grads.bias_text,
                    ],
                );
            }

            if step % cfg.log_every as u64 == 0 || step as usize == step_budget {
                // a probe failure means the updated state is numerically
                // unusable, which is a divergence
                let probe_cd = match &probe {
                    Some((pi, pt)) => match probe_gap(pi, pt, &image, &text) {
                        Ok(cd) => Some(cd),
                        Err(_) => {
                            return Err(Error::TrainDiverged {
                                step,
                                last_good: Box::new(TrainOutput {
                                    image: last_good.0,
                                    text: last_good.1,
                                    log,
                                }),
                            })
                        }
                    },
                    None => None,
                };
                log.records.push(TrainRecord {
                    step,
                    total: loss.total,
                    components: loss.components,
                    probe_cd,
                });
            }
        }
    }

    // always close the log with the final state
    if log.records.last().map(|r| r.step) != Some(step) {
        if let Some((total, components)) = last_loss {
            let probe_cd = match &probe {
                Some((pi, pt)) => match probe_gap(pi, pt, &image, &text) {
                    Ok(cd) => Some(cd),
                    Err(_) => {
                        return Err(Error::TrainDiverged {
                            step,
                            last_good: Box::new(TrainOutput {
                                image: last_good.0,
                                text: last_good.1,
                                log,
                            }),
                        })
                    }
                },
                None => None,
            };
            log.records.push(TrainRecord {
                step,
                total,
                components,
                probe_cd,
            });
        }
    }

    Ok(TrainOutput { image, text, log })
}
