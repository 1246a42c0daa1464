//! Training loop shared by oracle pre-training and the augmentation runs.
//!
//! Every random draw comes from a stream keyed by the training seed, the
//! epoch and the sample id, so the two modes see identical data orderings,
//! partners and augmentation draws. The only difference between them is the
//! core-restore and context-mask step.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{DatasetManifest, Sample, Split};
use super::derive_seed;
use super::maps::MapArchive;
use crate::augment::{apply, AugmentSpec};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::keep::keep_augment;
use crate::metrics::{mean_foreground_dice, summarize, summary_csv, ClassSummary, MetricRecord};
use crate::oracle::OracleNet;
use crate::segmentation::{seg_losses_soft, LabelMap};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaselineAug,
    KeepCore,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline_aug" => Ok(Mode::BaselineAug),
            "keep_core" => Ok(Mode::KeepCore),
            other => Err(format!("unknown mode {other:?}; expected baseline_aug or keep_core")),
        }
    }
}

/// `lr0·(1 + cos(π·epoch/epochs))/2`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    lr0 * (1.0 + (PI * epoch as f64 / epochs as f64).cos()) / 2.0
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub mode: Mode,
    /// Frozen weights of the selected checkpoint.
    pub model: OracleNet,
    pub best_epoch: usize,
    pub epoch_loss: Vec<f64>,
    /// Validation mean foreground Dice per epoch; empty without a validation split.
    pub val_dice: Vec<f64>,
    /// Clean training-split Dice of the selected weights.
    pub train_dice: f64,
    pub split: Split,
    pub test_records: Vec<MetricRecord>,
}

impl TrainReport {
    pub fn summary(&self) -> Vec<ClassSummary> {
        summarize(&self.test_records)
    }

    pub fn csv(&self) -> String {
        summary_csv(&self.summary())
    }

    /// Mean over held-out samples of the per-sample foreground Dice.
    pub fn test_dice(&self) -> f64 {
        mean_dice(&self.test_records)
    }
}

/// Mean Dice over every record; each record is one sample and one class.
pub fn mean_dice(records: &[MetricRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64
}

fn predict(model: &OracleNet, x: &Tensor) -> Result<LabelMap> {
    LabelMap::argmax(&model.forward(x)?)
}

fn split_dice(model: &OracleNet, samples: &[Sample], idx: &[usize], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        total += mean_foreground_dice(&predict(model, &samples[i].image)?, &samples[i].labels, k)?;
    }
    Ok(total / idx.len() as f64)
}

/// Per-sample, per-foreground-class metrics on `idx`.
pub fn evaluate_samples(
    model: &OracleNet,
    samples: &[Sample],
    idx: &[usize],
    num_classes: usize,
    spacing: (f64, f64),
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for &i in idx {
        let s = &samples[i];
        let pred = predict(model, &s.image)?;
        for class in 1..num_classes {
            out.push(MetricRecord::evaluate(&s.id, &pred, &s.labels, class as u8, spacing)?);
        }
    }
    Ok(out)
}

fn stream(seed: u64, label: &str, epoch: usize, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label, &epoch.to_string(), id]))
}

/// Trains a fresh network on the training split of `samples`.
///
/// `maps` must hold a map for every training sample in keep mode.
pub fn fit(
    samples: &[Sample],
    maps: Option<&[Option<ImportanceMap>]>,
    cfg: &RunConfig,
    augment: &AugmentSpec,
    mode: Mode,
    num_classes: usize,
    spacing: (f64, f64),
) -> Result<TrainReport> {
    cfg.training.validate()?;
    augment.validate()?;
    let first = samples.first().ok_or_else(|| Error::Data("no samples to train on".into()))?;
    let tc = &cfg.training;
    let split = Split::new(samples.len(), tc.val_fraction, tc.test_fraction, derive_seed(tc.seed, &["split"]))?;
    if mode == Mode::KeepCore {
        cfg.keep.validate()?;
        for &i in &split.train {
            let map = maps.and_then(|m| m.get(i)).and_then(Option::as_ref);
            let Some(map) = map else {
                return Err(Error::Data(format!("keep_core mode needs a map for {}", samples[i].id)));
            };
            let (h, w) = samples[i].labels.dims();
            if map.image_dims() != (h, w) {
                return Err(Error::Data(format!(
                    "{}: map covers {:?} but image is {h}×{w}",
                    samples[i].id,
                    map.image_dims()
                )));
            }
        }
    }

    let channels = first.image.shape()[0];
    let mut model = cfg.oracle.init(channels, num_classes, tc.seed)?;
    let mut adam: Vec<(AdamState, AdamState)> = model
        .layers()
        .iter()
        .map(|l| {
            let c = AdamConfig::with_lr(tc.lr);
            (AdamState::new(l.weight.shape(), c), AdamState::new(l.bias.shape(), c))
        })
        .collect();

    let mut best: Option<(f64, usize, OracleNet)> = None;
    let mut epoch_loss = Vec::with_capacity(tc.epochs);
    let mut val_dice = Vec::new();
    for epoch in 0..tc.epochs {
        let lr = cosine_lr(tc.lr, epoch, tc.epochs);
        for (w, b) in &mut adam {
            w.config.lr = lr;
            b.config.lr = lr;
        }
        let mut order = split.train.clone();
        order.shuffle(&mut stream(tc.seed, "shuffle", epoch, ""));
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch) {
            let mut acc: Vec<(Tensor, Tensor)> = model
                .layers()
                .iter()
                .map(|l| (Tensor::zeros_like(&l.weight), Tensor::zeros_like(&l.bias)))
                .collect();
            for &i in batch {
                let s = &samples[i];
                let partner = if augment.needs_partner() {
                    let pick = stream(tc.seed, "partner", epoch, &s.id).random_range(0..split.train.len());
                    let p = &samples[split.train[pick]];
                    Some((&p.image, &p.labels))
                } else {
                    None
                };
                let mut rng = stream(tc.seed, "augment", epoch, &s.id);
                let sample = match mode {
                    Mode::BaselineAug => apply(augment, &s.image, &s.labels, &mut rng, partner)?,
                    Mode::KeepCore => {
                        let map = maps.and_then(|m| m[i].as_ref()).expect("checked before training");
                        keep_augment(&s.image, &s.labels, map, augment, &cfg.keep, &mut rng, partner)?.sample
                    }
                };
                let target = sample.target(num_classes)?;
                let mut tape = Tape::new();
                let x = tape.constant(sample.image);
                let (logits, params) = model.record(&mut tape, x, true)?;
                let (ce, dice) = seg_losses_soft(&mut tape, logits, &target)?;
                let loss = tape.add(ce, dice)?;
                let value = tape.value(loss)?.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += value;
                let grads = tape.backward(loss)?;
                for (l, (gw, gb)) in acc.iter_mut().enumerate() {
                    *gw = gw.add(&grads.wrt(params.weights[l])?)?;
                    *gb = gb.add(&grads.wrt(params.biases[l])?)?;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (((w, b), (aw, ab)), (gw, gb)) in model.parameters_mut()?.into_iter().zip(&mut adam).zip(&acc) {
                aw.step(w, &gw.scalar_mul(scale)?)?;
                ab.step(b, &gb.scalar_mul(scale)?)?;
            }
        }
        epoch_loss.push(loss_sum / split.train.len() as f64);
        let score = if split.val.is_empty() {
            epoch as f64
        } else {
            let d = split_dice(&model, samples, &split.val, num_classes)?;
            val_dice.push(d);
            d
        };
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    let model = model.frozen();
    let train_dice = split_dice(&model, samples, &split.train, num_classes)?;
    let test_records = evaluate_samples(&model, samples, &split.test, num_classes, spacing)?;
    Ok(TrainReport {
        mode,
        model,
        best_epoch,
        epoch_loss,
        val_dice,
        train_dice,
        split,
        test_records,
    })
}

/// Pre-trains the oracle on clean images.
pub fn train_oracle(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<TrainReport> {
    let samples = manifest.load_all()?;
    fit(
        &samples,
        None,
        cfg,
        &AugmentSpec::Identity,
        Mode::BaselineAug,
        manifest.num_classes,
        manifest.spacing,
    )
}

/// Trains with `cfg.augment`, restoring core tokens in keep mode. Maps come
/// from `archive` when given, otherwise from the manifest entries.
pub fn train_with_keep(
    manifest: &DatasetManifest,
    archive: Option<&MapArchive>,
    cfg: &RunConfig,
    mode: Mode,
) -> Result<TrainReport> {
    let samples = manifest.load_all()?;
    let maps = if mode == Mode::KeepCore {
        let mut maps = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            maps.push(match archive {
                Some(a) => a.load(&s.id)?,
                None => manifest.load_entry_map(i)?,
            });
        }
        Some(maps)
    } else {
        None
    };
    fit(
        &samples,
        maps.as_deref(),
        cfg,
        &cfg.augment,
        mode,
        manifest.num_classes,
        manifest.spacing,
    )
}

/// Metrics of `model` on the held-out split the training run would use.
pub fn evaluate(model: &OracleNet, manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<MetricRecord>> {
    let samples = manifest.load_all()?;
    let tc = &cfg.training;
    let split = Split::new(samples.len(), tc.val_fraction, tc.test_fraction, derive_seed(tc.seed, &["split"]))?;
    evaluate_samples(model, &samples, &split.test, manifest.num_classes, manifest.spacing)
}
