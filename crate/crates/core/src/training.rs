//! Losses and the end-to-end training loop.
//!
//! Both losses sum over the predicted steps and average over the batch:
//! `L_r = Σ_i ‖f'_{t+i} − f_{t+i}‖²`, `L_c = −Σ_i Σ_j y log p'`, and the
//! objective is `L_c + λ·L_r`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrainingSample;
use crate::error::{Error, ParseErrorKind, Result};
use crate::model::Model;
use crate::numerics::{sgd_step, Graph, Tensor, Var};
use crate::ppm::RolloutVars;

/// Floor applied to probabilities before the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the feature reconstruction loss.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sum over steps of squared feature error, divided by the batch size.
pub fn feature_loss(g: &mut Graph<'_>, preds: &[Var], targets: &[Var]) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim("feature_loss", &[preds.len()], &[targets.len()]));
    }
    let p = g.concat_rows(preds)?;
    let t = g.concat_rows(targets)?;
    let diff = g.sub(p, t)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    let batch = g.value(preds[0]).rows() as f64;
    Ok(g.scale(total, 1.0 / batch))
}

/// Sum over steps of cross-entropy against one-hot targets, divided by the batch size.
pub fn class_loss(g: &mut Graph<'_>, probs: &[Var], targets: &[Var]) -> Result<Var> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::dim("class_loss", &[probs.len()], &[targets.len()]));
    }
    let p = g.concat_rows(probs)?;
    let y = g.concat_rows(targets)?;
    let logp = g.log_clamped(p, LOG_FLOOR);
    let picked = g.mul(y, logp)?;
    let total = g.sum(picked);
    let batch = g.value(probs[0]).rows() as f64;
    Ok(g.scale(total, -1.0 / batch))
}

/// `class + λ·feature`.
pub fn total_loss(g: &mut Graph<'_>, class: Var, feature: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(feature, lambda);
    g.add(class, weighted)
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub class: Var,
    pub feature: Var,
    pub total: Var,
}

/// Losses of a batched rollout against the samples it was computed from.
pub fn batch_losses(
    g: &mut Graph<'_>,
    rollout: &RolloutVars,
    batch: &[&TrainingSample],
    num_classes: usize,
    lambda: f64,
) -> Result<Losses> {
    let l = rollout.horizon();
    let mut feat_targets = Vec::with_capacity(l);
    let mut label_targets = Vec::with_capacity(l);
    for i in 0..l {
        let rows: Vec<&[f64]> = batch.iter().map(|s| s.future_features.row(i)).collect();
        feat_targets.push(g.input(Tensor::from_rows(&rows)?));
        let labels: Vec<usize> = batch.iter().map(|s| s.future_labels[i]).collect();
        label_targets.push(g.input(Tensor::one_hot_rows(&labels, num_classes)?));
    }
    let feature = feature_loss(g, &rollout.features, &feat_targets)?;
    let class = class_loss(g, &rollout.probs, &label_targets)?;
    let total = total_loss(g, class, feature, lambda)?;
    Ok(Losses { class, feature, total })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub class_loss: f64,
    pub feature_loss: f64,
    pub total: f64,
    /// Eval-mode accuracy of the first predicted step over the training samples.
    pub acc_h1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,L_c,L_r,total,acc_h1";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Shortest round-trip float formatting, so parse → render is lossless.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.class_loss, r.feature_loss, r.total, r.acc_h1
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let mut offset = 0u64;
        let header = lines.next().unwrap_or("");
        if header.trim_end() != HISTORY_HEADER {
            return Err(Error::parse(
                0,
                ParseErrorKind::Malformed(format!("expected header {HISTORY_HEADER:?}")),
            ));
        }
        offset += header.len() as u64;
        let mut records = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            let bad = |what: &str| Error::parse(offset, ParseErrorKind::Malformed(format!("row {row}: {what}")));
            if fields.len() != 5 {
                return Err(Error::parse(
                    offset,
                    ParseErrorKind::RowDimension {
                        row,
                        expected: 5,
                        found: fields.len(),
                    },
                ));
            }
            let num = |i: usize| {
                fields[i]
                    .parse::<f64>()
                    .map_err(|_| bad(&format!("bad number {:?}", fields[i])))
            };
            records.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| bad("bad epoch"))?,
                class_loss: num(1)?,
                feature_loss: num(2)?,
                total: num(3)?,
                acc_h1: num(4)?,
            });
            offset += line.len() as u64;
        }
        Ok(History { records })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        History::parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn check_samples(model: &Model, samples: &[TrainingSample]) -> Result<()> {
    let cfg = model.config();
    if samples.is_empty() {
        return Err(Error::Contract("training needs at least one sample".into()));
    }
    for s in samples {
        if s.observed.shape() != [cfg.seq_len, cfg.d_model] {
            return Err(Error::dim("train", s.observed.shape(), &[cfg.seq_len, cfg.d_model]));
        }
        if s.future_features.shape() != [cfg.horizon, cfg.d_model] || s.future_labels.len() != cfg.horizon {
            return Err(Error::dim(
                "train",
                s.future_features.shape(),
                &[cfg.horizon, cfg.d_model],
            ));
        }
        if let Some(&l) = s.future_labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(Error::Contract(format!("label {l} outside 0..{}", cfg.num_classes)));
        }
    }
    Ok(())
}

const EVAL_BATCH: usize = 256;

/// Eval-mode accuracy of step `tau` (1-based) over `samples`.
pub fn accuracy_at_step(model: &Model, samples: &[TrainingSample], tau: usize) -> Result<f64> {
    if tau == 0 || tau > model.config().horizon {
        return Err(Error::Contract(format!(
            "step {tau} outside 1..={}",
            model.config().horizon
        )));
    }
    if samples.is_empty() {
        return Err(Error::Contract("accuracy over zero samples".into()));
    }
    let mut hits = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let obs: Vec<&Tensor> = chunk.iter().map(|s| &s.observed).collect();
        for (r, s) in model.predict_batch(&obs)?.iter().zip(chunk) {
            let pred = argmax(r.probs.row(tau - 1));
            hits += usize::from(pred == s.future_labels[tau - 1]);
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD with momentum over `samples`, reshuffled every epoch.
pub fn train(model: &mut Model, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<History> {
    train_with(model, samples, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    model: &mut Model,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    check_samples(model, samples)?;
    let num_classes = model.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = History::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut lc, mut lr, mut total) = (0.0, 0.0, 0.0);
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &samples[i]).collect();
            let observed: Vec<&Tensor> = batch.iter().map(|s| &s.observed).collect();
            let graph_seed: u64 = rng.random();
            let grads = {
                let mut g = Graph::train(model.params(), graph_seed);
                let out = model.forward(&mut g, &observed)?;
                let losses = batch_losses(&mut g, &out.rollout, &batch, num_classes, cfg.lambda)?;
                let value = g.value(losses.total).data()[0];
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: batch_idx,
                        loss: value,
                    });
                }
                let n = batch.len() as f64;
                lc += g.value(losses.class).data()[0] * n;
                lr += g.value(losses.feature).data()[0] * n;
                total += value * n;
                g.backward(losses.total)?
            };
            grads.accumulate_into(model.params_mut());
            sgd_step(model.params_mut(), cfg.lr, cfg.momentum)?;
        }
        let n = samples.len() as f64;
        let record = EpochRecord {
            epoch,
            class_loss: lc / n,
            feature_loss: lr / n,
            total: total / n,
            acc_h1: accuracy_at_step(model, samples, 1)?,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_round_trips() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 1,
                class_loss: 0.1 + 0.2,
                feature_loss: 1e-300,
                total: 3.0,
                acc_h1: 0.5,
            }],
        };
        let text = h.to_csv();
        assert!(text.starts_with("epoch,L_c,L_r,total,acc_h1\n"));
        assert_eq!(History::parse_csv(&text).unwrap(), h);
        assert!(History::parse_csv("epoch,x\n").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
