//! Ranking metrics (calibrated AP, AP), accuracy, and per-horizon reports.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BayesOracle, FeatureSequence};
use crate::error::{Error, ParseErrorKind, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// Scores of one class over every evaluated position, with ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredFrames {
    scores: Vec<f64>,
    positives: Vec<bool>,
}

impl ScoredFrames {
    pub fn new(scores: Vec<f64>, positives: Vec<bool>) -> Result<Self> {
        if scores.len() != positives.len() {
            return Err(Error::dim("scored_frames", &[scores.len()], &[positives.len()]));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Contract(format!("score {i} is NaN")));
        }
        Ok(ScoredFrames { scores, positives })
    }

    pub fn push(&mut self, score: f64, positive: bool) {
        self.scores.push(score);
        self.positives.push(positive);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn positives(&self) -> &[bool] {
        &self.positives
    }

    pub fn num_positive(&self) -> usize {
        self.positives.iter().filter(|&&p| p).count()
    }

    pub fn num_negative(&self) -> usize {
        self.len() - self.num_positive()
    }

    /// Ground truth in ranked order: descending score, ties by ascending index.
    pub fn ranked(&self) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.positives[i]).collect()
    }
}

/// Sum of quotients kept as an unevaluated pair `hi + lo`, so the final mean
/// is correctly rounded in practice (the 5/6 hand case comes out exact).
#[derive(Default)]
struct QuotientSum {
    hi: f64,
    lo: f64,
}

impl QuotientSum {
    fn add_quotient(&mut self, num: f64, den: f64) {
        let q = num / den;
        let r = (-q).mul_add(den, num) / den;
        self.add(q);
        self.lo += r;
    }

    fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (x - bb);
        self.hi = s;
        self.lo += err;
    }

    fn mean(&self, n: usize) -> f64 {
        let n = n as f64;
        let q = self.hi / n;
        let r = (-q).mul_add(n, self.hi) + self.lo;
        q + r / n
    }
}

/// `Σ_k prec(k)·I(k) / P` with `prec(k) = TP·a / (TP·a + FP·b)`.
fn ranked_precision_mean(frames: &ScoredFrames, a: f64, b: f64) -> Option<f64> {
    let p = frames.num_positive();
    if p == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut acc = QuotientSum::default();
    for positive in frames.ranked() {
        if positive {
            tp += 1.0;
            if fp == 0.0 {
                acc.add(1.0);
            } else {
                acc.add_quotient(tp * a, tp * a + fp * b);
            }
        } else {
            fp += 1.0;
        }
    }
    Some(acc.mean(p))
}

/// Calibrated AP with `w = N_neg / N_pos`; `None` when there are no positives.
pub fn calibrated_ap(frames: &ScoredFrames) -> Option<f64> {
    // TP / (TP + FP/w) = TP·N_neg / (TP·N_neg + FP·N_pos), all integers.
    ranked_precision_mean(frames, frames.num_negative() as f64, frames.num_positive() as f64)
}

/// Calibrated AP with an explicit negative/positive ratio `w > 0`.
pub fn calibrated_ap_weighted(frames: &ScoredFrames, w: f64) -> Option<f64> {
    ranked_precision_mean(frames, w, 1.0)
}

/// Standard (uncalibrated) AP; `None` when there are no positives.
pub fn average_precision(frames: &ScoredFrames) -> Option<f64> {
    ranked_precision_mean(frames, 1.0, 1.0)
}

/// Fraction of positions where the labels agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("accuracy", &[pred.len()], &[truth.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Contract("accuracy of an empty label set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Mean calibrated AP over action classes.
    CAP,
    /// Mean AP over action classes.
    MAP,
    /// Top-1 accuracy over all positions.
    ACC,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::CAP, Metric::MAP, Metric::ACC];

    pub fn label(self) -> &'static str {
        match self {
            Metric::CAP => "cap",
            Metric::MAP => "map",
            Metric::ACC => "acc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cap" => Ok(Metric::CAP),
            "map" => Ok(Metric::MAP),
            "acc" => Ok(Metric::ACC),
            _ => Err(Error::Config(format!("unknown metric {s:?}; expected cap, map or acc"))),
        }
    }
}

/// Anything that turns the chunks up to `t` into `l × C` future class scores.
pub trait Anticipator {
    fn seq_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn num_classes(&self) -> usize;

    /// Scores for chunks `t+1 ..= t+l`, observing `[t+1−T, t]`.
    fn anticipate(&self, seq: &FeatureSequence, t: usize) -> Result<Tensor>;

    fn anticipate_batch(&self, seq: &FeatureSequence, anchors: &[usize]) -> Result<Vec<Tensor>> {
        anchors.iter().map(|&t| self.anticipate(seq, t)).collect()
    }
}

fn observed_window(seq: &FeatureSequence, t: usize, seq_len: usize) -> Result<Tensor> {
    if t + 1 < seq_len {
        return Err(Error::SequenceTooShort {
            needed: seq_len,
            got: t + 1,
        });
    }
    seq.window(t + 1 - seq_len, seq_len)
}

impl Anticipator for Model {
    fn seq_len(&self) -> usize {
        self.config().seq_len
    }

    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn anticipate(&self, seq: &FeatureSequence, t: usize) -> Result<Tensor> {
        Ok(self.predict(&observed_window(seq, t, self.config().seq_len)?)?.probs)
    }

    fn anticipate_batch(&self, seq: &FeatureSequence, anchors: &[usize]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(anchors.len());
        for chunk in anchors.chunks(256) {
            let windows = chunk
                .iter()
                .map(|&t| observed_window(seq, t, self.config().seq_len))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = windows.iter().collect();
            out.extend(self.predict_batch(&refs)?.into_iter().map(|r| r.probs));
        }
        Ok(out)
    }
}

/// Emits the true future label as a one-hot row (uniform past the sequence end).
#[derive(Debug, Clone)]
pub struct OracleAnticipator {
    pub seq_len: usize,
    pub horizon: usize,
    pub num_classes: usize,
}

impl Anticipator for OracleAnticipator {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn anticipate(&self, seq: &FeatureSequence, t: usize) -> Result<Tensor> {
        let c = self.num_classes;
        let mut out = Tensor::filled(self.horizon, c, 1.0 / c as f64);
        for i in 0..self.horizon {
            if let Some(&label) = seq.labels().get(t + 1 + i) {
                out.data_mut()[i * c..(i + 1) * c].copy_from_slice(Tensor::one_hot(label, c).data());
            }
        }
        Ok(out)
    }
}

/// Uniform random scores, reproducible per (seed, video, anchor).
#[derive(Debug, Clone)]
pub struct RandomAnticipator {
    pub seq_len: usize,
    pub horizon: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Anticipator for RandomAnticipator {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn anticipate(&self, seq: &FeatureSequence, t: usize) -> Result<Tensor> {
        let id_hash = seq.video_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ id_hash);
        rng.set_stream(t as u64);
        let data = (0..self.horizon * self.num_classes)
            .map(|_| rng.random::<f64>())
            .collect();
        Tensor::matrix(self.horizon, self.num_classes, data)
    }
}

/// Bayes-optimal scores for the synthetic process, from the current label and
/// how long its run has lasted since the start of the sequence. Exact when the
/// transition matrix has no self-loops (runs are then whole segments).
#[derive(Debug, Clone)]
pub struct BayesAnticipator {
    pub oracle: BayesOracle,
    pub seq_len: usize,
    pub horizon: usize,
}

impl Anticipator for BayesAnticipator {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_classes(&self) -> usize {
        self.oracle.num_classes()
    }

    fn anticipate(&self, seq: &FeatureSequence, t: usize) -> Result<Tensor> {
        let labels = seq.labels();
        if t >= labels.len() {
            return Err(Error::SequenceTooShort {
                needed: t + 1,
                got: labels.len(),
            });
        }
        let label = labels[t];
        let age = labels[..=t].iter().rev().take_while(|&&l| l == label).count();
        Ok(self.oracle.predict_given_age(label, age, self.horizon))
    }
}

/// One horizon of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonEntry {
    /// Per-class values (`None` = skipped: no positives, or background under AP metrics).
    /// Empty for accuracy.
    pub per_class: Vec<Option<f64>>,
    pub value: f64,
    /// Number of scored positions.
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub metric: Metric,
    pub chunk_seconds: f64,
    pub horizons: Vec<HorizonEntry>,
}

impl HorizonReport {
    pub fn values(&self) -> Vec<f64> {
        self.horizons.iter().map(|h| h.value).collect()
    }

    /// Mean over horizons.
    pub fn average(&self) -> f64 {
        self.horizons.iter().map(|h| h.value).sum::<f64>() / self.horizons.len() as f64
    }

    pub fn to_row(&self, method: impl Into<String>) -> ReportRow {
        ReportRow {
            method: method.into(),
            values: self.values(),
            avg: self.average(),
        }
    }
}

/// Scores every chunk `u` at horizon `τ` with the rollout anchored at `t = u − τ`,
/// skipping anchors without `T` observed chunks.
pub fn evaluate_horizons(
    anticipator: &dyn Anticipator,
    sequences: &[FeatureSequence],
    metric: Metric,
) -> Result<HorizonReport> {
    let (big_t, l, c) = (anticipator.seq_len(), anticipator.horizon(), anticipator.num_classes());
    if big_t == 0 || l == 0 {
        return Err(Error::Config("anticipator needs T ≥ 1 and l ≥ 1".into()));
    }
    let mut frames: Vec<Vec<ScoredFrames>> = vec![vec![ScoredFrames::default(); c]; l];
    let mut argmax: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); l];
    let mut chunk_seconds = None;

    for seq in sequences {
        if seq.num_classes() != c {
            return Err(Error::Contract(format!(
                "sequence {} has {} classes, anticipator has {c}",
                seq.video_id,
                seq.num_classes()
            )));
        }
        if seq.len() < big_t + 1 {
            continue;
        }
        chunk_seconds.get_or_insert(seq.chunk_seconds);
        let anchors: Vec<usize> = (big_t - 1..seq.len() - 1).collect();
        let preds = anticipator.anticipate_batch(seq, &anchors)?;
        for (&t, p) in anchors.iter().zip(&preds) {
            if p.rows() != l || p.cols() != c {
                return Err(Error::dim("anticipate", p.shape(), &[l, c]));
            }
            for tau in 1..=l {
                let Some(&truth) = seq.labels().get(t + tau) else { break };
                let row = p.row(tau - 1);
                for (k, f) in frames[tau - 1].iter_mut().enumerate() {
                    f.push(row[k], truth == k);
                }
                let best = (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                argmax[tau - 1].0.push(best);
                argmax[tau - 1].1.push(truth);
            }
        }
    }

    let mut horizons = Vec::with_capacity(l);
    for tau in 0..l {
        let positions = argmax[tau].0.len();
        if positions == 0 {
            return Err(Error::EmptyReport);
        }
        let entry = match metric {
            Metric::ACC => HorizonEntry {
                per_class: Vec::new(),
                value: accuracy(&argmax[tau].0, &argmax[tau].1)?,
                positions,
            },
            Metric::CAP | Metric::MAP => {
                let score = if metric == Metric::CAP {
                    calibrated_ap
                } else {
                    average_precision
                };
                let per_class: Vec<Option<f64>> = frames[tau]
                    .iter()
                    .enumerate()
                    .map(|(k, f)| if k == 0 { None } else { score(f) })
                    .collect();
                let present: Vec<f64> = per_class.iter().flatten().copied().collect();
                if present.is_empty() {
                    return Err(Error::EmptyReport);
                }
                HorizonEntry {
                    value: present.iter().sum::<f64>() / present.len() as f64,
                    per_class,
                    positions,
                }
            }
        };
        horizons.push(entry);
    }
    Ok(HorizonReport {
        metric,
        chunk_seconds: chunk_seconds.unwrap_or(crate::data::DEFAULT_CHUNK_SECONDS),
        horizons,
    })
}

/// Column label for horizon `tau` (1-based): `0.25s`, `0.5s`, `1.0s`, ….
pub fn horizon_label(tau: usize, chunk_seconds: f64) -> String {
    let s = tau as f64 * chunk_seconds;
    if s.fract() == 0.0 {
        format!("{s:.1}s")
    } else {
        format!("{s}s")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub values: Vec<f64>,
    pub avg: f64,
}

/// Methods by horizons, plus the average column.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub horizon_labels: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn new(horizon: usize, chunk_seconds: f64) -> Self {
        ReportTable {
            horizon_labels: (1..=horizon).map(|t| horizon_label(t, chunk_seconds)).collect(),
            rows: Vec::new(),
        }
    }

    pub fn from_report(method: impl Into<String>, report: &HorizonReport) -> Self {
        let mut table = ReportTable::new(report.horizons.len(), report.chunk_seconds);
        table.rows.push(report.to_row(method));
        table
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if row.values.len() != self.horizon_labels.len() {
            return Err(Error::dim(
                "report_row",
                &[row.values.len()],
                &[self.horizon_labels.len()],
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(self.horizon_labels.iter().cloned());
        header.push("Avg".into());
        w.write_record(&header).expect("writing to memory");
        for r in &self.rows {
            let mut rec = vec![r.method.clone()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            rec.push(r.avg.to_string());
            w.write_record(&rec).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is utf-8")
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut records = rdr.records();
        let malformed = |offset: u64, msg: String| Error::parse(offset, ParseErrorKind::Malformed(msg));
        let header = match records.next() {
            Some(r) => r.map_err(|e| malformed(0, e.to_string()))?,
            None => return Err(malformed(0, "empty report".into())),
        };
        let n = header.len();
        if n < 3 || &header[0] != "method" || &header[n - 1] != "Avg" {
            return Err(malformed(0, "report header must be method,<horizons…>,Avg".into()));
        }
        let mut table = ReportTable {
            horizon_labels: header.iter().skip(1).take(n - 2).map(str::to_string).collect(),
            rows: Vec::new(),
        };
        for rec in records {
            let rec = rec.map_err(|e| malformed(e.position().map_or(0, |p| p.byte()), e.to_string()))?;
            let offset = rec.position().map_or(0, |p| p.byte());
            if rec.len() != n {
                return Err(Error::parse(
                    offset,
                    ParseErrorKind::RowDimension {
                        row: table.rows.len() + 1,
                        expected: n,
                        found: rec.len(),
                    },
                ));
            }
            let nums = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| malformed(offset, format!("bad number {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            table.rows.push(ReportRow {
                method: rec[0].to_string(),
                values: nums[..n - 2].to_vec(),
                avg: nums[n - 2],
            });
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}
