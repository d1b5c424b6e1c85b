//! Chunk-level feature sequences, training windows, file formats and the
//! synthetic generator.

pub mod io;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{load_features, load_features_csv, save_features, save_features_csv};
pub use synthetic::{gen_synthetic, BayesOracle, DurationLaw, Generator, Segment, SyntheticConfig};

/// Seconds covered by one chunk (six frames at 24 fps).
pub const DEFAULT_CHUNK_SECONDS: f64 = 0.25;

/// One video as chunk features plus one label per chunk. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub chunk_seconds: f64,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Contract(format!(
                "chunk {row} has label {label}, outside 0..{num_classes}"
            )));
        }
        Ok(FeatureSequence {
            video_id: video_id.into(),
            features,
            labels,
            num_classes,
            chunk_seconds: DEFAULT_CHUNK_SECONDS,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `[start, start + len)` as a new tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.len() {
            return Err(Error::SequenceTooShort {
                needed: start + len,
                got: self.len(),
            });
        }
        let d = self.d_model();
        Tensor::matrix(len, d, self.features.data()[start * d..(start + len) * d].to_vec())
    }
}

/// Averages consecutive blocks of `chunk_size` frames. Each chunk takes the
/// label of its frame at offset `chunk_size / 2`; leftover frames are dropped.
pub fn chunk_frames(
    video_id: impl Into<String>,
    frames: &Tensor,
    frame_labels: &[usize],
    chunk_size: usize,
    num_classes: usize,
) -> Result<FeatureSequence> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    if frames.rows() != frame_labels.len() {
        return Err(Error::Contract(format!(
            "{} frames but {} frame labels",
            frames.rows(),
            frame_labels.len()
        )));
    }
    let n = frames.rows() / chunk_size;
    if n == 0 {
        return Err(Error::SequenceTooShort {
            needed: chunk_size,
            got: frames.rows(),
        });
    }
    let d = frames.cols();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n {
        let base = c * chunk_size;
        for j in 0..d {
            let s: f64 = (base..base + chunk_size).map(|r| frames.get(r, j)).sum();
            data.push(s / chunk_size as f64);
        }
        labels.push(frame_labels[base + chunk_size / 2]);
    }
    FeatureSequence::new(video_id, Tensor::matrix(n, d, data)?, labels, num_classes)
}

/// An observed window and the `l` chunks that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `T × d`
    pub observed: Tensor,
    /// `l × d`
    pub future_features: Tensor,
    pub future_labels: Vec<usize>,
}

impl TrainingSample {
    /// The last observed row.
    pub fn current(&self) -> &[f64] {
        self.observed.row(self.observed.rows() - 1)
    }

    /// `l × C` one-hot targets.
    pub fn future_one_hot(&self, num_classes: usize) -> Result<Tensor> {
        Tensor::one_hot_rows(&self.future_labels, num_classes)
    }
}

/// Every stride-1 window with `T` observed and `l` future chunks; empty when
/// the sequence is shorter than `T + l`.
pub fn make_samples(seq: &FeatureSequence, seq_len: usize, horizon: usize) -> Result<Vec<TrainingSample>> {
    if seq_len == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "windows need T ≥ 1 and l ≥ 1, got T = {seq_len}, l = {horizon}"
        )));
    }
    let span = seq_len + horizon;
    if seq.len() < span {
        return Ok(Vec::new());
    }
    (0..=seq.len() - span)
        .map(|u| {
            Ok(TrainingSample {
                observed: seq.window(u, seq_len)?,
                future_features: seq.window(u + seq_len, horizon)?,
                future_labels: seq.labels()[u + seq_len..u + span].to_vec(),
            })
        })
        .collect()
}

/// Samples from every sequence, in order.
pub fn make_all_samples(seqs: &[FeatureSequence], seq_len: usize, horizon: usize) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend(make_samples(s, seq_len, horizon)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths_and_labels() {
        assert!(FeatureSequence::new("v", Tensor::zeros(3, 2), vec![0, 1], 2).is_err());
        assert!(FeatureSequence::new("v", Tensor::zeros(2, 2), vec![0, 2], 2).is_err());
    }

    #[test]
    fn window_bounds() {
        let s = FeatureSequence::new("v", Tensor::zeros(4, 2), vec![0; 4], 2).unwrap();
        assert!(s.window(2, 2).is_ok());
        assert!(s.window(3, 2).is_err());
    }
}
