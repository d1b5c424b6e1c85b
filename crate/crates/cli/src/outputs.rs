//! Run manifest plus the attention and parameter-count CSVs, with readers
//! for each so emitted files can be checked by parsing them back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use ttpp::model::ModelConfig;
use ttpp::training::TrainConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.ttpp";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub run: u64,
    pub data: u64,
    pub init: u64,
    pub train: u64,
}

/// Everything needed to reproduce a `train` run. No timestamps, so repeated
/// runs write identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub checkpoint_version: u16,
    pub seeds: SeedRecord,
    pub config: BTreeMap<String, String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_count: usize,
    pub param_checksum: String,
    pub train_sequences: usize,
    pub train_samples: usize,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub video_id: String,
    pub t: usize,
    pub head: usize,
    /// 0 is the oldest memory chunk, `t − T + 1`.
    pub memory_pos: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub method: String,
    pub d_model: usize,
    pub num_classes: usize,
    pub horizon: usize,
    pub params: usize,
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("malformed row in {}", path.display())))
        .collect()
}

pub fn write_attention(rows: &[AttentionRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

pub fn read_attention(path: &Path) -> Result<Vec<AttentionRow>> {
    read_rows(path)
}

pub fn write_param_counts(rows: &[ParamCountRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

pub fn read_param_counts(path: &Path) -> Result<Vec<ParamCountRow>> {
    read_rows(path)
}

pub fn param_counts_csv(rows: &[ParamCountRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
