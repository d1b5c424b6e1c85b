//! Parameter checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "TTPPCKPT"  u16 version  u32 count
//! per parameter: u32 name_len, name (UTF-8), u32 rank, u32 × rank dims, f64 × numel
//! ```
//!
//! Readers reject any version they do not know instead of guessing.

use std::fs;
use std::path::Path;

use crate::data::io::Cursor;
use crate::error::{Error, ParseErrorKind, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTPPCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + params.num_scalars() * 8 + params.len() * 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut cur = Cursor::new(bytes);
    let bad_magic = |found: &[u8]| {
        Error::parse(
            0,
            ParseErrorKind::BadMagic {
                found: found.to_vec(),
                expected: "TTPPCKPT",
            },
        )
    };
    let magic = cur.take(8).map_err(|_| bad_magic(bytes))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad_magic(magic));
    }
    let version_at = cur.pos as u64;
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(version_at, ParseErrorKind::UnsupportedVersion(version)));
    }
    let count = cur.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_at = cur.pos as u64;
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::parse(name_at, ParseErrorKind::Malformed("parameter name is not UTF-8".into())))?
            .to_string();
        let shape_at = cur.pos as u64;
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::parse(
                shape_at,
                ParseErrorKind::Malformed(format!("parameter {name:?} has rank {rank}")),
            ));
        }
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| {
                Error::parse(
                    shape_at,
                    ParseErrorKind::Malformed(format!("parameter {name:?} has impossible shape {shape:?}")),
                )
            })?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let at = cur.pos as u64;
            let v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::parse(
                    at,
                    ParseErrorKind::Malformed(format!("non-finite value in {name:?}")),
                ));
            }
            data.push(v);
        }
        params
            .add(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::parse(name_at, ParseErrorKind::Malformed(e.to_string())))?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            cur.pos as u64,
            ParseErrorKind::TrailingBytes(bytes.len() - cur.pos),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rebuilds a model of shape `config` from a checkpoint file.
pub fn load_model(config: ModelConfig, path: impl AsRef<Path>) -> Result<Model> {
    Model::from_params(config, &load_checkpoint(path)?)
}
