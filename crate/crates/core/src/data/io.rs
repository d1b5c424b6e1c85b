//! Feature file formats.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "TTPPFEAT"  u16 version  u32 chunks  u32 d_model  u32 classes
//! f32 × (chunks · d_model)   row-major features
//! u16 × chunks               labels
//! ```
//!
//! Features are stored as `f32`, so values that are not exactly representable
//! in single precision are rounded on save. The CSV alternative starts with a
//! `video_id,d_model,classes` line (optionally preceded by that literal header)
//! and then has one `label,f_1,…,f_d` line per chunk.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::FeatureSequence;
use crate::error::{Error, ParseErrorKind, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"TTPPFEAT";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 4 + 4 + 4;

/// Serializes `seq` in the binary layout.
pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let (n, d, c) = (seq.len(), seq.d_model(), seq.num_classes());
    if c > u16::MAX as usize + 1 {
        return Err(Error::Config(format!("{c} classes do not fit u16 labels")));
    }
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * 4 + n * 2);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n, "chunks")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d, "d_model")?.to_le_bytes());
    out.extend_from_slice(&to_u32(c, "classes")?.to_le_bytes());
    for &v in seq.features().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in seq.labels() {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::parse(
                self.pos as u64,
                ParseErrorKind::Truncated { needed: n - left },
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses the binary layout; every failure names the byte offset where it was found.
pub fn decode_features(bytes: &[u8], video_id: &str) -> Result<FeatureSequence> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(8).map_err(|_| {
        Error::parse(
            0,
            ParseErrorKind::BadMagic {
                found: bytes[..bytes.len().min(8)].to_vec(),
                expected: "TTPPFEAT",
            },
        )
    })?;
    if magic != FEATURE_MAGIC {
        return Err(Error::parse(
            0,
            ParseErrorKind::BadMagic {
                found: magic.to_vec(),
                expected: "TTPPFEAT",
            },
        ));
    }
    let version_at = cur.pos as u64;
    let version = cur.u16()?;
    if version != FEATURE_VERSION {
        return Err(Error::parse(version_at, ParseErrorKind::UnsupportedVersion(version)));
    }
    let dims_at = cur.pos as u64;
    let n = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    if n == 0 || d == 0 || c == 0 {
        return Err(Error::parse(
            dims_at,
            ParseErrorKind::Malformed(format!("zero extent in header: chunks {n}, d_model {d}, classes {c}")),
        ));
    }
    let features_at = cur.pos;
    let need = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(n * 2))
        .ok_or_else(|| Error::parse(dims_at, ParseErrorKind::Malformed("header extents overflow".into())))?;
    if bytes.len() - features_at < need {
        return Err(Error::parse(
            bytes.len() as u64,
            ParseErrorKind::Truncated {
                needed: need - (bytes.len() - features_at),
            },
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let at = cur.pos as u64;
        let v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(
                at,
                ParseErrorKind::Malformed(format!("non-finite feature at row {}, column {}", i / d, i % d)),
            ));
        }
        data.push(v as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let at = cur.pos as u64;
        let label = cur.u16()? as usize;
        if label >= c {
            return Err(Error::parse(
                at,
                ParseErrorKind::LabelOutOfRange { row, label, classes: c },
            ));
        }
        labels.push(label);
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            cur.pos as u64,
            ParseErrorKind::TrailingBytes(bytes.len() - cur.pos),
        ));
    }
    FeatureSequence::new(video_id, Tensor::matrix(n, d, data)?, labels, c)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn save_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(seq)?).map_err(|e| Error::io(path, e))
}

/// Loads a binary feature file; the video id is the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &stem(path))
}

pub fn write_features_csv<W: Write>(seq: &FeatureSequence, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let csv_err = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
    w.write_record([
        seq.video_id.clone(),
        seq.d_model().to_string(),
        seq.num_classes().to_string(),
    ])
    .map_err(csv_err)?;
    for (row, &label) in seq.features().iter_rows().zip(seq.labels()) {
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(label.to_string());
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Contract(format!("csv flush failed: {e}")))
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::parse(offset, ParseErrorKind::Malformed(e.to_string()))
}

pub fn read_features_csv<R: Read>(input: R) -> Result<FeatureSequence> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let mut next = || records.next().transpose().map_err(csv_error);

    let mut header = next()?.ok_or_else(|| Error::parse(0, ParseErrorKind::Truncated { needed: 1 }))?;
    if header.iter().eq(["video_id", "d_m", "C"]) || header.iter().eq(["video_id", "d_model", "classes"]) {
        let at = header.position().map_or(0, |p| p.byte());
        header = next()?.ok_or_else(|| Error::parse(at, ParseErrorKind::Truncated { needed: 1 }))?;
    }
    let header_at = header.position().map_or(0, |p| p.byte());
    if header.len() != 3 {
        return Err(Error::parse(
            header_at,
            ParseErrorKind::Malformed(format!(
                "header needs video_id,d_model,classes, found {} fields",
                header.len()
            )),
        ));
    }
    let count = |i: usize, what: &str| -> Result<usize> {
        match header[i].parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::parse(
                header_at,
                ParseErrorKind::Malformed(format!("{what} must be a positive integer, found {:?}", &header[i])),
            )),
        }
    };
    let video_id = header[0].to_string();
    let d = count(1, "d_model")?;
    let c = count(2, "classes")?;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    while let Some(rec) = next()? {
        let at = rec.position().map_or(0, |p| p.byte());
        let row = labels.len();
        if rec.len() != d + 1 {
            return Err(Error::parse(
                at,
                ParseErrorKind::RowDimension {
                    row,
                    expected: d,
                    found: rec.len().saturating_sub(1),
                },
            ));
        }
        let label: usize = rec[0].parse().map_err(|_| {
            Error::parse(
                at,
                ParseErrorKind::Malformed(format!("row {row}: bad label {:?}", &rec[0])),
            )
        })?;
        if label >= c {
            return Err(Error::parse(
                at,
                ParseErrorKind::LabelOutOfRange { row, label, classes: c },
            ));
        }
        labels.push(label);
        for field in rec.iter().skip(1) {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => {
                    return Err(Error::parse(
                        at,
                        ParseErrorKind::Malformed(format!("row {row}: bad feature value {field:?}")),
                    ))
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::parse(
            header_at,
            ParseErrorKind::Malformed("no feature rows".into()),
        ));
    }
    FeatureSequence::new(video_id, Tensor::matrix(labels.len(), d, data)?, labels, c)
}

pub fn save_features_csv(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features_csv(seq, std::io::BufWriter::new(file))
}

pub fn load_features_csv(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features_csv(std::io::BufReader::new(file))
}

/// Dispatches on extension: `.csv` is text, anything else binary.
pub fn load_any(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_features_csv(path),
        _ => load_features(path),
    }
}
