//! IDX binary codec (big-endian header: magic, one 4-byte size per
//! dimension, then a u8 payload in row-major order).

use ndarray::Array2;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    /// count x rows x cols, row-major pixels.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            reason: format!("truncated {what}: need {end} header bytes, have {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Lossless decode of an IDX byte string; trailing bytes are rejected.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0, "magic")?;
    match magic {
        MAGIC_LABELS => {
            let count = read_u32(bytes, 4, "label count")? as usize;
            expect_payload(bytes, 8, count)?;
            Ok(IdxData::Labels(bytes[8..8 + count].to_vec()))
        }
        MAGIC_IMAGES => {
            let count = read_u32(bytes, 4, "image count")? as usize;
            let rows = read_u32(bytes, 8, "row count")? as usize;
            let cols = read_u32(bytes, 12, "column count")? as usize;
            let len = count
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or(Error::IdxParse {
                    offset: 4,
                    reason: format!("dimension product {count}*{rows}*{cols} overflows"),
                })?;
            expect_payload(bytes, 16, len)?;
            Ok(IdxData::Images {
                count,
                rows,
                cols,
                pixels: bytes[16..16 + len].to_vec(),
            })
        }
        other => Err(Error::IdxParse {
            offset: 0,
            reason: format!("bad magic 0x{other:08x}, want 0x{MAGIC_IMAGES:08x} or 0x{MAGIC_LABELS:08x}"),
        }),
    }
}

fn expect_payload(bytes: &[u8], start: usize, len: usize) -> Result<()> {
    let actual = bytes.len() - start.min(bytes.len());
    if actual != len {
        return Err(Error::IdxParse {
            offset: start,
            reason: format!("payload has {actual} bytes, expected {len}"),
        });
    }
    Ok(())
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if count * rows * cols != pixels.len() {
        return Err(Error::InvalidInput(format!(
            "{count}x{rows}x{cols} needs {} pixels, got {}",
            count * rows * cols,
            pixels.len()
        )));
    }
    if count > u32::MAX as usize || rows > u32::MAX as usize || cols > u32::MAX as usize {
        return Err(Error::InvalidInput("dimension exceeds u32".into()));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx(data: &IdxData) -> Result<Vec<u8>> {
    match data {
        IdxData::Labels(l) => Ok(encode_idx_labels(l)),
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => encode_idx_images(*count, *rows, *cols, pixels),
    }
}

/// Pair an images file with a labels file; pixels scale to [0,1].
pub fn dataset_from_idx(images: &IdxData, labels: &IdxData) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = match images {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => (*count, *rows, *cols, pixels),
        IdxData::Labels(_) => {
            return Err(Error::InvalidInput("first argument must be an images file".into()))
        }
    };
    let raw = match labels {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => {
            return Err(Error::InvalidInput("second argument must be a labels file".into()))
        }
    };
    if raw.len() != count {
        return Err(Error::ShapeMismatch {
            site: "idx labels".into(),
            expected: format!("{count} labels"),
            actual: format!("{}", raw.len()),
        });
    }
    let dim = rows * cols;
    let mut features = Array2::zeros((count, dim));
    for i in 0..count {
        for k in 0..dim {
            features[[i, k]] = pixels[i * dim + k] as f64 / 255.0;
        }
    }
    let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(features, labels, class_count)
}
