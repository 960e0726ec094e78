//! GADF feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset size
//!      0    4  magic "GADF"
//!      4    4  u32 version (= 1)
//!      8    4  u32 dim
//!     12    2  u16 grid_h
//!     14    2  u16 grid_w
//!     16    2  u16 n_heads
//!     18    1  u8  label (0 normal, 1 anomalous, 255 unknown)
//!     19    1  u8  has_pixel_mask (0 or 1)
//!     20    4  u32 image_h
//!     24    4  u32 image_w
//!     28       f32 features[grid_h*grid_w][dim]
//!              f32 attention[n_heads][grid_h*grid_w]
//!              u8  pixel_mask[image_h*image_w]   (only if has_pixel_mask)
//! ```
//!
//! Decoding is strict: the file length must match the header exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use super::record::{FeatureRecord, Label, RecordError};

pub const MAGIC: [u8; 4] = *b"GADF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"GADF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("invalid label byte {0}")]
    InvalidLabel(u8),
    #[error("invalid has_pixel_mask byte {0}")]
    InvalidMaskFlag(u8),
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("record invariant violated: {0}")]
    Invariant(#[from] RecordError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

struct Header {
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    n_heads: usize,
    label: Label,
    has_mask: bool,
    image_h: usize,
    image_w: usize,
}

impl Header {
    fn expected_len(&self) -> u64 {
        let n = self.grid_h as u64 * self.grid_w as u64;
        let feats = n * self.dim as u64 * 4;
        let attn = self.n_heads as u64 * n * 4;
        let mask = if self.has_mask {
            self.image_h as u64 * self.image_w as u64
        } else {
            0
        };
        HEADER_LEN as u64 + feats + attn + mask
    }
}

/// Size in bytes of the GADF encoding of a record with this geometry.
pub fn encoded_len(
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    n_heads: usize,
    mask_pixels: Option<usize>,
) -> u64 {
    let n = (grid_h * grid_w) as u64;
    HEADER_LEN as u64
        + 4 * n * dim as u64
        + 4 * n_heads as u64 * n
        + mask_pixels.unwrap_or(0) as u64
}

fn check_range(field: &'static str, value: usize, max: u64) -> Result<(), RecordError> {
    if value as u64 > max {
        Err(RecordError::OutOfRange { field, value })
    } else {
        Ok(())
    }
}

/// Serialises a record after validating it.
pub fn encode_record(record: &FeatureRecord) -> Result<Vec<u8>, FormatError> {
    record.validate()?;
    check_range("dim", record.dim(), u32::MAX as u64)?;
    check_range("grid_h", record.grid_h, u16::MAX as u64)?;
    check_range("grid_w", record.grid_w, u16::MAX as u64)?;
    check_range("n_heads", record.n_heads(), u16::MAX as u64)?;
    check_range("image_h", record.image_h, u32::MAX as u64)?;
    check_range("image_w", record.image_w, u32::MAX as u64)?;

    let len = encoded_len(
        record.grid_h,
        record.grid_w,
        record.dim(),
        record.n_heads(),
        record.pixel_mask.as_ref().map(|m| m.len()),
    );
    let mut out = Vec::with_capacity(len as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(record.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(record.grid_h as u16).to_le_bytes());
    out.extend_from_slice(&(record.grid_w as u16).to_le_bytes());
    out.extend_from_slice(&(record.n_heads() as u16).to_le_bytes());
    out.push(record.label.as_u8());
    out.push(record.pixel_mask.is_some() as u8);
    out.extend_from_slice(&(record.image_h as u32).to_le_bytes());
    out.extend_from_slice(&(record.image_w as u32).to_le_bytes());
    for v in record.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in record.attention.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(mask) = &record.pixel_mask {
        out.extend(mask.iter().copied());
    }
    debug_assert_eq!(out.len() as u64, len);
    Ok(out)
}

fn u16_at(b: &[u8], off: usize) -> usize {
    u16::from_le_bytes([b[off], b[off + 1]]) as usize
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Parses and validates a GADF byte buffer.
pub fn decode_record(bytes: &[u8]) -> Result<FeatureRecord, FormatError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let label = Label::from_u8(bytes[18]).ok_or(FormatError::InvalidLabel(bytes[18]))?;
    let has_mask = match bytes[19] {
        0 => false,
        1 => true,
        b => return Err(FormatError::InvalidMaskFlag(b)),
    };
    let header = Header {
        dim: u32_at(bytes, 8) as usize,
        grid_h: u16_at(bytes, 12),
        grid_w: u16_at(bytes, 14),
        n_heads: u16_at(bytes, 16),
        label,
        has_mask,
        image_h: u32_at(bytes, 20) as usize,
        image_w: u32_at(bytes, 24) as usize,
    };
    let expected = header.expected_len();
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes { expected, actual });
    }

    let n = header.grid_h * header.grid_w;
    let feat_end = HEADER_LEN + 4 * n * header.dim;
    let attn_end = feat_end + 4 * header.n_heads * n;
    let features = f32s(&bytes[HEADER_LEN..feat_end]);
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFiniteFeature {
            row: i / header.dim,
            col: i % header.dim,
        });
    }
    let features = Array2::from_shape_vec((n, header.dim), features)
        .expect("feature length checked against header");
    let attention = Array2::from_shape_vec((header.n_heads, n), f32s(&bytes[feat_end..attn_end]))
        .expect("attention length checked against header");
    let pixel_mask = header.has_mask.then(|| {
        Array2::from_shape_vec((header.image_h, header.image_w), bytes[attn_end..].to_vec())
            .expect("mask length checked against header")
    });

    let record = FeatureRecord {
        grid_h: header.grid_h,
        grid_w: header.grid_w,
        features,
        attention,
        label: header.label,
        image_h: header.image_h,
        image_w: header.image_w,
        pixel_mask,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_record(record: &FeatureRecord, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_record(record)?;
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_record(path: &Path) -> Result<FeatureRecord, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_record(&bytes)
}
