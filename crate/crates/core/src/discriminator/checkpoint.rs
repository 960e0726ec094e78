//! Binary checkpoint container.
//!
//! ```text
//! magic "GADC" | u32 version = 1 | u8 scalar width (4 = f32, 8 = f64)
//! | u8 residual | u8 dropout placement | u8 reserved (0)
//! | u32 dim | u16 grid_h | u16 grid_w | u32 n_heads | u32 hidden | f64 dropout
//! | u32 tensor count | per tensor: u32 element count, values (LE, scalar width)
//! | 32-byte SHA-256 of everything before it
//! ```
//!
//! Tensors follow [`DiscriminatorParams::tensors`] order.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    validate_hyper, DiscriminatorHyper, DiscriminatorModel, DiscriminatorParams, DropoutPlacement,
    ModelError,
};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"GADC";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint stores {stored}-byte scalars, requested {requested}-byte")]
    ScalarWidth { stored: u8, requested: u8 },
    #[error("checkpoint geometry {found} does not match expected {expected}")]
    Geometry { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `(dim, n_patches, n_heads, hidden)` a loader can insist on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub dim: usize,
    pub n_patches: usize,
    pub n_heads: usize,
    pub hidden: usize,
}

impl std::fmt::Display for ModelShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "dim={} N={} heads={} hidden={}",
            self.dim, self.n_patches, self.n_heads, self.hidden
        )
    }
}

impl<T: Scalar> DiscriminatorModel<T> {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            dim: self.dim,
            n_patches: self.n_patches(),
            n_heads: self.hyper.n_heads,
            hidden: self.hyper.hidden,
        }
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &DiscriminatorModel<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.params.n_values() * T::WIDTH as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::WIDTH);
    out.push(model.hyper.residual as u8);
    out.push(model.hyper.dropout_placement.code());
    out.push(0);
    out.extend_from_slice(&(model.dim as u32).to_le_bytes());
    out.extend_from_slice(&(model.grid_h as u16).to_le_bytes());
    out.extend_from_slice(&(model.grid_w as u16).to_le_bytes());
    out.extend_from_slice(&(model.hyper.n_heads as u32).to_le_bytes());
    out.extend_from_slice(&(model.hyper.hidden as u32).to_le_bytes());
    out.extend_from_slice(&model.hyper.dropout.to_le_bytes());
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, values, _) in tensors {
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for &v in values {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Short hex identifier: the first 8 bytes of the checkpoint's checksum.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let tail = &bytes[bytes.len().saturating_sub(DIGEST_LEN)..];
    tail.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::read_le(self.take(8)?))
    }
}

/// Scalar width (4 or 8 bytes) recorded in a checkpoint header.
pub fn checkpoint_scalar_width(path: &Path) -> Result<u8, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 9 {
        return Err(CheckpointError::Truncated);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    Ok(bytes[8])
}

/// Parses a checkpoint, optionally insisting on a geometry.
pub fn decode_checkpoint<T: Scalar>(
    bytes: &[u8],
    expected: Option<ModelShape>,
) -> Result<DiscriminatorModel<T>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    let mut c = Cursor {
        bytes: body,
        pos: 4,
    };
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let width = c.u8()?;
    if width != T::WIDTH {
        return Err(CheckpointError::ScalarWidth {
            stored: width,
            requested: T::WIDTH,
        });
    }
    let residual = match c.u8()? {
        0 => false,
        1 => true,
        b => return Err(CheckpointError::Malformed(format!("residual flag {b}"))),
    };
    let placement_code = c.u8()?;
    let dropout_placement = DropoutPlacement::from_code(placement_code)
        .ok_or_else(|| CheckpointError::Malformed(format!("dropout placement {placement_code}")))?;
    c.u8()?;
    let dim = c.u32()? as usize;
    let grid_h = c.u16()? as usize;
    let grid_w = c.u16()? as usize;
    let n_heads = c.u32()? as usize;
    let hidden = c.u32()? as usize;
    let dropout = c.f64()?;
    let hyper = DiscriminatorHyper {
        n_heads,
        hidden,
        dropout,
        dropout_placement,
        residual,
    };
    let found = ModelShape {
        dim,
        n_patches: grid_h * grid_w,
        n_heads,
        hidden,
    };
    if let Some(exp) = expected {
        if exp != found {
            return Err(CheckpointError::Geometry {
                expected: exp.to_string(),
                found: found.to_string(),
            });
        }
    }
    validate_hyper(dim, &hyper)?;

    let count = c.u32()? as usize;
    let mut params = DiscriminatorParams::<T>::zeros(grid_h * grid_w, dim, hidden);
    let tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} tensors, expected {}",
            tensors.len()
        )));
    }
    let w = T::WIDTH as usize;
    for (name, dst, _) in tensors {
        let len = c.u32()? as usize;
        if len != dst.len() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} has {len} values, expected {}",
                dst.len()
            )));
        }
        let raw = c.take(len * w)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(w)) {
            *d = T::read_le(chunk);
        }
    }
    if c.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    if let Some(name) = params.first_non_finite() {
        return Err(CheckpointError::Malformed(format!(
            "non-finite values in {name}"
        )));
    }
    Ok(DiscriminatorModel {
        hyper,
        dim,
        grid_h,
        grid_w,
        params,
    })
}

pub fn save_checkpoint<T: Scalar>(
    model: &DiscriminatorModel<T>,
    path: &Path,
) -> Result<String, CheckpointError> {
    let bytes = encode_checkpoint(model);
    fs::write(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(checkpoint_id(&bytes))
}

/// Loads a checkpoint and its identifier.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<ModelShape>,
) -> Result<(DiscriminatorModel<T>, String), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let model = decode_checkpoint(&bytes, expected)?;
    Ok((model, checkpoint_id(&bytes)))
}
