use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of each CLS-attention row.
pub const ATTENTION_SUM_TOLERANCE: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal,
    Anomalous,
    Unknown,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
            Label::Unknown => 255,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Anomalous),
            255 => Some(Label::Unknown),
            _ => None,
        }
    }

    /// `Some(true)` for anomalous, `Some(false)` for normal.
    pub fn as_binary(self) -> Option<bool> {
        match self {
            Label::Normal => Some(false),
            Label::Anomalous => Some(true),
            Label::Unknown => None,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Label::from_u8(v).ok_or_else(|| format!("invalid label {v}"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("empty geometry: grid {grid_h}x{grid_w}, dim {dim}")]
    EmptyGeometry {
        grid_h: usize,
        grid_w: usize,
        dim: usize,
    },
    #[error("{what} has shape {actual:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("attention head {head} has invalid entry at patch {patch}")]
    InvalidAttentionEntry { head: usize, patch: usize },
    #[error("attention head {head} sums to {sum}, expected 1")]
    AttentionSum { head: usize, sum: f32 },
    #[error("pixel mask present on a record labelled normal")]
    MaskOnNormal,
    #[error("pixel mask value {value} at ({row}, {col}) is not 0 or 1")]
    MaskValue { row: usize, col: usize, value: u8 },
    #[error("{field} = {value} exceeds the file format's range")]
    OutOfRange { field: &'static str, value: usize },
}

/// One image's frozen backbone output: the patch-feature grid, per-head
/// CLS attention over patches and the ground truth available for it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `[grid_h * grid_w, dim]`, row-major over the grid.
    pub features: Array2<f32>,
    /// `[n_heads, grid_h * grid_w]`.
    pub attention: Array2<f32>,
    pub label: Label,
    pub image_h: usize,
    pub image_w: usize,
    /// `[image_h, image_w]` with values 0/1.
    pub pixel_mask: Option<Array2<u8>>,
}

impl FeatureRecord {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_heads(&self) -> usize {
        self.attention.nrows()
    }

    /// Checks every record invariant.
    pub fn validate(&self) -> Result<(), RecordError> {
        let n = self.n_patches();
        let dim = self.dim();
        if n == 0 || dim == 0 {
            return Err(RecordError::EmptyGeometry {
                grid_h: self.grid_h,
                grid_w: self.grid_w,
                dim,
            });
        }
        if self.features.nrows() != n {
            return Err(RecordError::Shape {
                what: "features",
                expected: (n, dim),
                actual: self.features.dim(),
            });
        }
        if self.attention.ncols() != n {
            return Err(RecordError::Shape {
                what: "attention",
                expected: (self.n_heads(), n),
                actual: self.attention.dim(),
            });
        }
        for ((row, col), v) in self.features.indexed_iter() {
            if !v.is_finite() {
                return Err(RecordError::NonFiniteFeature { row, col });
            }
        }
        for (head, row) in self.attention.outer_iter().enumerate() {
            let mut sum = 0.0f64;
            for (patch, &a) in row.iter().enumerate() {
                if !a.is_finite() || a < 0.0 {
                    return Err(RecordError::InvalidAttentionEntry { head, patch });
                }
                sum += a as f64;
            }
            if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE as f64 {
                return Err(RecordError::AttentionSum {
                    head,
                    sum: sum as f32,
                });
            }
        }
        if let Some(mask) = &self.pixel_mask {
            if self.label == Label::Normal {
                return Err(RecordError::MaskOnNormal);
            }
            if mask.dim() != (self.image_h, self.image_w) {
                return Err(RecordError::Shape {
                    what: "pixel_mask",
                    expected: (self.image_h, self.image_w),
                    actual: mask.dim(),
                });
            }
            if let Some(((row, col), &value)) = mask.indexed_iter().find(|(_, &v)| v > 1) {
                return Err(RecordError::MaskValue { row, col, value });
            }
        }
        Ok(())
    }

    /// Row-normalises every attention head in place. Rows with zero mass
    /// become uniform.
    pub fn renormalize_attention(&mut self) {
        let n = self.n_patches().max(1) as f32;
        for mut row in self.attention.outer_iter_mut() {
            let sum: f32 = row.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                row.mapv_inplace(|a| a / sum);
            } else {
                row.fill(1.0 / n);
            }
        }
    }

    /// Per-patch ground truth derived from the pixel mask: a patch is
    /// anomalous if any pixel inside its footprint is set.
    pub fn patch_ground_truth(&self) -> Option<Vec<bool>> {
        let mask = self.pixel_mask.as_ref()?;
        let mut out = vec![false; self.n_patches()];
        for ((y, x), &v) in mask.indexed_iter() {
            if v != 0 {
                let r = y * self.grid_h / self.image_h.max(1);
                let c = x * self.grid_w / self.image_w.max(1);
                out[r * self.grid_w + c] = true;
            }
        }
        Some(out)
    }
}
