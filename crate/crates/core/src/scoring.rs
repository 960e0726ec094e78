//! Inference: image-level top-K scores, patch-to-pixel anomaly maps and
//! dataset scoring with CSV / PNG / raw exports.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{DiscriminatorModel, ModelError, PatchScores};
use crate::feature_store::{Label, LoadedManifest, LoadedRecord, ManifestError, Split};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("anomaly map needs a non-empty image, got {h}x{w}")]
    EmptyImage { h: usize, w: usize },
    #[error("patch scores hold {len} values but the grid is {grid_h}x{grid_w}")]
    GridMismatch {
        len: usize,
        grid_h: usize,
        grid_w: usize,
    },
    #[error("{path}: record geometry {found} does not match the model ({expected})")]
    Geometry {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("negative smoothing sigma {0}")]
    Sigma(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("malformed map file {0}")]
    MalformedMap(PathBuf),
}

fn io_err(path: &Path, e: impl fmt::Display) -> ScoringError {
    ScoringError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// How many top patches enter the image score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopK {
    /// Every patch: the image score is the mean patch probability.
    All,
    #[serde(untagged)]
    Count(usize),
}

impl TopK {
    pub fn resolve(self, n: usize) -> Result<usize, ScoringError> {
        match self {
            TopK::All => Ok(n),
            TopK::Count(k) if (1..=n).contains(&k) => Ok(k),
            TopK::Count(k) => Err(ScoringError::KOutOfRange { k, n }),
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::Count(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TopK {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("top-k must be at least 1".into()),
            Ok(k) => Ok(TopK::Count(k)),
            Err(_) => Err(format!(
                "invalid top-k {s:?} (expected a positive integer or \"all\")"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore<T> {
    pub score: T,
    pub k_used: usize,
}

/// Mean of the `k` largest values. The selected values are summed in their
/// original order, so `k = N` reproduces the plain mean exactly.
pub fn top_k_mean<T: Scalar>(values: &[T], k: usize) -> Result<ImageScore<T>, ScoringError> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(ScoringError::KOutOfRange { k, n });
    }
    let sum = if k == n {
        values.iter().fold(T::zero(), |a, &v| a + v)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            values[b]
                .partial_cmp(&values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx.sort_unstable();
        idx.iter().fold(T::zero(), |a, &i| a + values[i])
    };
    Ok(ImageScore {
        score: sum / T::c(k as f64),
        k_used: k,
    })
}

pub fn image_score<T: Scalar>(
    scores: &PatchScores<T>,
    k: usize,
) -> Result<ImageScore<T>, ScoringError> {
    let probs = scores.probabilities.as_slice().expect("contiguous");
    top_k_mean(probs, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T> {
    /// `[image_h, image_w]`, in `[0, 1]`.
    pub values: Array2<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub sigma: f64,
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn bilinear_resize<T: Scalar>(grid: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (gh, gw) = grid.dim();
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|o| {
                let pos =
                    ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, T::c(pos - i0 as f64))
            })
            .collect()
    };
    let ys = axis(out_h, gh);
    let xs = axis(out_w, gw);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, wy) = ys[y];
        let (x0, x1, wx) = xs[x];
        let one = T::one();
        let top = grid[[y0, x0]] * (one - wx) + grid[[y0, x1]] * wx;
        let bottom = grid[[y1, x0]] * (one - wx) + grid[[y1, x1]] * wx;
        top * (one - wy) + bottom * wy
    })
}

fn gaussian_kernel<T: Scalar>(sigma: f64) -> Vec<T> {
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| T::c(w / total)).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur<T: Scalar>(img: &Array2<T>, sigma: f64) -> Array2<T> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel::<T>(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = img.dim();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel.iter().enumerate().fold(T::zero(), |acc, (j, &kv)| {
            acc + kv * img[[y, clampi(x as isize + j as isize - r, w)]]
        })
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel.iter().enumerate().fold(T::zero(), |acc, (j, &kv)| {
            acc + kv * horiz[[clampi(y as isize + j as isize - r, h), x]]
        })
    })
}

/// Patch probabilities upsampled to image resolution, optionally smoothed,
/// clamped to `[0, 1]`.
pub fn anomaly_map<T: Scalar>(
    scores: &PatchScores<T>,
    image_h: usize,
    image_w: usize,
    sigma: f64,
) -> Result<AnomalyMap<T>, ScoringError> {
    if image_h == 0 || image_w == 0 {
        return Err(ScoringError::EmptyImage {
            h: image_h,
            w: image_w,
        });
    }
    if sigma.is_nan() || sigma < 0.0 {
        return Err(ScoringError::Sigma(sigma));
    }
    let (gh, gw) = (scores.grid_h, scores.grid_w);
    if gh * gw != scores.len() || scores.is_empty() {
        return Err(ScoringError::GridMismatch {
            len: scores.len(),
            grid_h: gh,
            grid_w: gw,
        });
    }
    let grid = scores
        .probabilities
        .clone()
        .into_shape_with_order((gh, gw))
        .expect("length checked");
    let up = if (image_h, image_w) == (gh, gw) {
        grid
    } else {
        bilinear_resize(&grid, image_h, image_w)
    };
    let values = gaussian_blur(&up, sigma).mapv(|v| v.max(T::zero()).min(T::one()));
    Ok(AnomalyMap {
        values,
        grid_h: gh,
        grid_w: gw,
        sigma,
    })
}

/// Scores for one manifest entry.
#[derive(Clone, Debug)]
pub struct RecordScore<T> {
    pub path: String,
    pub class_name: String,
    pub label: Label,
    pub image_score: T,
    pub patch_scores: PatchScores<T>,
    pub map: Option<AnomalyMap<T>>,
    /// Ground-truth pixel mask, when the record carries one.
    pub pixel_mask: Option<Array2<u8>>,
    pub image_h: usize,
    pub image_w: usize,
}

pub(crate) fn check_geometry<T: Scalar>(
    model: &DiscriminatorModel<T>,
    rec: &LoadedRecord,
) -> Result<(), ScoringError> {
    let r = &rec.record;
    if (r.grid_h, r.grid_w, r.dim()) != (model.grid_h, model.grid_w, model.dim) {
        return Err(ScoringError::Geometry {
            path: rec.path.clone(),
            expected: format!("{}x{} dim {}", model.grid_h, model.grid_w, model.dim),
            found: format!("{}x{} dim {}", r.grid_h, r.grid_w, r.dim()),
        });
    }
    Ok(())
}

/// Scores already-loaded records in inference mode. `map_sigma` requests
/// anomaly maps at each record's image resolution.
pub fn score_records<T: Scalar>(
    model: &DiscriminatorModel<T>,
    records: &[LoadedRecord],
    top_k: TopK,
    map_sigma: Option<f64>,
) -> Result<Vec<RecordScore<T>>, ScoringError> {
    for rec in records {
        check_geometry(model, rec)?;
    }
    let k = top_k.resolve(model.n_patches())?;
    records
        .par_iter()
        .map(|rec| {
            let r = &rec.record;
            let features = r.features.mapv(|v| T::c(v as f64));
            let patch_scores = model.score(features.view())?;
            let image = image_score(&patch_scores, k)?;
            let map = match map_sigma {
                Some(sigma) => Some(anomaly_map(&patch_scores, r.image_h, r.image_w, sigma)?),
                None => None,
            };
            Ok(RecordScore {
                path: rec.entry.path.clone(),
                class_name: rec.entry.class_name.clone(),
                label: rec.entry.label,
                image_score: image.score,
                patch_scores,
                map,
                pixel_mask: r.pixel_mask.clone(),
                image_h: r.image_h,
                image_w: r.image_w,
            })
        })
        .collect()
}

/// Loads and scores every record of `split`, in manifest order.
pub fn score_dataset<T: Scalar>(
    model: &DiscriminatorModel<T>,
    manifest: &LoadedManifest,
    split: Split,
    top_k: TopK,
    map_sigma: Option<f64>,
) -> Result<Vec<RecordScore<T>>, ScoringError> {
    let records = manifest.load_split(split, None)?;
    score_records(model, &records, top_k, map_sigma)
}

/// Re-reduces stored patch probabilities with a different K.
pub fn rescore<T: Scalar>(scores: &[RecordScore<T>], top_k: TopK) -> Result<Vec<T>, ScoringError> {
    scores
        .iter()
        .map(|s| {
            let k = top_k.resolve(s.patch_scores.len())?;
            Ok(image_score(&s.patch_scores, k)?.score)
        })
        .collect()
}

/// One row of the scores CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub path: String,
    pub class: String,
    pub label: u8,
    pub image_score: f64,
}

pub fn score_rows<T: Scalar>(scores: &[RecordScore<T>]) -> Vec<ScoreRow> {
    scores
        .iter()
        .map(|s| ScoreRow {
            path: s.path.clone(),
            class: s.class_name.clone(),
            label: s.label.as_u8(),
            image_score: s.image_score.to_f64_lossless(),
        })
        .collect()
}

pub fn write_scores_csv(rows: &[ScoreRow], path: &Path) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>, ScoringError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .map_err(|e| io_err(path, e))
}

/// File stem for a record's exported map: the manifest path with
/// separators flattened and the extension dropped.
pub fn map_stem(record_path: &str) -> String {
    let p = Path::new(record_path);
    let stem = p.with_extension("");
    stem.to_string_lossy()
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect()
}

pub const MAP_MAGIC: [u8; 4] = *b"GADM";

/// Raw map dump: magic "GADM" | u32 height | u32 width | f32 values
/// row-major, little-endian.
pub fn encode_map_raw<T: Scalar>(map: &AnomalyMap<T>) -> Vec<u8> {
    let (h, w) = map.values.dim();
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(&MAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in map.values.iter() {
        out.extend_from_slice(&(v.to_f64_lossless() as f32).to_le_bytes());
    }
    out
}

pub fn read_map_raw(path: &Path) -> Result<Array2<f32>, ScoringError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = || ScoringError::MalformedMap(path.to_path_buf());
    if bytes.len() < 12 || bytes[..4] != MAP_MAGIC {
        return Err(bad());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if (body.len() as u64) != 4 * h as u64 * w as u64 {
        return Err(bad());
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((h, w), vals).map_err(|_| bad())
}

/// Writes `<stem>.png` (16-bit grayscale, `round(65535 * p)`) and
/// `<stem>.f32` (raw dump) into `dir`.
pub fn export_map<T: Scalar>(
    map: &AnomalyMap<T>,
    dir: &Path,
    stem: &str,
) -> Result<(), ScoringError> {
    let (h, w) = map.values.dim();
    let pixels: Vec<u16> = map
        .values
        .iter()
        .map(|&v| (v.to_f64_lossless() * 65535.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let png_path = dir.join(format!("{stem}.png"));
    let img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer sized to map");
    img.save(&png_path).map_err(|e| io_err(&png_path, e))?;
    let raw_path = dir.join(format!("{stem}.f32"));
    let mut f = fs::File::create(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    f.write_all(&encode_map_raw(map))
        .map_err(|e| io_err(&raw_path, e))
}
