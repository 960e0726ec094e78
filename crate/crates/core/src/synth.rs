//! Deterministic synthetic benchmark with a ground-truth oracle.
//!
//! Every grid cell `(r, c)` owns a fixed anchor vector drawn once from a unit
//! Gaussian. Normal records sample each cell as `anchor + 0.1 * N(0, I)`.
//! Anomalous test records additionally shift a contiguous block of
//! `ceil(extent * N)` cells by `delta` along one unit direction fixed for the
//! whole dataset; their pixel masks mark that block, each patch rendered as a
//! `patch_px x patch_px` square.
//!
//! The anchors are written next to the records (`anchors.gada`):
//!
//! ```text
//! magic "GADA" | u32 version = 1 | u16 grid_h | u16 grid_w | u32 dim
//! | f32 anomaly_extent | f32 anchors[grid_h*grid_w][dim]     (little-endian)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{
    save_manifest, write_record, DatasetManifest, FeatureRecord, FormatError, Label,
    LoadedManifest, ManifestEntry, ManifestError, Split,
};
use crate::rng::PortableRng;
use crate::scoring::top_k_mean;

pub const ANCHORS_FILE: &str = "anchors.gada";
pub const ANCHORS_MAGIC: [u8; 4] = *b"GADA";
const ANCHORS_HEADER: usize = 20;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("anchors file {0} is missing")]
    MissingAnchors(PathBuf),
    #[error("malformed anchors file {path}: {reason}")]
    MalformedAnchors { path: PathBuf, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Shift magnitude applied to the anomalous block.
    pub anomaly_shift: f64,
    /// Fraction of patches in the anomalous block.
    pub anomaly_extent: f64,
    pub noise_scale: f64,
    pub patch_px: usize,
    pub class_name: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            dim: 64,
            n_heads: 4,
            n_train: 200,
            n_test_normal: 100,
            n_test_anomalous: 100,
            anomaly_shift: 2.0,
            anomaly_extent: 0.25,
            noise_scale: 0.1,
            patch_px: 14,
            class_name: "synthetic".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("dim", self.dim),
            ("n_heads", self.n_heads),
            ("n_train", self.n_train),
            ("n_test_normal", self.n_test_normal),
            ("n_test_anomalous", self.n_test_anomalous),
            ("patch_px", self.patch_px),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SynthError::Config(format!("{name} must be at least 1")));
        }
        // A zero shift is allowed: it is the chance-level control.
        if !(self.anomaly_shift >= 0.0 && self.anomaly_shift.is_finite()) {
            return Err(SynthError::Config(format!(
                "anomaly_shift must be finite and non-negative, got {}",
                self.anomaly_shift
            )));
        }
        if !(self.anomaly_extent > 0.0 && self.anomaly_extent <= 1.0) {
            return Err(SynthError::Config(format!(
                "anomaly_extent must be in (0, 1], got {}",
                self.anomaly_extent
            )));
        }
        if self.grid_h > u16::MAX as usize || self.grid_w > u16::MAX as usize {
            return Err(SynthError::Config(
                "grid exceeds 65535 cells per side".into(),
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Number of cells in the anomalous block.
    pub fn block_cells(&self) -> usize {
        block_cells(self.anomaly_extent, self.n_patches())
    }
}

pub fn block_cells(extent: f64, n: usize) -> usize {
    ((extent * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Cells of a contiguous block of `m` cells at a random position.
fn random_block(grid_h: usize, grid_w: usize, m: usize, rng: &mut PortableRng) -> Vec<usize> {
    let side = (m as f64).sqrt().ceil() as usize;
    let width = side.max(m.div_ceil(grid_h)).min(grid_w);
    let rows = m.div_ceil(width);
    let r0 = rng.below_usize(grid_h - rows + 1);
    let c0 = rng.below_usize(grid_w - width + 1);
    (0..m)
        .map(|i| (r0 + i / width) * grid_w + c0 + i % width)
        .collect()
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    anchors: Array2<f32>,
    direction: Vec<f64>,
}

impl Generator<'_> {
    fn attention(&self, rng: &mut PortableRng) -> Array2<f32> {
        let n = self.cfg.n_patches();
        let base = 1.0 / n as f64;
        let mut att = Array2::<f32>::zeros((self.cfg.n_heads, n));
        for mut row in att.outer_iter_mut() {
            let raw: Vec<f64> = (0..n).map(|_| base + 0.5 * base * rng.uniform()).collect();
            let total: f64 = raw.iter().sum();
            for (a, r) in row.iter_mut().zip(raw) {
                *a = (r / total) as f32;
            }
        }
        att
    }

    fn record(&self, anomalous: bool, rng: &mut PortableRng) -> FeatureRecord {
        let cfg = self.cfg;
        let n = cfg.n_patches();
        let mut features = Array2::<f32>::zeros((n, cfg.dim));
        for ((i, j), v) in features.indexed_iter_mut() {
            *v = (self.anchors[[i, j]] as f64 + cfg.noise_scale * rng.gaussian()) as f32;
        }
        let attention = self.attention(rng);
        let (image_h, image_w) = (cfg.grid_h * cfg.patch_px, cfg.grid_w * cfg.patch_px);
        let pixel_mask = anomalous.then(|| {
            let cells = random_block(cfg.grid_h, cfg.grid_w, cfg.block_cells(), rng);
            let mut mask = Array2::<u8>::zeros((image_h, image_w));
            for &cell in &cells {
                for (j, v) in features.row_mut(cell).iter_mut().enumerate() {
                    *v = (*v as f64 + cfg.anomaly_shift * self.direction[j]) as f32;
                }
                let (r, c) = (cell / cfg.grid_w, cell % cfg.grid_w);
                let p = cfg.patch_px;
                mask.slice_mut(ndarray::s![r * p..(r + 1) * p, c * p..(c + 1) * p])
                    .fill(1);
            }
            mask
        });
        FeatureRecord {
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            features,
            attention,
            label: if anomalous {
                Label::Anomalous
            } else {
                Label::Normal
            },
            image_h,
            image_w,
            pixel_mask,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_anchors(anchors: &Array2<f32>, grid_h: usize, grid_w: usize, extent: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(ANCHORS_HEADER + 4 * anchors.len());
    out.extend_from_slice(&ANCHORS_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(grid_h as u16).to_le_bytes());
    out.extend_from_slice(&(grid_w as u16).to_le_bytes());
    out.extend_from_slice(&(anchors.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&(extent as f32).to_le_bytes());
    for v in anchors.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Anchors and the anomaly extent stored with them.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Array2<f32>,
    pub anomaly_extent: f64,
}

pub fn read_anchors(path: &Path) -> Result<Anchors, SynthError> {
    if !path.is_file() {
        return Err(SynthError::MissingAnchors(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io(path))?;
    let bad = |reason: &str| SynthError::MalformedAnchors {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < ANCHORS_HEADER || bytes[..4] != ANCHORS_MAGIC {
        return Err(bad("bad magic or short header"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != 1 {
        return Err(bad("unsupported version"));
    }
    let grid_h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let grid_w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let extent = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
    let body = &bytes[ANCHORS_HEADER..];
    if body.len() as u64 != 4 * (grid_h * grid_w) as u64 * dim as u64 {
        return Err(bad("payload length does not match header"));
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Anchors {
        grid_h,
        grid_w,
        values: Array2::from_shape_vec((grid_h * grid_w, dim), vals).map_err(|_| bad("shape"))?,
        anomaly_extent: extent,
    })
}

/// Writes the dataset (records, anchors, `manifest.json`) under `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<LoadedManifest, SynthError> {
    config.validate()?;
    for sub in ["train", "test"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(io(out_dir))?;
    }
    let mut rng = PortableRng::with_stream(config.seed, 0);
    let n = config.n_patches();
    let anchors = Array2::from_shape_simple_fn((n, config.dim), || rng.gaussian() as f32);
    let raw: Vec<f64> = (0..config.dim).map(|_| rng.gaussian()).collect();
    let norm = raw
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let direction = raw.iter().map(|v| v / norm).collect();
    let gen = Generator {
        cfg: config,
        anchors,
        direction,
    };

    let anchors_path = out_dir.join(ANCHORS_FILE);
    fs::write(
        &anchors_path,
        encode_anchors(
            &gen.anchors,
            config.grid_h,
            config.grid_w,
            config.anomaly_extent,
        ),
    )
    .map_err(io(&anchors_path))?;

    let plan = [
        (Split::Train, false, config.n_train, "train/normal"),
        (Split::Test, false, config.n_test_normal, "test/normal"),
        (Split::Test, true, config.n_test_anomalous, "test/anomalous"),
    ];
    let mut entries = Vec::new();
    let mut stream = 1u64;
    for (split, anomalous, count, prefix) in plan {
        for i in 0..count {
            let mut r = PortableRng::with_stream(config.seed, stream);
            stream += 1;
            let record = gen.record(anomalous, &mut r);
            let rel = format!("{prefix}_{i:05}.gadf");
            write_record(&record, &out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                split,
                class_name: config.class_name.clone(),
                label: record.label,
            });
        }
    }
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        entries,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(LoadedManifest::from_manifest(manifest, out_dir)?)
}

/// Squared distance of every patch to its cell's anchor.
pub fn patch_distances(record: &FeatureRecord, anchors: &Anchors) -> Vec<f64> {
    record
        .features
        .outer_iter()
        .zip(anchors.values.outer_iter())
        .map(|(f, a)| {
            f.iter()
                .zip(a.iter())
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum()
        })
        .collect()
}

/// Oracle image score: mean of the top `ceil(extent * N)` patch distances.
pub fn oracle_score(record: &FeatureRecord, anchors: &Anchors) -> f64 {
    let d = patch_distances(record, anchors);
    let k = block_cells(anchors.anomaly_extent, d.len());
    top_k_mean(&d, k).expect("k within range").score
}

/// Oracle scores for every record of `split`, in manifest order.
pub fn oracle_scores(manifest: &LoadedManifest, split: Split) -> Result<Vec<f64>, SynthError> {
    let anchors = read_anchors(&manifest.root.join(ANCHORS_FILE))?;
    manifest
        .iterate_split(split, None)
        .map(|r| Ok(oracle_score(&r?.record, &anchors)))
        .collect()
}
