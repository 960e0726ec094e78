//! Metrics and evaluation protocols: per-class reports, few-shot runs and
//! hyper-parameter sweeps.

pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    compute_auroc, pixel_auroc, pixel_auroc_per_image, pixel_pairs, MetricError, PixelPair,
};

use crate::feature_store::{Label, LoadedManifest, ManifestEntry, ManifestError, Split};
use crate::rng::PortableRng;
use crate::sag::Strategy;
use crate::scalar::Scalar;
use crate::scoring::{rescore, score_dataset, RecordScore, ScoreRow, ScoringError, TopK};
use crate::trainer::{train, EvalCadence, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {class}: {source}")]
    Class {
        class: String,
        #[source]
        source: MetricError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no labelled scores to evaluate")]
    NoLabelledScores,
    #[error("class {class} has {available} training records, {requested} requested")]
    InsufficientShots {
        class: String,
        available: usize,
        requested: usize,
    },
    #[error("invalid value {value:?} for sweep axis {axis}: {reason}")]
    InvalidAxisValue {
        axis: SweepAxis,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Settings echoed into reports so a number can be traced to its run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub top_k: Option<String>,
    pub epsilon: Option<f64>,
    pub strategies: Vec<String>,
    pub sigma: Option<f64>,
    pub checkpoint_id: Option<String>,
    /// `best` or `final`.
    pub checkpoint_kind: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_image_auroc: BTreeMap<String, f64>,
    /// Unweighted mean over classes.
    pub mean_image_auroc: f64,
    /// AUROC over all labelled images regardless of class.
    pub pooled_image_auroc: Option<f64>,
    pub per_class_pixel_auroc: Option<BTreeMap<String, f64>>,
    pub mean_pixel_auroc: Option<f64>,
    /// Pixels pooled over every image of the split.
    pub pooled_pixel_auroc: Option<f64>,
    /// Mean of per-image pixel AUROCs; only present when requested.
    pub per_image_pixel_auroc: Option<f64>,
    pub n_images: usize,
    pub config: ConfigEcho,
}

/// One image's map and ground truth for pixel-level evaluation.
#[derive(Clone, Debug)]
pub struct PixelSample<T> {
    pub class_name: String,
    pub label: Label,
    pub map: Array2<T>,
    pub mask: Option<Array2<u8>>,
}

impl<T: Clone> PixelSample<T> {
    pub fn from_scores(scores: &[RecordScore<T>]) -> Vec<Self> {
        scores
            .iter()
            .filter_map(|s| {
                s.map.as_ref().map(|m| PixelSample {
                    class_name: s.class_name.clone(),
                    label: s.label,
                    map: m.values.clone(),
                    mask: s.pixel_mask.clone(),
                })
            })
            .collect()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Pixel pairs usable for scoring: anomalous images without a mask carry
/// no pixel ground truth and are left out.
fn usable_pairs<'a, T>(samples: &[&'a PixelSample<T>]) -> Vec<PixelPair<'a, T>> {
    samples
        .iter()
        .filter(|s| s.mask.is_some() || s.label == Label::Normal)
        .map(|s| PixelPair {
            map: &s.map,
            mask: s.mask.as_ref(),
        })
        .collect()
}

/// Builds the report from image scores and, optionally, pixel samples.
/// Unlabelled rows are ignored.
pub fn build_report<T: Scalar>(
    rows: &[ScoreRow],
    pixels: Option<&[PixelSample<T>]>,
    per_image_pixel: bool,
    config: ConfigEcho,
) -> Result<EvalReport, EvalError> {
    let labelled: Vec<&ScoreRow> = rows.iter().filter(|r| r.label <= 1).collect();
    if labelled.is_empty() {
        return Err(EvalError::NoLabelledScores);
    }
    let mut by_class: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in &labelled {
        let e = by_class.entry(r.class.as_str()).or_default();
        e.0.push(r.image_score);
        e.1.push(r.label == 1);
    }
    let mut per_class = BTreeMap::new();
    for (class, (s, l)) in &by_class {
        let a = compute_auroc(s, l).map_err(|source| EvalError::Class {
            class: class.to_string(),
            source,
        })?;
        per_class.insert(class.to_string(), a);
    }
    let mean_image = mean(per_class.values().copied()).expect("at least one class");
    let all_s: Vec<f64> = labelled.iter().map(|r| r.image_score).collect();
    let all_l: Vec<bool> = labelled.iter().map(|r| r.label == 1).collect();
    let pooled_image = compute_auroc(&all_s, &all_l).ok();

    let mut report = EvalReport {
        per_class_image_auroc: per_class,
        mean_image_auroc: mean_image,
        pooled_image_auroc: pooled_image,
        per_class_pixel_auroc: None,
        mean_pixel_auroc: None,
        pooled_pixel_auroc: None,
        per_image_pixel_auroc: None,
        n_images: labelled.len(),
        config,
    };

    if let Some(samples) = pixels {
        let all: Vec<&PixelSample<T>> = samples.iter().collect();
        let mut classes: BTreeMap<&str, Vec<&PixelSample<T>>> = BTreeMap::new();
        for s in &all {
            classes.entry(s.class_name.as_str()).or_default().push(s);
        }
        let mut per_class_px = BTreeMap::new();
        for (class, group) in &classes {
            match pixel_auroc(&usable_pairs(group)) {
                Ok(a) => {
                    per_class_px.insert(class.to_string(), a);
                }
                // A class without defective pixels has no pixel AUROC.
                Err(MetricError::SingleClass { .. }) => {}
                Err(source) => {
                    return Err(EvalError::Class {
                        class: class.to_string(),
                        source,
                    })
                }
            }
        }
        report.mean_pixel_auroc = mean(per_class_px.values().copied());
        report.per_class_pixel_auroc = Some(per_class_px);
        let pairs = usable_pairs(&all);
        report.pooled_pixel_auroc = match pixel_auroc(&pairs) {
            Ok(a) => Some(a),
            Err(MetricError::SingleClass { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        if per_image_pixel {
            report.per_image_pixel_auroc = pixel_auroc_per_image(&pairs).ok();
        }
    }
    Ok(report)
}

/// Mean image AUROC over classes for already-computed image scores.
pub fn class_mean_auroc<T: Scalar>(
    scores: &[RecordScore<T>],
    image_scores: &[T],
) -> Result<f64, EvalError> {
    let rows: Vec<ScoreRow> = scores
        .iter()
        .zip(image_scores)
        .map(|(s, v)| ScoreRow {
            path: s.path.clone(),
            class: s.class_name.clone(),
            label: s.label.as_u8(),
            image_score: v.to_f64_lossless(),
        })
        .collect();
    Ok(build_report::<T>(&rows, None, false, ConfigEcho::default())?.mean_image_auroc)
}

/// Renders an AUROC as a percentage with one decimal, e.g. `87.0 ± 1.4`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Training entries of `class_name` subsampled without replacement.
/// The choice depends only on `(seed, shots)` and the manifest order.
pub fn few_shot_subsample(
    manifest: &LoadedManifest,
    class_name: &str,
    shots: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>, EvalError> {
    let pool: Vec<&ManifestEntry> = manifest
        .entries(Split::Train)
        .filter(|e| e.class_name == class_name)
        .collect();
    if shots == 0 || shots > pool.len() {
        return Err(EvalError::InsufficientShots {
            class: class_name.into(),
            available: pool.len(),
            requested: shots,
        });
    }
    let mut rng = PortableRng::with_stream(seed, shots as u64);
    let mut idx = rng.sample_indices(pool.len(), shots);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

fn with_train_entries(
    manifest: &LoadedManifest,
    class_name: &str,
    train: Vec<ManifestEntry>,
) -> LoadedManifest {
    let mut m = manifest.restrict_to_class(class_name);
    m.manifest.entries.retain(|e| e.split == Split::Test);
    m.manifest.entries.splice(0..0, train);
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub shots: usize,
    pub seeds: Vec<u64>,
    /// Class-mean image AUROC of each seed's run.
    pub aurocs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub formatted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub rows: Vec<FewShotRow>,
    pub top_k: String,
    pub base_seed: u64,
}

/// Trains from scratch on `shots` records per class for every seed and
/// evaluates the final model on the full test split of that class.
pub fn few_shot_eval<T: Scalar>(
    manifest: &LoadedManifest,
    shots: &[usize],
    n_seeds: usize,
    config: &TrainConfig,
    top_k: TopK,
) -> Result<FewShotReport, EvalError> {
    if n_seeds == 0 {
        return Err(EvalError::Config("at least one seed is required".into()));
    }
    let classes = manifest.classes();
    // Fail before any training when a class is too small.
    for class in &classes {
        let available = manifest
            .entries(Split::Train)
            .filter(|e| &e.class_name == class)
            .count();
        if let Some(&s) = shots.iter().find(|&&s| s == 0 || s > available) {
            return Err(EvalError::InsufficientShots {
                class: class.clone(),
                available,
                requested: s,
            });
        }
    }
    let mut rows = Vec::new();
    for &n_shots in shots {
        let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| config.seed + i).collect();
        let mut aurocs = Vec::new();
        for &seed in &seeds {
            let mut per_class = Vec::new();
            for class in &classes {
                let subset = few_shot_subsample(manifest, class, n_shots, seed)?;
                let m = with_train_entries(manifest, class, subset);
                let cfg = TrainConfig {
                    seed,
                    eval_cadence: EvalCadence::Never,
                    ..config.clone()
                };
                let outcome = train::<T>(&m, &cfg, None)?;
                let scores = score_dataset(&outcome.model, &m, Split::Test, top_k, None)?;
                let values: Vec<T> = scores.iter().map(|s| s.image_score).collect();
                per_class.push(class_mean_auroc(&scores, &values)?);
            }
            let a = mean(per_class).expect("manifest has a class");
            log::info!("few-shot shots={n_shots} seed={seed}: auroc {a:.4}");
            aurocs.push(a);
        }
        let (m, s) = mean_std(&aurocs);
        rows.push(FewShotRow {
            shots: n_shots,
            seeds,
            aurocs,
            mean: m,
            std: s,
            formatted: format_mean_std(m, s),
        });
    }
    Ok(FewShotReport {
        rows,
        top_k: top_k.to_string(),
        base_seed: config.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    Epsilon,
    Strategy,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "k",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Strategy => "strategy",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "k" | "top-k" | "top_k" => Ok(SweepAxis::K),
            "epsilon" | "eps" => Ok(SweepAxis::Epsilon),
            "strategy" | "strategies" => Ok(SweepAxis::Strategy),
            _ => Err(format!(
                "unknown sweep axis {s:?} (expected k, epsilon or strategy)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub image_auroc: f64,
    /// Wall-clock seconds spent on this value (training plus scoring).
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Seconds spent training the shared model of a K sweep.
    pub shared_train_seconds: Option<f64>,
}

enum AxisValue {
    K(TopK),
    Epsilon(f64),
    Strategy(Vec<Strategy>),
}

fn parse_axis_value(axis: SweepAxis, value: &str) -> Result<AxisValue, EvalError> {
    let invalid = |reason: String| EvalError::InvalidAxisValue {
        axis,
        value: value.into(),
        reason,
    };
    match axis {
        SweepAxis::K => value.parse().map(AxisValue::K).map_err(invalid),
        SweepAxis::Epsilon => match value.parse::<f64>() {
            Ok(e) if e > 0.0 && e.is_finite() => Ok(AxisValue::Epsilon(e)),
            Ok(_) => Err(invalid("epsilon must be positive and finite".into())),
            Err(e) => Err(invalid(e.to_string())),
        },
        SweepAxis::Strategy => value
            .split('+')
            .map(|s| s.parse::<Strategy>())
            .collect::<Result<Vec<_>, _>>()
            .map(AxisValue::Strategy)
            .map_err(|e| invalid(e.to_string())),
    }
}

/// Class-mean AUROC of a model trained per class with `config`.
fn train_and_score<T: Scalar>(
    manifest: &LoadedManifest,
    config: &TrainConfig,
    top_k: TopK,
) -> Result<Vec<RecordScore<T>>, EvalError> {
    let mut all = Vec::new();
    for class in manifest.classes() {
        let m = manifest.restrict_to_class(&class);
        let outcome = train::<T>(&m, config, None)?;
        all.extend(score_dataset(&outcome.model, &m, Split::Test, top_k, None)?);
    }
    Ok(all)
}

/// Evaluates `values` along `axis`. K values re-score one trained model;
/// epsilon and strategy values each train from scratch.
pub fn sweep<T: Scalar>(
    manifest: &LoadedManifest,
    axis: SweepAxis,
    values: &[String],
    config: &TrainConfig,
    top_k: TopK,
) -> Result<SweepTable, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Config("sweep needs at least one value".into()));
    }
    let parsed = values
        .iter()
        .map(|v| parse_axis_value(axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    let base = TrainConfig {
        eval_cadence: EvalCadence::Never,
        ..config.clone()
    };
    let mut rows = Vec::new();
    let mut shared_train_seconds = None;
    if axis == SweepAxis::K {
        let started = Instant::now();
        let scores = train_and_score::<T>(manifest, &base, TopK::All)?;
        shared_train_seconds = Some(started.elapsed().as_secs_f64());
        for (value, p) in values.iter().zip(parsed) {
            let AxisValue::K(k) = p else { unreachable!() };
            let started = Instant::now();
            let image = rescore(&scores, k)?;
            let auroc = class_mean_auroc(&scores, &image)?;
            rows.push(SweepRow {
                value: value.clone(),
                image_auroc: auroc,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    } else {
        for (value, p) in values.iter().zip(parsed) {
            let mut cfg = base.clone();
            match p {
                AxisValue::Epsilon(e) => cfg.distortion.epsilon = e,
                AxisValue::Strategy(s) => cfg.distortion.strategies = s,
                AxisValue::K(_) => unreachable!(),
            }
            let started = Instant::now();
            let scores = train_and_score::<T>(manifest, &cfg, top_k)?;
            let image: Vec<T> = scores.iter().map(|s| s.image_score).collect();
            let auroc = class_mean_auroc(&scores, &image)?;
            log::info!("sweep {axis}={value}: auroc {auroc:.4}");
            rows.push(SweepRow {
                value: value.clone(),
                image_auroc: auroc,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(SweepTable {
        axis,
        rows,
        shared_train_seconds,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([table.axis.to_string().as_str(), "image_auroc", "seconds"])
        .map_err(|e| io_err(path, e))?;
    for r in &table.rows {
        w.write_record([
            r.value.clone(),
            format!("{}", r.image_auroc),
            format!("{:.3}", r.seconds),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line plot of AUROC against the swept values, evenly spaced on x.
pub fn render_sweep_svg(table: &SweepTable) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let vals: Vec<f64> = table.rows.iter().map(|r| r.image_auroc).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min).min(0.5);
    let hi = 1.0f64;
    let y_of = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo).max(1e-9));
    let n = table.rows.len();
    let x_of = |i: usize| {
        if n == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (n - 1) as f64
        }
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle">image AUROC vs {}</text>"#,
        w / 2.0,
        table.axis
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/><line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + ph,
        top + ph,
        left + pw,
        top + ph
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            left,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let points: Vec<String> = vals
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_of(v)))
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    );
    for (i, r) in table.rows.iter().enumerate() {
        let (x, y) = (x_of(i), y_of(r.image_auroc));
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="#1f77b4"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top + ph + 18.0,
            escape_xml(&r.value)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        table.axis
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `sweep_<axis>.csv` and `sweep_<axis>.svg` into `dir`.
pub fn write_sweep(table: &SweepTable, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv = dir.join(format!("sweep_{}.csv", table.axis));
    let svg = dir.join(format!("sweep_{}.svg", table.axis));
    write_sweep_csv(table, &csv)?;
    std::fs::write(&svg, render_sweep_svg(table)).map_err(|e| io_err(&svg, e))?;
    Ok((csv, svg))
}
