//! Training loop.
//!
//! Every step takes a batch of clean training records and, for each one,
//! builds two supervised examples: the clean features with an all-false
//! mask and a distorted copy with its distortion mask. The mean patch-wise
//! cross-entropy over the batch is minimised with AdamW under a cosine
//! schedule.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{
    backward, forward_batch, save_checkpoint, CheckpointError, DiscriminatorHyper,
    DiscriminatorModel, ModelError,
};
use crate::evaluation::metrics::compute_auroc;
use crate::feature_store::{LoadedManifest, LoadedRecord, ManifestError, Split};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState, OptimError};
use crate::rng::PortableRng;
use crate::sag::{distort, DistortionConfig, DistortionError};
use crate::scalar::Scalar;
use crate::scoring::{score_records, ScoringError, TopK};

// Stream ids that keep the random sources independent for one seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_STEP: u64 = 2 << 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("{path}: geometry {found} differs from {expected}")]
    HeterogeneousGeometry {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter {tensor} became non-finite at step {step}")]
    NonFiniteParameter { step: usize, tensor: &'static str },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// When to run the test-split evaluation during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    Never,
    PerEpoch,
    EveryImages(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub schedule_floor: f64,
    pub adamw: AdamWConfig,
    /// Clean records per step; each contributes two examples.
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimisation steps (the schedule spans the capped run).
    pub max_steps: Option<usize>,
    pub eval_cadence: EvalCadence,
    /// Reduction used by the in-training evaluation.
    pub eval_top_k: TopK,
    pub distortion: DistortionConfig,
    pub hyper: DiscriminatorHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            schedule_floor: 0.2,
            adamw: AdamWConfig::default(),
            batch_size: 8,
            epochs: 160,
            max_steps: None,
            eval_cadence: EvalCadence::PerEpoch,
            eval_top_k: TopK::Count(10),
            distortion: DistortionConfig::default(),
            hyper: DiscriminatorHyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(TrainError::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..=1.0).contains(&self.schedule_floor) {
            return Err(TrainError::Config(format!(
                "schedule floor must be in [0, 1], got {}",
                self.schedule_floor
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(TrainError::Config("max_steps must be at least 1".into()));
        }
        if let EvalCadence::EveryImages(0) = self.eval_cadence {
            return Err(TrainError::Config(
                "evaluation interval must be positive".into(),
            ));
        }
        self.distortion.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub images_seen: usize,
    pub image_auroc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the best evaluation, if any ran.
    pub best_eval: Option<usize>,
    /// Test AUROC of the final model, when test labels allow it.
    pub final_image_auroc: Option<f64>,
    pub epoch_seconds: Vec<f64>,
    pub total_steps: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EvalRecord> {
        self.best_eval.map(|i| &self.evals[i])
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: DiscriminatorModel<T>,
    /// Model with the best in-training test AUROC.
    pub best_model: Option<DiscriminatorModel<T>>,
    pub history: TrainHistory,
}

/// Origin of a supervised example, reported to [`TrainObserver`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExampleSource {
    Clean,
    Distorted,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Called for every supervised example with its mask population.
    fn on_example(&mut self, _source: ExampleSource, _mask_sum: usize, _n_patches: usize) {}

    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_eval(&mut self, _record: &EvalRecord) {}
}

/// Writes the progress log as JSON lines.
pub struct JsonLinesProgress<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesProgress<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }
}

impl<W: Write> TrainObserver for JsonLinesProgress<W> {
    fn on_step(&mut self, r: &StepRecord) {
        let line = serde_json::json!({"step": r.step, "lr": r.lr, "loss": r.loss});
        let _ = writeln!(self.out, "{line}");
    }

    fn on_eval(&mut self, r: &EvalRecord) {
        let line = serde_json::json!({
            "step": r.step, "epoch": r.epoch, "images_seen": r.images_seen,
            "image_auroc": r.image_auroc,
        });
        let _ = writeln!(self.out, "{line}");
    }
}

struct NoObserver;
impl TrainObserver for NoObserver {}

/// Fans events out to several observers.
pub struct Observers<'a>(pub Vec<&'a mut dyn TrainObserver>);

impl TrainObserver for Observers<'_> {
    fn on_example(&mut self, s: ExampleSource, m: usize, n: usize) {
        self.0.iter_mut().for_each(|o| o.on_example(s, m, n));
    }

    fn on_step(&mut self, r: &StepRecord) {
        self.0.iter_mut().for_each(|o| o.on_step(r));
    }

    fn on_eval(&mut self, r: &EvalRecord) {
        self.0.iter_mut().for_each(|o| o.on_eval(r));
    }
}

fn geometry(r: &LoadedRecord) -> (usize, usize, usize) {
    (r.record.grid_h, r.record.grid_w, r.record.dim())
}

fn check_uniform(records: &[&LoadedRecord], g: (usize, usize, usize)) -> Result<(), TrainError> {
    for r in records {
        if geometry(r) != g {
            let (h, w, d) = geometry(r);
            return Err(TrainError::HeterogeneousGeometry {
                path: r.path.clone(),
                expected: format!("{}x{} dim {}", g.0, g.1, g.2),
                found: format!("{h}x{w} dim {d}"),
            });
        }
    }
    Ok(())
}

/// Test-split AUROC, or `None` when the labels do not cover both classes.
fn evaluate<T: Scalar>(
    model: &DiscriminatorModel<T>,
    test: &[LoadedRecord],
    top_k: TopK,
) -> Result<Option<f64>, TrainError> {
    let labelled: Vec<LoadedRecord> = test
        .iter()
        .filter(|r| r.entry.label.as_binary().is_some())
        .cloned()
        .collect();
    let has_both = labelled
        .iter()
        .any(|r| r.entry.label.as_binary() == Some(true))
        && labelled
            .iter()
            .any(|r| r.entry.label.as_binary() == Some(false));
    if !has_both {
        return Ok(None);
    }
    let scores = score_records(model, &labelled, top_k, None)?;
    let s: Vec<T> = scores.iter().map(|s| s.image_score).collect();
    let l: Vec<bool> = scores
        .iter()
        .map(|s| s.label.as_binary().unwrap_or(false))
        .collect();
    Ok(Some(compute_auroc(&s, &l).expect("both classes present")))
}

/// Trains on already-loaded records. `test` may be empty.
pub fn train_records<T: Scalar>(
    train: &[LoadedRecord],
    test: &[LoadedRecord],
    config: &TrainConfig,
    observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut no_observer = NoObserver;
    let observer: &mut dyn TrainObserver = match observer {
        Some(o) => o,
        None => &mut no_observer,
    };
    let g = geometry(&train[0]);
    check_uniform(&train.iter().collect::<Vec<_>>(), g)?;
    check_uniform(&test.iter().collect::<Vec<_>>(), g)?;
    let (grid_h, grid_w, dim) = g;
    let n_patches = grid_h * grid_w;

    let features: Vec<Array2<T>> = train
        .iter()
        .map(|r| r.record.features.mapv(|v| T::c(v as f64)))
        .collect();

    let mut model = DiscriminatorModel::<T>::init(
        dim,
        grid_h,
        grid_w,
        config.hyper,
        &mut PortableRng::with_stream(config.seed, STREAM_INIT),
    )?;
    let mut opt = AdamWState::new(&model.params);

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let planned = config.epochs * steps_per_epoch;
    let total_steps = config.max_steps.map_or(planned, |m| m.min(planned));
    let schedule_span = total_steps.saturating_sub(1).max(1);

    let mut history = TrainHistory {
        total_steps,
        ..Default::default()
    };
    let mut best_model = None;
    let mut best_auroc = f64::NEG_INFINITY;
    let mut step = 0usize;
    let mut images_seen = 0usize;

    let mut run_eval = |model: &DiscriminatorModel<T>,
                        history: &mut TrainHistory,
                        observer: &mut dyn TrainObserver,
                        best_model: &mut Option<DiscriminatorModel<T>>,
                        step: usize,
                        epoch: usize,
                        images_seen: usize|
     -> Result<(), TrainError> {
        if let Some(auroc) = evaluate(model, test, config.eval_top_k)? {
            let rec = EvalRecord {
                step,
                epoch,
                images_seen,
                image_auroc: auroc,
            };
            observer.on_eval(&rec);
            history.evals.push(rec);
            if auroc > best_auroc {
                best_auroc = auroc;
                history.best_eval = Some(history.evals.len() - 1);
                *best_model = Some(model.clone());
            }
        }
        Ok(())
    };

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        PortableRng::with_stream(config.seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);

        for chunk in order.chunks(config.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let lr = cosine_lr(step, schedule_span, config.lr0, config.schedule_floor)?;
            let mut step_rng = PortableRng::with_stream(config.seed, STREAM_STEP + step as u64);
            let distort_seed = step_rng.next_u64();

            let distorted = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = PortableRng::with_stream(distort_seed, i as u64);
                    distort(
                        features[i].view(),
                        train[i].record.attention.view(),
                        &config.distortion,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;

            let clean_mask = vec![false; n_patches];
            let mut inputs: Vec<ArrayView2<T>> = Vec::with_capacity(2 * chunk.len());
            let mut masks: Vec<&[bool]> = Vec::with_capacity(2 * chunk.len());
            for (&i, d) in chunk.iter().zip(&distorted) {
                inputs.push(features[i].view());
                masks.push(&clean_mask);
                observer.on_example(ExampleSource::Clean, 0, n_patches);
                inputs.push(d.features.view());
                masks.push(&d.mask);
                observer.on_example(ExampleSource::Distorted, d.n_distorted(), n_patches);
            }

            let (_, cache) = forward_batch(&model, &inputs, true, Some(&mut step_rng))?;
            let (loss, grads) = backward(&model, &cache, &masks, T::one(), false)?;
            adamw_step(
                &mut model.params,
                &grads.params,
                &mut opt,
                lr,
                &config.adamw,
            )?;
            if let Some(tensor) = model.params.first_non_finite() {
                return Err(TrainError::NonFiniteParameter { step, tensor });
            }

            let rec = StepRecord {
                step,
                lr,
                loss: loss.to_f64_lossless(),
            };
            observer.on_step(&rec);
            history.steps.push(rec);
            step += 1;

            let before = images_seen;
            images_seen += chunk.len();
            if let EvalCadence::EveryImages(every) = config.eval_cadence {
                if images_seen / every > before / every {
                    run_eval(
                        &model,
                        &mut history,
                        observer,
                        &mut best_model,
                        step,
                        epoch,
                        images_seen,
                    )?;
                }
            }
        }
        if config.eval_cadence == EvalCadence::PerEpoch {
            run_eval(
                &model,
                &mut history,
                observer,
                &mut best_model,
                step,
                epoch,
                images_seen,
            )?;
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    history.final_image_auroc = evaluate(&model, test, config.eval_top_k)?;
    Ok(TrainOutcome {
        model,
        best_model,
        history,
    })
}

/// Trains on the manifest's train split, evaluating on its test split.
pub fn train<T: Scalar>(
    manifest: &LoadedManifest,
    config: &TrainConfig,
    observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainOutcome<T>, TrainError> {
    let train_set = manifest.load_split(Split::Train, None)?;
    let test_set = if config.eval_cadence == EvalCadence::Never {
        Vec::new()
    } else {
        manifest.load_split(Split::Test, None)?
    };
    train_records(&train_set, &test_set, config, observer)
}

/// Paths written by [`save_outcome`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedRun {
    pub final_checkpoint: PathBuf,
    pub final_id: String,
    pub best_checkpoint: Option<PathBuf>,
    pub best_id: Option<String>,
    pub history: PathBuf,
}

/// Writes `final.ckpt`, `best.ckpt` (when an evaluation ran) and
/// `history.json` into `dir`.
pub fn save_outcome<T: Scalar>(
    outcome: &TrainOutcome<T>,
    dir: &Path,
) -> Result<SavedRun, TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let final_checkpoint = dir.join("final.ckpt");
    let final_id = save_checkpoint(&outcome.model, &final_checkpoint)?;
    let (best_checkpoint, best_id) = match &outcome.best_model {
        Some(m) => {
            let p = dir.join("best.ckpt");
            let id = save_checkpoint(m, &p)?;
            (Some(p), Some(id))
        }
        None => (None, None),
    };
    let history = dir.join("history.json");
    let text = serde_json::to_string_pretty(&outcome.history).expect("history serialises");
    std::fs::write(&history, text).map_err(|source| TrainError::Io {
        path: history.clone(),
        source,
    })?;
    Ok(SavedRun {
        final_checkpoint,
        final_id,
        best_checkpoint,
        best_id,
        history,
    })
}
