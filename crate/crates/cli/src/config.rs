//! Run configuration: mode preset, then config file, then flags.

use std::path::Path;

use clap::ValueEnum;
use gad_core::discriminator::DiscriminatorHyper;
use gad_core::optim::AdamWConfig;
use gad_core::sag::{DistortionConfig, Strategy};
use gad_core::scoring::TopK;
use gad_core::trainer::{EvalCadence, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Semantic,
    Industrial,
    Logical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Fully resolved settings, echoed into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub top_k: TopK,
    pub epsilon: f64,
    pub strategies: Vec<Strategy>,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule_floor: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub residual: bool,
    pub eval_cadence: EvalCadence,
    pub sigma: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl RunConfig {
    pub fn preset(mode: Mode) -> Self {
        let (top_k, strategies, epochs, eval_cadence) = match mode {
            Mode::Semantic => (
                TopK::All,
                vec![Strategy::NoiseAll],
                20,
                EvalCadence::EveryImages(250),
            ),
            Mode::Industrial => (
                TopK::Count(10),
                vec![Strategy::NoiseRandom],
                160,
                EvalCadence::PerEpoch,
            ),
            Mode::Logical => (
                TopK::Count(10),
                vec![Strategy::NoiseRandom, Strategy::AttnShuffle],
                160,
                EvalCadence::PerEpoch,
            ),
        };
        let train = TrainConfig::default();
        let hyper = DiscriminatorHyper::default();
        Self {
            mode,
            top_k,
            epsilon: DistortionConfig::default().epsilon,
            strategies,
            epochs,
            max_steps: None,
            batch_size: train.batch_size,
            lr: train.lr0,
            schedule_floor: train.schedule_floor,
            weight_decay: train.adamw.weight_decay,
            hidden: hyper.hidden,
            heads: hyper.n_heads,
            dropout: hyper.dropout,
            residual: hyper.residual,
            eval_cadence,
            sigma: 4.0,
            precision: Precision::F32,
            seed: 0,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr,
            schedule_floor: self.schedule_floor,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            eval_cadence: self.eval_cadence,
            eval_top_k: self.top_k,
            distortion: DistortionConfig {
                epsilon: self.epsilon,
                strategies: self.strategies.clone(),
                ..DistortionConfig::default()
            },
            hyper: DiscriminatorHyper {
                n_heads: self.heads,
                hidden: self.hidden,
                dropout: self.dropout,
                dropout_placement: DiscriminatorHyper::default().dropout_placement,
                residual: self.residual,
            },
            seed: self.seed,
        }
    }
}

/// Partial settings from a config file or the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub top_k: Option<TopK>,
    pub epsilon: Option<f64>,
    pub strategies: Option<Vec<Strategy>>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub schedule_floor: Option<f64>,
    pub weight_decay: Option<f64>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub residual: Option<bool>,
    pub eval_cadence: Option<EvalCadence>,
    pub sigma: Option<f64>,
    pub precision: Option<Precision>,
    pub seed: Option<u64>,
}

pub fn load_overrides(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

macro_rules! apply {
    ($cfg:ident, $src:ident, $origin:expr, $preset:ident, [$($field:ident),*], [$($plain:ident),*]) => {
        $(
            if let Some(v) = $src.$field.clone() {
                if v != $preset.$field {
                    log::info!(
                        "{} sets {} = {:?}, overriding the {:?} preset ({:?})",
                        $origin, stringify!($field), v, $cfg.mode, $preset.$field
                    );
                }
                $cfg.$field = v;
            }
        )*
        $(
            if let Some(v) = $src.$plain.clone() {
                $cfg.$plain = v;
            }
        )*
    };
}

/// Resolves the mode preset and applies the file, then the flags.
pub fn resolve(file: Option<&Overrides>, flags: &Overrides) -> Result<RunConfig, CliError> {
    let mode = flags
        .mode
        .or(file.and_then(|f| f.mode))
        .unwrap_or(Mode::Industrial);
    let preset = RunConfig::preset(mode);
    let mut cfg = preset.clone();
    for (origin, src) in [("config file", file), ("command line", Some(flags))] {
        let Some(src) = src else { continue };
        apply!(
            cfg,
            src,
            origin,
            preset,
            [top_k, strategies, epochs, eval_cadence],
            [
                epsilon,
                batch_size,
                lr,
                schedule_floor,
                weight_decay,
                hidden,
                heads,
                dropout,
                residual,
                sigma,
                precision,
                seed
            ]
        );
        if let Some(m) = src.max_steps {
            cfg.max_steps = Some(m);
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.strategies.is_empty() {
        return Err(CliError::Config("at least one strategy is required".into()));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(CliError::Config(format!(
            "sigma must be non-negative, got {}",
            cfg.sigma
        )));
    }
    if cfg.top_k == TopK::Count(0) {
        return Err(CliError::Usage("top-k must be at least 1".into()));
    }
    if cfg.hidden == 0 || cfg.heads == 0 {
        return Err(CliError::Config("hidden and heads must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(CliError::Config(format!(
            "dropout must be in [0, 1), got {}",
            cfg.dropout
        )));
    }
    cfg.train_config()
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))
}
