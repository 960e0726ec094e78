//! `gad`: train, score and evaluate patch-level anomaly discriminators on
//! exported feature files.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gad_core::evaluation::SweepAxis;
use gad_core::feature_store::Split;
use gad_core::sag::Strategy;
use gad_core::scoring::TopK;
use gad_core::trainer::EvalCadence;

use config::{Mode, Overrides, Precision};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "gad",
    version,
    about = "Patch-level anomaly detection on backbone features"
)]
struct Cli {
    /// TOML file with run settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the resolved run configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a known anomaly oracle.
    Synth(SynthArgs),
    /// Train a discriminator on a manifest's train split.
    Train(TrainArgs),
    /// Score a split with a trained checkpoint.
    Score(ScoreArgs),
    /// Compute image and pixel AUROC from scores and maps.
    Eval(EvalArgs),
    /// Sweep K, epsilon or the distortion strategy.
    Sweep(SweepArgs),
    /// Few-shot protocol: subsampled training over several seeds.
    Fewshot(FewshotArgs),
}

fn parse_top_k(s: &str) -> Result<TopK, String> {
    s.parse()
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
        .map_err(|e: gad_core::sag::DistortionError| e.to_string())
}

fn parse_cadence(s: &str) -> Result<EvalCadence, String> {
    match s {
        "never" => Ok(EvalCadence::Never),
        "epoch" => Ok(EvalCadence::PerEpoch),
        n => match n.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!(
                "invalid evaluation cadence {n:?} (expected \"never\", \"epoch\" or a positive image count)"
            )),
            Ok(k) => Ok(EvalCadence::EveryImages(k)),
        },
    }
}

/// Settings shared by every command that trains or scores.
#[derive(Debug, Args, Default)]
struct RunFlags {
    /// Preset for K, strategies, epochs and evaluation cadence.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Number of top patches averaged into the image score, or "all".
    #[arg(long, value_parser = parse_top_k)]
    top_k: Option<TopK>,
    /// Standard deviation of the distortion noise.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated distortion strategies (noise_all, noise_random, attn_shuffle).
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimisation steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Add the attention input back before the layer norm.
    #[arg(long)]
    residual: bool,
    /// Evaluation cadence during training: "epoch", "never" or an image count.
    #[arg(long, value_parser = parse_cadence)]
    eval_every: Option<EvalCadence>,
    /// Gaussian smoothing of anomaly maps, in pixels.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            top_k: self.top_k,
            epsilon: self.epsilon,
            strategies: self.strategies.clone(),
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            hidden: self.hidden,
            heads: self.heads,
            dropout: self.dropout,
            residual: self.residual.then_some(true),
            eval_cadence: self.eval_every,
            sigma: self.sigma,
            precision: self.precision,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for records, anchors and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    grid_h: usize,
    #[arg(long, default_value_t = 8)]
    grid_w: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test_normal: usize,
    #[arg(long, default_value_t = 100)]
    n_test_anomalous: usize,
    /// Magnitude of the anomalous shift.
    #[arg(long, default_value_t = 2.0)]
    shift: f64,
    /// Fraction of patches in the anomalous block.
    #[arg(long, default_value_t = 0.25)]
    extent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints, history and the config echo.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Scores CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory for anomaly maps (16-bit PNG plus raw f32).
    #[arg(long)]
    maps_out: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Scores CSV written by `score`.
    #[arg(long)]
    scores: PathBuf,
    /// Manifest supplying labels and ground-truth masks.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of raw maps written by `score --maps-out`.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also report the mean of per-image pixel AUROCs.
    #[arg(long)]
    per_image_pixel: bool,
    /// Report file; the report is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values; strategies combine with '+'.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Debug, Args)]
struct FewshotArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    shots: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Report file; the report is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("GAD_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "GAD_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let file = cli
        .config
        .as_deref()
        .map(config::load_overrides)
        .transpose()?;
    let ctx = commands::Context {
        file,
        print_config: cli.print_config,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Score(a) => commands::score(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Sweep(a) => commands::sweep(&ctx, a),
        Command::Fewshot(a) => commands::fewshot(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
