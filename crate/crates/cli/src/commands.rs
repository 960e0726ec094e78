use std::collections::HashMap;
use std::path::{Path, PathBuf};

use gad_core::discriminator::{checkpoint_scalar_width, load_checkpoint};
use gad_core::evaluation::{
    build_report, compute_auroc, few_shot_eval, sweep as run_sweep, write_sweep, ConfigEcho,
    PixelSample,
};
use gad_core::feature_store::{load_manifest, Label, LoadedManifest, Split};
use gad_core::scalar::Scalar;
use gad_core::scoring::{
    export_map, map_stem, read_map_raw, read_scores_csv, score_dataset, score_rows,
    write_scores_csv, ScoreRow,
};
use gad_core::synth::{generate, oracle_scores, SynthConfig};
use gad_core::trainer::{save_outcome, train as run_train, JsonLinesProgress};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, Overrides, Precision, RunConfig};
use crate::error::{io_error, CliError};
use crate::{EvalArgs, FewshotArgs, RunFlags, ScoreArgs, SweepArgs, SynthArgs, TrainArgs};

pub struct Context {
    pub file: Option<Overrides>,
    pub print_config: bool,
}

impl Context {
    /// Resolves the run config; `None` means it was printed and the
    /// command should stop.
    fn run_config(&self, flags: &RunFlags) -> Result<Option<RunConfig>, CliError> {
        let cfg = resolve(self.file.as_ref(), &flags.overrides())?;
        if self.print_config {
            println!("{}", to_json(&cfg));
            return Ok(None);
        }
        log::info!(
            "resolved config: {}",
            serde_json::to_string(&cfg).expect("serialisable")
        );
        Ok(Some(cfg))
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable")
}

fn write_json<T: Serialize>(v: &T, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, to_json(v) + "\n").map_err(|e| io_error(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn echo(cfg: &RunConfig, checkpoint_id: Option<String>, kind: Option<&str>) -> ConfigEcho {
    ConfigEcho {
        top_k: Some(cfg.top_k.to_string()),
        epsilon: Some(cfg.epsilon),
        strategies: cfg.strategies.iter().map(|s| s.to_string()).collect(),
        sigma: Some(cfg.sigma),
        checkpoint_id,
        checkpoint_kind: kind.map(String::from),
        seed: Some(cfg.seed),
    }
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        grid_h: a.grid_h,
        grid_w: a.grid_w,
        dim: a.dim,
        n_heads: a.heads,
        n_train: a.n_train,
        n_test_normal: a.n_test_normal,
        n_test_anomalous: a.n_test_anomalous,
        anomaly_shift: a.shift,
        anomaly_extent: a.extent,
        seed: a.seed,
        ..SynthConfig::default()
    };
    if ctx.print_config {
        println!("{}", to_json(&cfg));
        return Ok(());
    }
    let manifest = generate(&cfg, &a.out)?;
    write_json(&cfg, &a.out.join("synth_config.json"))?;
    let oracle = oracle_scores(&manifest, Split::Test)?;
    let labels: Vec<bool> = manifest
        .entries(Split::Test)
        .map(|e| e.label == Label::Anomalous)
        .collect();
    let oracle_auroc = compute_auroc(&oracle, &labels).ok();
    println!(
        "{}",
        serde_json::json!({
            "manifest": a.out.join("manifest.json"),
            "records": manifest.manifest.entries.len(),
            "oracle_image_auroc": oracle_auroc,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    final_checkpoint: PathBuf,
    final_id: String,
    best_checkpoint: Option<PathBuf>,
    best_id: Option<String>,
    final_image_auroc: Option<f64>,
    best_image_auroc: Option<f64>,
    steps: usize,
}

fn train_typed<T: Scalar>(
    manifest: &LoadedManifest,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(), CliError> {
    let progress_path = out.join("progress.jsonl");
    let file = std::fs::File::create(&progress_path).map_err(|e| io_error(&progress_path, e))?;
    let mut progress = JsonLinesProgress::new(std::io::BufWriter::new(file));
    let outcome = run_train::<T>(manifest, &cfg.train_config(), Some(&mut progress))?;
    drop(progress);
    let saved = save_outcome(&outcome, out)?;
    let summary = TrainSummary {
        final_checkpoint: saved.final_checkpoint,
        final_id: saved.final_id,
        best_checkpoint: saved.best_checkpoint,
        best_id: saved.best_id,
        final_image_auroc: outcome.history.final_image_auroc,
        best_image_auroc: outcome.history.best().map(|e| e.image_auroc),
        steps: outcome.history.total_steps,
    };
    write_json(&summary, &out.join("summary.json"))?;
    println!("{}", to_json(&summary));
    Ok(())
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<(), CliError> {
    let Some(cfg) = ctx.run_config(&a.run)? else {
        return Ok(());
    };
    let manifest = load_manifest(&a.manifest)?;
    create_dir(&a.out)?;
    write_json(&cfg, &a.out.join("run_config.json"))?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&manifest, &cfg, &a.out),
        Precision::F64 => train_typed::<f64>(&manifest, &cfg, &a.out),
    }
}

/// Sidecar written next to a scores CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScoreEcho {
    run: RunConfig,
    checkpoint: PathBuf,
    checkpoint_id: String,
    split: Split,
}

fn echo_path(scores: &Path) -> PathBuf {
    let mut name = scores.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

fn score_typed<T: Scalar>(
    a: &ScoreArgs,
    manifest: &LoadedManifest,
    cfg: &RunConfig,
) -> Result<String, CliError> {
    let (model, id) = load_checkpoint::<T>(&a.checkpoint, None)?;
    let sigma = a.maps_out.as_ref().map(|_| cfg.sigma);
    let scores = score_dataset(&model, manifest, a.split, cfg.top_k, sigma)?;
    write_scores_csv(&score_rows(&scores), &a.out)?;
    if let Some(dir) = &a.maps_out {
        create_dir(dir)?;
        for s in &scores {
            if let Some(map) = &s.map {
                export_map(map, dir, &map_stem(&s.path))?;
            }
        }
    }
    Ok(id)
}

pub fn score(ctx: &Context, a: ScoreArgs) -> Result<(), CliError> {
    let Some(cfg) = ctx.run_config(&a.run)? else {
        return Ok(());
    };
    let manifest = load_manifest(&a.manifest)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let id = match checkpoint_scalar_width(&a.checkpoint)? {
        8 => score_typed::<f64>(&a, &manifest, &cfg)?,
        _ => score_typed::<f32>(&a, &manifest, &cfg)?,
    };
    let sidecar = ScoreEcho {
        run: cfg,
        checkpoint: a.checkpoint.clone(),
        checkpoint_id: id.clone(),
        split: a.split,
    };
    write_json(&sidecar, &echo_path(&a.out))?;
    println!(
        "{}",
        serde_json::json!({"scores": a.out, "checkpoint_id": id, "maps": a.maps_out})
    );
    Ok(())
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    let sidecar: Option<ScoreEcho> = std::fs::read_to_string(echo_path(&a.scores))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    if ctx.print_config {
        println!("{}", to_json(&sidecar.as_ref().map(|s| &s.run)));
        return Ok(());
    }
    let manifest = load_manifest(&a.manifest)?;
    let entries: HashMap<&str, _> = manifest
        .entries(a.split)
        .map(|e| (e.path.as_str(), e))
        .collect();
    // Labels and classes come from the manifest, not the CSV.
    let rows = read_scores_csv(&a.scores)?
        .into_iter()
        .map(|r| match entries.get(r.path.as_str()) {
            Some(e) => Ok(ScoreRow {
                class: e.class_name.clone(),
                label: e.label.as_u8(),
                ..r
            }),
            None => Err(CliError::Config(format!(
                "scored record {} is not in the {} split of {}",
                r.path,
                a.split,
                a.manifest.display()
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let pixels = match &a.maps {
        None => None,
        Some(dir) => {
            let mut samples = Vec::new();
            for row in &rows {
                let entry = entries[row.path.as_str()];
                let record = manifest.load_entry(entry)?.record;
                let map = read_map_raw(&dir.join(format!("{}.f32", map_stem(&row.path))))?;
                samples.push(PixelSample {
                    class_name: entry.class_name.clone(),
                    label: entry.label,
                    map,
                    mask: record.pixel_mask,
                });
            }
            Some(samples)
        }
    };
    let config = match &sidecar {
        Some(s) => echo(
            &s.run,
            Some(s.checkpoint_id.clone()),
            checkpoint_kind(&s.checkpoint),
        ),
        None => ConfigEcho::default(),
    };
    let report = build_report(&rows, pixels.as_deref(), a.per_image_pixel, config)?;
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    println!("{}", to_json(&report));
    Ok(())
}

fn checkpoint_kind(path: &Path) -> Option<&'static str> {
    match path.file_stem()?.to_str()? {
        "best" => Some("best"),
        "final" => Some("final"),
        _ => None,
    }
}

pub fn sweep(ctx: &Context, a: SweepArgs) -> Result<(), CliError> {
    let Some(cfg) = ctx.run_config(&a.run)? else {
        return Ok(());
    };
    let manifest = load_manifest(&a.manifest)?;
    let train_cfg = cfg.train_config();
    let table = match cfg.precision {
        Precision::F32 => run_sweep::<f32>(&manifest, a.axis, &a.values, &train_cfg, cfg.top_k)?,
        Precision::F64 => run_sweep::<f64>(&manifest, a.axis, &a.values, &train_cfg, cfg.top_k)?,
    };
    let (csv, svg) = write_sweep(&table, &a.out)?;
    let doc = serde_json::json!({"config": cfg, "table": table, "csv": csv, "svg": svg});
    write_json(&doc, &a.out.join(format!("sweep_{}.json", a.axis)))?;
    println!("{}", to_json(&doc));
    Ok(())
}

pub fn fewshot(ctx: &Context, a: FewshotArgs) -> Result<(), CliError> {
    let Some(cfg) = ctx.run_config(&a.run)? else {
        return Ok(());
    };
    let manifest = load_manifest(&a.manifest)?;
    let train_cfg = cfg.train_config();
    let report = match cfg.precision {
        Precision::F32 => {
            few_shot_eval::<f32>(&manifest, &a.shots, a.seeds, &train_cfg, cfg.top_k)?
        }
        Precision::F64 => {
            few_shot_eval::<f64>(&manifest, &a.shots, a.seeds, &train_cfg, cfg.top_k)?
        }
    };
    let doc = serde_json::json!({"config": cfg, "report": report});
    if let Some(out) = &a.out {
        write_json(&doc, out)?;
    }
    println!("{}", to_json(&doc));
    Ok(())
}
