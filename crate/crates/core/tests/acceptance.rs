//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{brute_force_auroc, random_record, tied_instance};
use gad_core::discriminator::{backward, bce_loss, forward_batch, DiscriminatorHyper};
use gad_core::evaluation::{build_report, compute_auroc, ConfigEcho, PixelSample};
use gad_core::feature_store::{encode_record, read_record, LoadedManifest, Split};
use gad_core::sag::{distort, noise_all, DistortionConfig, Strategy};
use gad_core::scoring::{image_score, score_dataset, score_rows, write_scores_csv, TopK};
use gad_core::synth::{generate, oracle_scores, SynthConfig};
use gad_core::trainer::{save_outcome, train, EvalCadence, TrainConfig, TrainHistory};
use gad_core::{Discriminator64, PatchScores, PortableRng};
use ndarray::{Array1, Array2, ArrayView2};

/// Hidden width used for the end-to-end runs.
const E2E_HIDDEN: usize = 256;
/// Epochs for the end-to-end runs (25 steps per epoch at batch 8).
const E2E_EPOCHS: usize = 40;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn loss_of(model: &Discriminator64, xs: &[Array2<f64>], masks: &[Vec<bool>]) -> f64 {
    let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
    let (logits, _) = forward_batch(model, &views, false, None).unwrap();
    let flat: Vec<f64> = logits.iter().copied().collect();
    let targets: Vec<bool> = masks.iter().flatten().copied().collect();
    bce_loss(&flat, &targets).unwrap()
}

/// Worst relative error of analytic gradients against finite differences
/// over 100 random tiny models. `five_point` selects the fourth-order
/// central stencil instead of the two-point one; both use step `H`.
fn gradient_check(five_point: bool) -> Outcome {
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    // Components whose magnitudes are both below this are compared absolutely.
    const FLOOR: f64 = 1e-7;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    let mut over = 0usize;
    for cfg in 0..100u64 {
        let mut rng = PortableRng::with_stream(2024, cfg);
        let hyper = DiscriminatorHyper {
            n_heads: 2,
            hidden: 16,
            dropout: 0.0,
            residual: cfg % 2 == 1,
            ..Default::default()
        };
        let mut model = Discriminator64::init(8, 3, 3, hyper, &mut rng).unwrap();
        for (_, t, _) in model.params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.1 * rng.gaussian());
        }
        let n_ex = 1 + rng.below_usize(3);
        let xs: Vec<Array2<f64>> = (0..n_ex)
            .map(|_| Array2::from_shape_simple_fn((9, 8), || rng.gaussian()))
            .collect();
        let masks: Vec<Vec<bool>> = (0..n_ex)
            .map(|_| (0..9).map(|_| rng.uniform() < 0.4).collect())
            .collect();
        let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
        let (_, cache) = forward_batch(&model, &views, false, None).unwrap();
        let mrefs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
        let (_, grads) = backward(&model, &cache, &mrefs, 1.0, true).unwrap();

        let derivative = |f: &dyn Fn(f64) -> f64| {
            if five_point {
                (-f(2.0 * H) + 8.0 * f(H) - 8.0 * f(-H) + f(-2.0 * H)) / (12.0 * H)
            } else {
                (f(H) - f(-H)) / (2.0 * H)
            }
        };
        let mut record = |name: &str, i: usize, a: f64, fd: f64| {
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
            checked += 1;
            if err >= TOL {
                over += 1;
            }
            if err > worst {
                worst = err;
                worst_at = format!("config {cfg} {name}[{i}] analytic {a:e} numeric {fd:e}");
            }
        };
        let analytic = grads.params.tensors();
        for (ti, (name, values, _)) in analytic.iter().enumerate() {
            for (i, &a) in values.iter().enumerate() {
                let fd = derivative(&|d| {
                    let mut m = model.clone();
                    m.params.tensors_mut()[ti].1[i] += d;
                    loss_of(&m, &xs, &masks)
                });
                record(name, i, a, fd);
            }
        }
        let dx = grads.input.as_ref().unwrap();
        for ex in 0..n_ex {
            for r in 0..9 {
                for c in 0..8 {
                    let fd = derivative(&|d| {
                        let mut x = xs.clone();
                        x[ex][[r, c]] += d;
                        loss_of(&model, &x, &masks)
                    });
                    record("input", ex * 72 + r * 8 + c, dx[[ex * 9 + r, c]], fd);
                }
            }
        }
    }
    outcome(
        worst < TOL,
        format!(
            "100 configs, {checked} components, {over} at or above {TOL:e}, worst relative error {worst:.2e} ({worst_at})"
        ),
    )
}

fn auroc_oracle() -> Outcome {
    let mut rng = PortableRng::new(77);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..1000 {
        let (s, l) = tied_instance(&mut rng);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied += 1;
        }
        let d = (compute_auroc(&s, &l).unwrap() - brute_force_auroc(&s, &l)).abs();
        worst = worst.max(d);
    }
    let toy = compute_auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    outcome(
        worst <= 1e-12 && toy == 0.75,
        format!("1000 instances ({tied} with ties), max |rank - pairwise| = {worst:.1e}, toy case {toy}"),
    )
}

fn distortion_soundness() -> Outcome {
    let cfg = DistortionConfig::with_strategies(vec![
        Strategy::NoiseAll,
        Strategy::NoiseRandom,
        Strategy::AttnShuffle,
    ]);
    let mut rng = PortableRng::new(5);
    let mut mask_violations = 0usize;
    let mut multiset_violations = 0usize;
    let mut used = [0usize; 3];
    let (mut sum, mut sum_sq, mut count) = (0.0f64, 0.0f64, 0usize);
    for call in 0..10_000 {
        let n = 4 + rng.below_usize(60);
        let d = 8 + rng.below_usize(24);
        let mut x = Array2::from_shape_simple_fn((n, d), || rng.gaussian());
        // Some duplicated rows so shuffles can swap equal rows.
        if call % 5 == 0 {
            let src = x.row(0).to_owned();
            x.row_mut(1).assign(&src);
        }
        let att = Array2::from_shape_simple_fn((3, n), || rng.uniform() as f32);
        let out = distort(x.view(), att.view(), &cfg, &mut rng).unwrap();
        used[out.strategy_used as usize] += 1;
        for i in 0..n {
            if out.mask[i] != (out.features.row(i) != x.row(i)) {
                mask_violations += 1;
            }
        }
        match out.strategy_used {
            Strategy::AttnShuffle => {
                let key = |a: &Array2<f64>| {
                    let mut rows: Vec<Vec<u64>> = a
                        .outer_iter()
                        .map(|r| r.iter().map(|v| v.to_bits()).collect())
                        .collect();
                    rows.sort();
                    rows
                };
                if key(&out.features) != key(&x) {
                    multiset_violations += 1;
                }
            }
            _ => {
                for i in (0..n).filter(|&i| out.mask[i]) {
                    for j in 0..d {
                        let e = out.features[[i, j]] - x[[i, j]];
                        sum += e;
                        sum_sq += e * e;
                        count += 1;
                    }
                }
            }
        }
    }
    let mean = sum / count as f64;
    let std = (sum_sq / count as f64 - mean * mean).sqrt();
    let eps = cfg.epsilon;
    let stats_ok = count >= 1_000_000 && mean.abs() < 0.005 && (std / eps - 1.0).abs() < 0.01;

    // Full-size record: N = 1369, D = 768.
    let (n, d) = (1369, 768);
    let x = Array2::from_shape_simple_fn((n, d), || rng.gaussian());
    let out = noise_all(x.view(), eps, &mut rng).unwrap();
    let diff = &out.features - &x;
    let m = diff.mean().unwrap();
    let s = diff.std(0.0);
    let bound = 3.0 * eps / ((n * d) as f64).sqrt();
    let big_ok = m.abs() < bound && (s / eps - 1.0).abs() < 0.02;

    outcome(
        mask_violations == 0 && multiset_violations == 0 && stats_ok && big_ok,
        format!(
            "10000 calls (NoiseAll {}, NoiseRandom {}, AttnShuffle {}): mask violations {mask_violations}, \
             multiset violations {multiset_violations}; {count} noise components mean {mean:.2e} std {std:.5}; \
             1369x768 mean {m:.2e} (bound {bound:.2e}) std {s:.5}",
            used[0], used[1], used[2]
        ),
    )
}

struct E2eRun {
    image_auroc: f64,
    pixel_auroc: Option<f64>,
    oracle_auroc: f64,
    history: TrainHistory,
    seconds: f64,
}

fn e2e_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: E2E_EPOCHS,
        eval_cadence: EvalCadence::Never,
        eval_top_k: TopK::Count(10),
        ..TrainConfig::default()
    };
    cfg.hyper.hidden = E2E_HIDDEN;
    cfg
}

fn e2e(shift: f64) -> E2eRun {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(
        &SynthConfig {
            anomaly_shift: shift,
            ..SynthConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    let labels: Vec<bool> = manifest
        .entries(Split::Test)
        .map(|e| e.label.as_binary() == Some(true))
        .collect();
    let oracle_auroc =
        compute_auroc(&oracle_scores(&manifest, Split::Test).unwrap(), &labels).unwrap();
    let out = train::<f32>(&manifest, &e2e_config(), None).unwrap();
    let scores = score_dataset(
        &out.model,
        &manifest,
        Split::Test,
        TopK::Count(10),
        Some(4.0),
    )
    .unwrap();
    let pixels = PixelSample::from_scores(&scores);
    let report = build_report(
        &score_rows(&scores),
        Some(&pixels),
        false,
        ConfigEcho::default(),
    )
    .unwrap();
    E2eRun {
        image_auroc: report.mean_image_auroc,
        pixel_auroc: report.pooled_pixel_auroc,
        oracle_auroc,
        history: out.history,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn loss_drop(history: &TrainHistory) -> (bool, String) {
    let losses: Vec<f64> = history.steps.iter().map(|s| s.loss).collect();
    let target = 0.5 * losses[0];
    let window = &losses[..losses.len().min(201)];
    let first_below = window.iter().position(|&l| l < target);
    let trailing = |end: usize| window[end - 10..end].iter().sum::<f64>() / 10.0;
    let best_trailing = (10..=window.len())
        .map(trailing)
        .fold(f64::INFINITY, f64::min);
    (
        first_below.is_some(),
        format!(
            "step-0 loss {:.4}, target {target:.4}, first step below {}, best 10-step mean in first 200 steps {best_trailing:.4}",
            losses[0],
            first_below.map_or("none".into(), |s| s.to_string()),
        ),
    )
}

fn schedule_check(history: &TrainHistory) -> Outcome {
    let first = history.steps.first().unwrap();
    let last = history.steps.last().unwrap();
    let ok = (first.lr - 5e-4).abs() <= 1e-12 && (last.lr - 1e-4).abs() <= 1e-12;
    outcome(
        ok,
        format!(
            "logged lr step 0 = {:e}, step {} = {:e}",
            first.lr, last.step, last.lr
        ),
    )
}

fn scoring_identities() -> Outcome {
    let mut rng = PortableRng::new(9);
    let mut failures = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below_usize(1369);
        let p = Array1::from_shape_simple_fn(n, || rng.uniform());
        let mean = p.iter().sum::<f64>() / n as f64;
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scores = PatchScores::from_probabilities(p, 1, n);
        if image_score(&scores, n).unwrap().score != mean
            || image_score(&scores, 1).unwrap().score != max
            || image_score(&scores, TopK::All.resolve(n).unwrap())
                .unwrap()
                .score
                != mean
        {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("1000 vectors, {failures} mismatches (k=N vs mean, k=1 vs max)"),
    )
}

fn pipeline_artifacts(root: &Path, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        let cfg = SynthConfig {
            n_train: 40,
            n_test_normal: 20,
            n_test_anomalous: 20,
            seed: 3,
            ..SynthConfig::default()
        };
        let manifest: LoadedManifest = generate(&cfg, &root.join("data")).unwrap();
        let mut tc = TrainConfig {
            epochs: 3,
            seed: 3,
            eval_cadence: EvalCadence::PerEpoch,
            ..TrainConfig::default()
        };
        tc.hyper.hidden = 64;
        tc.distortion.strategies = vec![
            Strategy::NoiseRandom,
            Strategy::AttnShuffle,
            Strategy::NoiseAll,
        ];
        let out = train::<f32>(&manifest, &tc, None).unwrap();
        let saved = save_outcome(&out, &root.join("run")).unwrap();
        let scores =
            score_dataset(&out.model, &manifest, Split::Test, TopK::Count(10), None).unwrap();
        let csv = root.join("scores.csv");
        write_scores_csv(&score_rows(&scores), &csv).unwrap();
        (
            std::fs::read(saved.final_checkpoint).unwrap(),
            std::fs::read(csv).unwrap(),
        )
    })
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, sa) = pipeline_artifacts(a.path(), 1);
    let (cb, sb) = pipeline_artifacts(b.path(), 4);
    outcome(
        ca == cb && sa == sb,
        format!(
            "two synth -> train -> score runs (1 and 4 worker threads): checkpoints identical {}, score CSVs identical {}",
            ca == cb,
            sa == sb
        ),
    )
}

fn format_fuzzing() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = PortableRng::new(31337);
    let (mut parsed, mut rejected, mut crashes, mut invalid) = (0, 0, 0, 0);
    for i in 0..10_000 {
        let anomalous = rng.below(2) == 1;
        let r = random_record(&mut rng, anomalous);
        let mut bytes = encode_record(&r).unwrap();
        match rng.below(4) {
            0 => {
                let at = rng.below_usize(28.min(bytes.len()));
                bytes[at] = rng.below(256) as u8;
            }
            1 => {
                for _ in 0..1 + rng.below_usize(16) {
                    let at = rng.below_usize(bytes.len());
                    bytes[at] ^= 1 << rng.below(8);
                }
            }
            2 => {
                let len = rng.below_usize(bytes.len());
                bytes.truncate(len);
            }
            _ => {
                for _ in 0..1 + rng.below_usize(8) {
                    bytes.push(rng.below(256) as u8);
                }
            }
        }
        let path = dir.path().join(format!("f{}.gadf", i % 64));
        std::fs::write(&path, &bytes).unwrap();
        match catch_unwind(AssertUnwindSafe(|| read_record(&path))) {
            Ok(Ok(rec)) => {
                parsed += 1;
                if rec.validate().is_err() {
                    invalid += 1;
                }
            }
            Ok(Err(_)) => rejected += 1,
            Err(_) => crashes += 1,
        }
    }
    outcome(
        crashes == 0 && invalid == 0,
        format!("10000 mutated files: {parsed} parsed (all valid: {}), {rejected} typed errors, {crashes} crashes", invalid == 0),
    )
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        println!(
            "{} {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o, secs));
    };

    run("gradient_oracle", &|| gradient_check(false));
    // Supplementary: same components against a fourth-order stencil, which
    // separates analytic errors from two-point truncation error.
    run("gradient_oracle_five_point_supplementary", &|| {
        gradient_check(true)
    });
    run("auroc_oracle", &auroc_oracle);
    run("distortion_soundness", &distortion_soundness);
    run("scoring_identities", &scoring_identities);
    run("format_fuzzing", &format_fuzzing);
    run("determinism", &determinism);

    let detect = catch_unwind(|| e2e(2.0));
    match &detect {
        Ok(r) => {
            run("e2e_image_auroc", &|| {
                outcome(
                    r.image_auroc >= 0.95,
                    format!(
                        "image AUROC {:.4} (>= 0.95), oracle {:.4}, hidden {E2E_HIDDEN}, {} steps, {:.0}s",
                        r.image_auroc, r.oracle_auroc, r.history.total_steps, r.seconds
                    ),
                )
            });
            run("e2e_pixel_auroc", &|| {
                let p = r.pixel_auroc.unwrap_or(f64::NAN);
                outcome(p >= 0.90, format!("pooled pixel AUROC {p:.4} (>= 0.90)"))
            });
            run("e2e_loss_halved_within_200_steps", &|| {
                let (ok, detail) = loss_drop(&r.history);
                outcome(ok, detail)
            });
            run("e2e_oracle_ceiling", &|| {
                outcome(
                    r.oracle_auroc >= r.image_auroc,
                    format!(
                        "oracle {:.4} >= trained {:.4}",
                        r.oracle_auroc, r.image_auroc
                    ),
                )
            });
            run("schedule_check", &|| schedule_check(&r.history));
        }
        Err(_) => run("e2e_detection", &|| {
            outcome(false, "end-to-end run panicked".into())
        }),
    }
    run("chance_control", &|| {
        let r = e2e(0.0);
        outcome(
            (0.40..=0.60).contains(&r.image_auroc),
            format!(
                "shift 0: image AUROC {:.4} (in [0.40, 0.60]), {:.0}s",
                r.image_auroc, r.seconds
            ),
        )
    });

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
