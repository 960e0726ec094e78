use std::path::Path;
use std::process::{Command, Output};

fn gad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes)
        .unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(bytes)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    let out = gad(&[
        "synth",
        "--out",
        p(dir),
        "--n-train",
        "16",
        "--n-test-normal",
        "8",
        "--n-test-anomalous",
        "8",
        "--dim",
        "16",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_train_score_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    small_dataset(&ds);
    let manifest = ds.join("manifest.json");
    let run = tmp.path().join("run");
    let out = gad(&[
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&run),
        "--hidden",
        "16",
        "--epochs",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json(&out.stdout);
    assert!(summary["final_image_auroc"].is_number());
    for f in [
        "final.ckpt",
        "best.ckpt",
        "history.json",
        "run_config.json",
        "progress.jsonl",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let echoed = json(&std::fs::read(run.join("run_config.json")).unwrap());
    assert_eq!(echoed["epochs"], 2);

    let scores = tmp.path().join("scores.csv");
    let maps = tmp.path().join("maps");
    let out = gad(&[
        "score",
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&scores),
        "--maps-out",
        p(&maps),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(maps.join("test_anomalous_00000.png").is_file());

    let report_path = tmp.path().join("report.json");
    let out = gad(&[
        "eval",
        "--scores",
        p(&scores),
        "--manifest",
        p(&manifest),
        "--maps",
        p(&maps),
        "--out",
        p(&report_path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&out.stdout);
    let auroc = report["mean_image_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert!(report["pooled_pixel_auroc"].is_number());
    assert_eq!(report["config"]["top_k"], "10");
    assert_eq!(report["config"]["checkpoint_kind"], "final");
    assert_eq!(json(&std::fs::read(&report_path).unwrap()), report);
}

#[test]
fn semantic_preset_echo() {
    let out = gad(&[
        "train",
        "--mode",
        "semantic",
        "--manifest",
        "m",
        "--out",
        "o",
        "--print-config",
    ]);
    assert!(out.status.success());
    let cfg = json(&out.stdout);
    assert_eq!(cfg["strategies"], serde_json::json!(["NoiseAll"]));
    assert_eq!(cfg["top_k"], "all");
    assert_eq!(cfg["epochs"], 20);
}

#[test]
fn logical_preset_and_explicit_override() {
    let out = gad(&[
        "train",
        "--mode",
        "logical",
        "--top-k",
        "3",
        "--manifest",
        "m",
        "--out",
        "o",
        "--print-config",
    ]);
    let cfg = json(&out.stdout);
    assert_eq!(
        cfg["strategies"],
        serde_json::json!(["NoiseRandom", "AttnShuffle"])
    );
    assert_eq!(cfg["top_k"], 3);
    assert_eq!(cfg["epochs"], 160);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    std::fs::write(&file, "mode = \"semantic\"\nepsilon = 0.5\nseed = 7\n").unwrap();
    let out = gad(&[
        "--config",
        p(&file),
        "train",
        "--seed",
        "9",
        "--manifest",
        "m",
        "--out",
        "o",
        "--print-config",
    ]);
    let cfg = json(&out.stdout);
    assert_eq!(cfg["mode"], "semantic");
    assert_eq!(cfg["epsilon"], 0.5);
    assert_eq!(cfg["seed"], 9);

    std::fs::write(&file, "epsilonn = 0.5\n").unwrap();
    let out = gad(&[
        "--config",
        p(&file),
        "train",
        "--manifest",
        "m",
        "--out",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out.stderr)["error"]["kind"], "config");
}

#[test]
fn top_k_zero_is_a_usage_error() {
    let out = gad(&[
        "score",
        "--top-k",
        "0",
        "--checkpoint",
        "c",
        "--manifest",
        "m",
        "--out",
        "s",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out.stderr)["error"]["kind"], "usage");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = gad(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out.stderr)["error"]["kind"], "usage");
}

#[test]
fn missing_manifest_is_reported_as_json() {
    let out = gad(&[
        "train",
        "--manifest",
        "/nonexistent/manifest.json",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out.stderr)["error"]["kind"], "manifest");
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_gad"))
        .args(["train", "--manifest", "m", "--out", "o"])
        .env("GAD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out.stderr)["error"]["kind"], "config");
}

#[test]
fn k_sweep_and_fewshot_on_tiny_data() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    small_dataset(&ds);
    let manifest = ds.join("manifest.json");
    let sweep_dir = tmp.path().join("sweep");
    let out = gad(&[
        "sweep",
        "--manifest",
        p(&manifest),
        "--axis",
        "k",
        "--values",
        "1,10,all",
        "--out",
        p(&sweep_dir),
        "--hidden",
        "16",
        "--epochs",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = json(&out.stdout);
    assert_eq!(doc["table"]["rows"].as_array().unwrap().len(), 3);
    assert!(sweep_dir.join("sweep_k.csv").is_file());
    assert!(sweep_dir.join("sweep_k.svg").is_file());

    let out = gad(&[
        "fewshot",
        "--manifest",
        p(&manifest),
        "--shots",
        "1,2",
        "--seeds",
        "2",
        "--hidden",
        "16",
        "--epochs",
        "1",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = json(&out.stdout);
    let rows = doc["report"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["formatted"].as_str().unwrap().contains(" ± "));

    let out = gad(&[
        "fewshot",
        "--manifest",
        p(&manifest),
        "--shots",
        "100",
        "--seeds",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(json(&out.stderr)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("100 requested"));

    let out = gad(&[
        "sweep",
        "--manifest",
        p(&manifest),
        "--axis",
        "epsilon",
        "--values=-1",
        "--out",
        p(&sweep_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(json(&out.stderr)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("sweep axis epsilon"));
}
