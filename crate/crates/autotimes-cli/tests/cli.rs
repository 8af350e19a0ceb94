//! End-to-end checks of the command-line surface: exit codes, artifact
//! files, and protocol behavior.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_autotimes")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should run")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.config");
    write(
        &path,
        &format!(
            "seed=5\n\
             data.kind=synth\n\
             synth.length=400\n\
             synth.period=16\n\
             synth.noise_std=0.05\n\
             split.train=280\n\
             split.val=0\n\
             split.test=120\n\
             backbone.num_layers=1\n\
             backbone.model_dim=16\n\
             backbone.num_heads=2\n\
             backbone.ffn_dim=32\n\
             backbone.max_positions=128\n\
             adapter.embed=mlp:32\n\
             adapter.project=mlp:32\n\
             train.batch_size=8\n\
             train.epochs=2\n\
             train.max_steps=12\n\
             train.context_segments=3\n\
             train.segment_length=16\n\
             train.use_timestamps=false\n\
             eval.horizons=16,32\n\
             eval.stride=16\n\
             {extra}"
        ),
    );
    path
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.config");
    write(&cfg, "foo=1\nseed=3\n");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("foo"), "stderr: {stderr}");
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for sub in ["a", "b"] {
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            dir.path().join(sub).to_str().unwrap(),
            "train",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["model.atck", "loss_trace.jsonl", "resolved.config"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn quickstart_config_completes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let repo_config = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/quickstart.config");
    let started = std::time::Instant::now();
    let out = run(&[
        "--config",
        repo_config.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "quick-start took {elapsed:.1}s");
    assert!(dir.path().join("out/model.atck").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("validation"), "stdout: {stdout}");
}

#[test]
fn eval_one_for_all_writes_reports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let train_out = dir.path().join("train");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let ckpt = train_out.join("model.atck");
    for sub in ["e1", "e2"] {
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            dir.path().join(sub).to_str().unwrap(),
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--protocol",
            "one_for_all",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["report.json", "report.csv"] {
        let a = std::fs::read(dir.path().join("e1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("e2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical eval runs");
    }
    let report = std::fs::read_to_string(dir.path().join("e1/report.json")).unwrap();
    assert!(report.contains("\"checkpoint_fingerprint\""));
    assert!(report.contains("\"config_digest\""));
    assert!(report.contains("horizon=16"));
    assert!(report.contains("average"));
}

#[test]
fn variable_lookback_rows_appear_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "eval.lookbacks=16,48\n");
    let train_out = dir.path().join("train");
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("eval").to_str().unwrap(),
        "eval",
        "--checkpoint",
        train_out.join("model.atck").to_str().unwrap(),
        "--protocol",
        "one_for_all",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("eval/report.json")).unwrap();
    assert!(report.contains("variable_lookback/lookback=16"), "{report}");
    assert!(report.contains("variable_lookback/lookback=48"), "{report}");
}

fn m4_fixture(dir: &Path) -> PathBuf {
    // Three series with F=8; lengths comfortably above the 4F threshold,
    // plus one at exactly 4F that must be discarded.
    let mut text = String::new();
    for (id, len) in [("A", 80usize), ("B", 64), ("C", 48), ("SHORT", 32)] {
        let values: Vec<String> = (0..len)
            .map(|i| format!("{:.4}", (i as f64 * 0.4).sin() * 3.0 + 10.0))
            .collect();
        text.push_str(&format!("{id},8,{}\n", values.join(",")));
    }
    let path = dir.join("m4.csv");
    write(&path, &text);
    path
}

fn m4_config(dir: &Path, data_path: &Path, extra: &str) -> PathBuf {
    let path = dir.join(format!("m4-{}.config", extra.len()));
    write(
        &path,
        &format!(
            "seed=9\n\
             data.kind=m4\n\
             data.path={}\n\
             data.seasonality=4\n\
             backbone.num_layers=1\n\
             backbone.model_dim=16\n\
             backbone.num_heads=2\n\
             backbone.ffn_dim=32\n\
             backbone.max_positions=32\n\
             adapter.embed=linear\n\
             adapter.project=linear\n\
             train.batch_size=8\n\
             train.epochs=2\n\
             train.max_steps=10\n\
             train.context_segments=3\n\
             train.segment_length=8\n\
             train.use_timestamps=false\n\
             train.normalization=none\n\
             {extra}",
            data_path.display()
        ),
    );
    path
}

#[test]
fn zero_shot_equals_in_context_with_zero_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let data = m4_fixture(dir.path());
    let cfg = m4_config(dir.path(), &data, "");
    let train_out = dir.path().join("train");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_out.join("model.atck");

    let zs_cfg = m4_config(dir.path(), &data, "incontext.strategy=zero_shot\n");
    let out = run(&[
        "--config",
        zs_cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("zs").to_str().unwrap(),
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--protocol",
        "zero_shot",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "--config",
        zs_cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("icf").to_str().unwrap(),
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--protocol",
        "in_context",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let parse_rows = |p: PathBuf| -> serde_json::Value {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["rows"].clone()
    };
    let zs_rows = parse_rows(dir.path().join("zs/report.json"));
    let icf_rows = parse_rows(dir.path().join("icf/report.json"));
    assert_eq!(zs_rows, icf_rows, "metric rows differ");

    // The exactly-4F series must be in the discard log of both runs.
    for sub in ["zs", "icf"] {
        let log = std::fs::read_to_string(dir.path().join(sub).join("discards.jsonl")).unwrap();
        assert!(log.contains("SHORT"), "{sub}: {log}");
    }
}

#[test]
fn in_context_first_window_runs_on_m4_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = m4_fixture(dir.path());
    let cfg = m4_config(dir.path(), &data, "");
    let train_out = dir.path().join("train");
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    let icf_cfg = m4_config(dir.path(), &data, "incontext.strategy=first_window\n");
    let out = run(&[
        "--config",
        icf_cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("icf").to_str().unwrap(),
        "eval",
        "--checkpoint",
        train_out.join("model.atck").to_str().unwrap(),
        "--protocol",
        "in_context",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("icf/report.json")).unwrap();
    assert!(report.contains("in_context:first_window"));
    assert!(report.contains("\"smape\""));
    assert!(report.contains("\"owa\""));
}

#[test]
fn forecast_request_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let train_out = dir.path().join("train");
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    let ckpt = train_out.join("model.atck");

    let lookback: Vec<String> = (0..48).map(|i| format!("{:.4}", (i as f64 * 0.3).sin())).collect();
    let ok_request = dir.path().join("req.json");
    write(
        &ok_request,
        &format!(
            "{{\"lookback\":[{}],\"horizon\":16,\"mode\":\"autoregressive\"}}",
            lookback.join(",")
        ),
    );
    let out = run(&[
        "--out-dir",
        dir.path().join("f").to_str().unwrap(),
        "forecast",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--request",
        ok_request.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("f/forecast.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(result["predictions"].as_array().unwrap().len(), 16);
    assert_eq!(result["steps"].as_array().unwrap().len(), 1);

    // Horizon not a multiple of the segment length: request error.
    let bad = dir.path().join("bad.json");
    write(
        &bad,
        &format!(
            "{{\"lookback\":[{}],\"horizon\":20,\"mode\":\"autoregressive\"}}",
            lookback.join(",")
        ),
    );
    let out = run(&[
        "--out-dir",
        dir.path().join("f2").to_str().unwrap(),
        "forecast",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--request",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(6));

    // Missing checkpoint: checkpoint error.
    let out = run(&[
        "--out-dir",
        dir.path().join("f3").to_str().unwrap(),
        "forecast",
        "--checkpoint",
        dir.path().join("nope.atck").to_str().unwrap(),
        "--request",
        ok_request.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn forecast_missing_timestamps_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "train.use_timestamps=true\ntrain.max_steps=4\n");
    let train_out = dir.path().join("train");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lookback: Vec<String> = (0..48).map(|i| format!("{:.4}", (i as f64 * 0.3).sin())).collect();
    let req = dir.path().join("req.json");
    write(
        &req,
        &format!(
            "{{\"lookback\":[{}],\"horizon\":16,\"mode\":\"autoregressive\"}}",
            lookback.join(",")
        ),
    );
    let out = run(&[
        "--out-dir",
        dir.path().join("f").to_str().unwrap(),
        "forecast",
        "--checkpoint",
        train_out.join("model.atck").to_str().unwrap(),
        "--request",
        req.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(6), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn inspect_prints_parameter_split_and_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let train_out = dir.path().join("train");
    run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        train_out.to_str().unwrap(),
        "train",
    ]);
    let out = run(&["inspect", "--checkpoint", train_out.join("model.atck").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trainable_share:"), "{stdout}");
    assert!(stdout.contains("params.frozen:"));
    assert!(stdout.contains("fingerprint:"));
    assert!(stdout.contains("meta.config_digest:"));

    let corrupt = dir.path().join("corrupt.atck");
    write(&corrupt, "not a checkpoint");
    let out = run(&["inspect", "--checkpoint", corrupt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn ablate_emits_six_variant_table_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "train.max_steps=6\n");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("ab").to_str().unwrap(),
        "--threads",
        "2",
        "ablate",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    // Header plus 6 variants x 2 horizons.
    assert_eq!(csv.lines().count(), 1 + 12, "{csv}");
    for variant in [
        "full/",
        "no_llm/",
        "attn_only/",
        "single_block/",
        "flatten_head/",
        "full_no_timestamps/",
    ] {
        assert!(csv.contains(variant), "missing {variant} in {csv}");
    }
    let failures: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("ab/failures.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(failures["failures"].as_array().unwrap().len(), 0);
}

#[test]
fn sweep_single_value_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "train.max_steps=6\n");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("sw").to_str().unwrap(),
        "sweep",
        "--axis",
        "learning_rate",
        "--values",
        "0.001",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("sw/sweep.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["axis"], "learning_rate");
    assert_eq!(json["points"].as_array().unwrap().len(), 1);
    assert!(json["points"][0]["error"].is_null());
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for (sub, seed) in [("s1", "5"), ("s2", "6")] {
        let out = run(&[
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out-dir",
            dir.path().join(sub).to_str().unwrap(),
            "train",
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(dir.path().join("s1/model.atck")).unwrap();
    let b = std::fs::read(dir.path().join("s2/model.atck")).unwrap();
    assert_ne!(a, b, "different seeds produced identical checkpoints");
}
