//! End-to-end runs of the `xtrd` binary: synth -> train -> decode -> wer,
//! exit-code contract, and the mask inspector.

use std::path::Path;
use std::process::{Command, Output};

use xtrd_core::{
    attended_count, synthetic_vocab, EncoderConfig, FrontEndConfig, JoinerConfig, MaskGeometry,
    ModelConfig, PredictorConfig, SyntheticTaskConfig, TrainConfig,
};

fn xtrd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xtrd"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn xtrd");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_expect(cmd: &mut Command, code: i32) -> Output {
    let out = cmd.output().expect("spawn xtrd");
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn data_cfg() -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        vocab_size: 5,
        frames_per_token: 2,
        feature_dim: 5,
        noise_std: 0.05,
        min_tokens: 2,
        max_tokens: 4,
        seed: 3,
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        frontend: FrontEndConfig { sample_rate: 16000, frame_window: 40, frame_hop: 20, d_model: 8 },
        encoder: EncoderConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ffn: 16, dropout: 0.0 },
        predictor: PredictorConfig { embed_dim: 6, kernel: 2 },
        joiner: JoinerConfig { joint_dim: 10 },
        feature_dim: 5,
        vocab: synthetic_vocab(&data_cfg()),
        exact_loss: true,
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        warmup_steps: 5,
        epochs,
        batch_size: 4,
        chunk_choices: vec![2, 4],
        training_mode: xtrd_core::TrainingMode::MultiChunk,
        seed: 1,
    }
}

fn write_full_config(path: &Path, epochs: usize) {
    let cfg = serde_json::json!({
        "seed": 42,
        "data": data_cfg(),
        "model": model_cfg(),
        "train": train_cfg(epochs),
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

/// Per-utterance lines of a decode output (summary stripped).
fn utterance_lines(stdout: &str) -> Vec<serde_json::Value> {
    stdout
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v.get("utterance_id").is_some())
        .collect()
}

#[test]
fn synth_data_is_seed_deterministic_and_rejects_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_full_config(&cfg_path, 1);

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(xtrd().args([
            "synth-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--n-utts",
            "10",
        ]));
    }
    let manifest_a = std::fs::read(out_a.join("manifest.jsonl")).unwrap();
    let manifest_b = std::fs::read(out_b.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    assert_eq!(String::from_utf8(manifest_a).unwrap().lines().count(), 10);
    let feat_a = std::fs::read(out_a.join("feats/synth-00000.xtf")).unwrap();
    let feat_b = std::fs::read(out_b.join("feats/synth-00000.xtf")).unwrap();
    assert_eq!(feat_a, feat_b);
    // config.json records the effective generation inputs.
    let used: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(used["seed"], 42);
    assert_eq!(used["n_utts"], 10);

    // A different seed changes the bytes.
    let out_c = dir.path().join("c");
    run_ok(xtrd().args([
        "synth-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--n-utts",
        "10",
        "--seed",
        "7",
    ]));
    assert_ne!(feat_a, std::fs::read(out_c.join("feats/synth-00000.xtf")).unwrap());

    // Unknown config key: exit 2 naming the key.
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"seed": 1, "data": {"vocab_size": 5, "frames_per_token": 2, "feature_dim": 5,
            "noise_st": 0.1, "min_tokens": 2, "max_tokens": 4, "seed": 0}}"#,
    )
    .unwrap();
    let out = run_expect(
        xtrd().args([
            "synth-data",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("d").to_str().unwrap(),
            "--n-utts",
            "1",
        ]),
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_st"));
}

#[test]
fn train_decode_wer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_full_config(&cfg_path, 2);

    let data_dir = dir.path().join("data");
    run_ok(xtrd().args([
        "synth-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--n-utts",
        "16",
    ]));
    let manifest = data_dir.join("manifest.jsonl");

    // Straight 2-epoch run.
    let t1 = dir.path().join("t1");
    let stdout = run_ok(xtrd().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        t1.to_str().unwrap(),
    ]));
    let metric_lines: Vec<serde_json::Value> =
        stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(metric_lines.len(), 2);
    assert!(metric_lines[0]["mean_nll"].as_f64().unwrap().is_finite());
    assert!(t1.join("last.xtrd").exists() && t1.join("best.xtrd").exists());
    assert_eq!(
        std::fs::read_to_string(t1.join("metrics.jsonl")).unwrap().lines().count(),
        2
    );

    // Interrupted-then-resumed run reproduces the straight run bitwise.
    let t2 = dir.path().join("t2");
    run_ok(xtrd().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        t2.to_str().unwrap(),
        "--stop-after",
        "1",
    ]));
    let resumed_stdout = run_ok(xtrd().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        t2.to_str().unwrap(),
        "--resume",
        t2.join("last.xtrd").to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(t1.join("last.xtrd")).unwrap(),
        std::fs::read(t2.join("last.xtrd")).unwrap(),
        "resumed checkpoint differs from uninterrupted run"
    );
    let resumed_line: serde_json::Value =
        serde_json::from_str(resumed_stdout.lines().next().unwrap()).unwrap();
    assert_eq!(resumed_line, metric_lines[1]);

    let ckpt = t1.join("last.xtrd");
    let decode_base = |mode: &str| {
        let mut c = xtrd();
        c.args([
            "decode",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--mode",
            mode,
            "--chunk-frames",
            "4",
            "--left-context",
            "1",
            "--beam",
            "2",
        ]);
        c
    };

    // Streaming and offline agree line for line under the same mask.
    let offline = utterance_lines(&run_ok(&mut decode_base("offline")));
    let streaming = utterance_lines(&run_ok(&mut decode_base("streaming")));
    assert_eq!(offline.len(), 16);
    assert_eq!(offline, streaming);

    // Saturated left context equals the explicit "full" flag.
    let full = |lc: &str| {
        utterance_lines(&run_ok(xtrd().args([
            "decode",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--chunk-frames",
            "4",
            "--left-context",
            lc,
        ])))
    };
    assert_eq!(full("full"), full("1000000"));

    // Full attention: one chunk per utterance.
    let fa_out = dir.path().join("fa.jsonl");
    let fa_stdout = run_ok(xtrd().args([
        "decode",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--full-attention",
        "--out",
        fa_out.to_str().unwrap(),
    ]));
    let fa_lines = utterance_lines(&fa_stdout);
    assert!(fa_lines.iter().all(|l| l["chunks"] == 1));
    assert_eq!(
        utterance_lines(&std::fs::read_to_string(&fa_out).unwrap()),
        fa_lines,
        "--out file should mirror stdout"
    );

    // WER of the decode output against the manifest references.
    let wer_stdout = run_ok(xtrd().args([
        "eval-wer",
        "--refs",
        manifest.to_str().unwrap(),
        "--hyps",
        fa_out.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_str(wer_stdout.trim()).unwrap();
    assert!(report["n_ref_words"].as_u64().unwrap() > 0);
    assert!(report["wer"].as_f64().unwrap().is_finite());
}

#[test]
fn decode_handles_wav_input_identically_across_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_full_config(&cfg_path, 1);

    // Minimal training just to have a valid checkpoint on disk.
    let data_dir = dir.path().join("data");
    run_ok(xtrd().args([
        "synth-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--n-utts",
        "6",
    ]));
    let t = dir.path().join("t");
    run_ok(xtrd().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data_dir.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        t.to_str().unwrap(),
    ]));

    // 210 samples: not a multiple of the 20-sample hop, so the streaming
    // remainder-flush path runs.
    let samples: Vec<f64> = (0..210).map(|i| (i as f64 * 0.11).sin() * 0.4).collect();
    let wav = dir.path().join("u0.wav");
    xtrd_core::data::write_wav(&wav, &samples, 16000).unwrap();
    let manifest = dir.path().join("audio.jsonl");
    std::fs::write(
        &manifest,
        format!("{}\n", serde_json::json!({"utterance_id": "u0", "audio_path": "u0.wav"})),
    )
    .unwrap();

    let decode = |mode: &str| {
        utterance_lines(&run_ok(xtrd().args([
            "decode",
            "--ckpt",
            t.join("last.xtrd").to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--mode",
            mode,
            "--chunk-frames",
            "4",
        ])))
    };
    let offline = decode("offline");
    let streaming = decode("streaming");
    assert_eq!(offline, streaming);
    assert_eq!(offline[0]["frames"], 11); // ceil(210 / 20)
}

#[test]
fn inspect_mask_grid_matches_membership_and_counts() {
    let grid = run_ok(xtrd().args([
        "inspect-mask",
        "--chunk-frames",
        "2",
        "--left-context",
        "0",
        "--sink-frames",
        "0",
        "--frames",
        "4",
    ]));
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(&lines[..4], &["##..", "##..", "..##", "..##"]);
    let stats: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
    let spec = MaskGeometry::new(2, xtrd_core::LeftContext::Chunks(0), 0)
        .unwrap()
        .with_total(4)
        .unwrap();
    let expect: Vec<u64> =
        (0..2).map(|n| attended_count(&spec, n).unwrap() as u64).collect();
    assert_eq!(
        stats["per_chunk_attended"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect::<Vec<_>>(),
        expect
    );

    // A sink frame marks the first column in every row.
    let grid = run_ok(xtrd().args([
        "inspect-mask",
        "--chunk-frames",
        "2",
        "--left-context",
        "0",
        "--sink-frames",
        "1",
        "--frames",
        "4",
    ]));
    assert!(grid.lines().take(4).all(|l| l.starts_with('#')));

    run_expect(
        xtrd().args([
            "inspect-mask",
            "--chunk-frames",
            "2",
            "--left-context",
            "0",
            "--sink-frames",
            "0",
            "--frames",
            "513",
        ]),
        2,
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    write_full_config(&cfg_path, 1);

    // Missing manifest.
    run_expect(
        xtrd().args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            dir.path().join("nope.jsonl").to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]),
        2,
    );
    // Missing checkpoint.
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, "").unwrap();
    run_expect(
        xtrd().args([
            "decode",
            "--ckpt",
            dir.path().join("nope.xtrd").to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
        ]),
        2,
    );
    // Config without the needed section.
    let data_only = dir.path().join("data_only.json");
    std::fs::write(&data_only, format!("{}", serde_json::json!({"seed": 1, "data": data_cfg()})))
        .unwrap();
    let out = run_expect(
        xtrd().args([
            "train",
            "--config",
            data_only.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            dir.path().join("o2").to_str().unwrap(),
        ]),
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
    // Unknown flag (clap's own usage handling).
    run_expect(xtrd().args(["decode", "--no-such-flag"]), 2);
}
