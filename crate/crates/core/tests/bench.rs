use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use tome_ast::bench::{
    benchmark_throughput, kd_eval, run_inference, sweep_report, BenchConfig, Dataset, SweepResult, CSV_HEADER,
};
use tome_ast::features::Waveform;
use tome_ast::kd::KdConfig;
use tome_ast::model_io::{
    generate_synthetic_dataset, generate_synthetic_model, save_model, write_tlog1, DatasetManifest, Label,
    ManifestEntry, SyntheticDataConfig,
};
use tome_ast::{Error, Model, ModelConfig, TaskKind};

fn cfg(task_kind: TaskKind) -> ModelConfig {
    ModelConfig {
        depth: 4,
        embed_dim: 24,
        n_heads: 2,
        mlp_ratio: 2.0,
        clip_seconds: 1.0,
        n_classes: 4,
        task_kind,
    }
}

fn setup(task_kind: TaskKind, n: usize, dir: &Path) -> (Model, Dataset) {
    let model = generate_synthetic_model(0, &cfg(task_kind)).unwrap();
    let data_cfg = SyntheticDataConfig::new(4, 1.0, task_kind);
    generate_synthetic_dataset(1, n, &data_cfg).unwrap().write(dir).unwrap();
    save_model(dir.join("model.modl"), &model).unwrap();
    let data = Dataset::load(&model, dir.join("manifest.jsonl")).unwrap();
    (model, data)
}

/// Token count after each block, simulated from the partition sizes alone.
fn count_law(mut n: usize, r: usize, depth: usize) -> usize {
    for _ in 0..depth {
        let a = n / 2;
        n -= r.min(a).min(n - 2);
    }
    n
}

#[test]
fn r0_predictions_match_merge_free_encoder_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::SingleLabel, 5, dir.path());
    let report = run_inference(&model, &data, 0, 1).unwrap();
    for (p, x) in report.predictions.iter().zip(&data.inputs) {
        let q = model.forward_without_merging(x.view()).unwrap();
        let bits = |a: &ndarray::Array1<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.logits), bits(&q.logits));
    }
}

#[test]
fn token_counts_follow_the_law() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::SingleLabel, 4, dir.path());
    for r in [0, 5, 20, 40] {
        let report = run_inference(&model, &data, r, 1).unwrap();
        let expected = count_law(109, r, 4);
        assert!(report.final_token_counts.iter().all(|&c| c == expected), "r={r}");
    }
}

#[test]
fn single_sample_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::MultiLabel, 1, dir.path());
    let report = run_inference(&model, &data, 10, 1).unwrap();
    assert_eq!(report.predictions.len(), 1);
    assert!(report.metrics.map.is_some());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::MultiLabel, 7, dir.path());
    let a = run_inference(&model, &data, 8, 1).unwrap();
    let b = run_inference(&model, &data, 8, 3).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn wav_entries_go_through_the_front_end() {
    let dir = tempfile::tempdir().unwrap();
    let model = generate_synthetic_model(0, &cfg(TaskKind::SingleLabel)).unwrap();
    let samples: Vec<f32> = (0..16_000).map(|i| 0.3 * (i as f32 * 0.07).sin()).collect();
    Waveform::new(samples, 16_000).unwrap().write_wav(dir.path().join("a.wav")).unwrap();
    let manifest = DatasetManifest {
        task_kind: TaskKind::SingleLabel,
        clip_seconds: 1.0,
        n_classes: 4,
        entries: vec![ManifestEntry {
            path: "a.wav".into(),
            label: Label::Class(2),
        }],
    };
    manifest.save(dir.path().join("m.jsonl")).unwrap();
    let data = Dataset::load(&model, dir.path().join("m.jsonl")).unwrap();
    assert_eq!(data.inputs[0].dim(), (128, 100));
}

#[test]
fn loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = setup(TaskKind::SingleLabel, 2, dir.path());

    let long = ModelConfig {
        clip_seconds: 2.0,
        ..cfg(TaskKind::SingleLabel)
    };
    let other = generate_synthetic_model(0, &long).unwrap();
    assert!(matches!(Dataset::load(&other, dir.path().join("manifest.jsonl")), Err(Error::Config(_))));

    std::fs::remove_file(dir.path().join("sample_00001.spec")).unwrap();
    let err = Dataset::load(&model, dir.path().join("manifest.jsonl")).unwrap_err();
    assert_eq!(err.category(), "io");
}

#[test]
fn sweep_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::SingleLabel, 4, dir.path());
    let bench = BenchConfig {
        r_values: vec![20, 5],
        warmup_runs: 1,
        ..BenchConfig::default()
    };
    let a = benchmark_throughput(&model, &data, &bench).unwrap();
    let b = benchmark_throughput(&model, &data, &bench).unwrap();
    let r: Vec<usize> = a.rows.iter().map(|row| row.r).collect();
    assert_eq!(r, vec![0, 5, 20]);
    assert_eq!(a.rows[0].drop, 0.0);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.metric, x.drop, x.tokens_final), (y.metric, y.drop, y.tokens_final));
        assert_eq!(x.timings_s.len(), 3);
        assert_eq!(x.measured_runs, 3);
        assert!(x.s_per_s > 0.0);
        assert_eq!(x.tokens_final, count_law(109, x.r, 4));
    }
}

#[test]
fn batched_timing_scores_every_sample_once() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::SingleLabel, 5, dir.path());
    let full = benchmark_throughput(&model, &data, &BenchConfig { r_values: vec![0], ..BenchConfig::default() }).unwrap();
    let batched = BenchConfig {
        r_values: vec![0],
        batch: Some(2),
        ..BenchConfig::default()
    };
    let b = benchmark_throughput(&model, &data, &batched).unwrap();
    assert_eq!(b.rows[0].timings_s.len(), 3);
    assert_eq!(b.rows[0].metric, full.rows[0].metric);
    let one = BenchConfig {
        batch: Some(1),
        ..batched
    };
    assert_eq!(benchmark_throughput(&model, &data, &one).unwrap().rows[0].timings_s.len(), 5);
}

#[test]
fn sweep_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::SingleLabel, 1, dir.path());
    let empty = BenchConfig {
        r_values: vec![],
        ..BenchConfig::default()
    };
    assert!(matches!(benchmark_throughput(&model, &data, &empty), Err(Error::Config(_))));
    let two_runs = BenchConfig {
        measured_runs: 2,
        ..BenchConfig::default()
    };
    assert!(matches!(benchmark_throughput(&model, &data, &two_runs), Err(Error::Config(_))));
}

#[test]
fn report_round_trip_and_r0_only() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = setup(TaskKind::MultiLabel, 3, dir.path());
    let bench = BenchConfig {
        r_values: vec![0],
        warmup_runs: 0,
        ..BenchConfig::default()
    };
    let result = benchmark_throughput(&model, &data, &bench).unwrap();
    assert_eq!(result.rows.len(), 1);
    assert_eq!(result.rows[0].drop, 0.0);
    assert_eq!(result.metric_name, "mAP");
    let (json, csv) = sweep_report(&result).unwrap();
    assert_eq!(SweepResult::from_json(&json).unwrap(), result);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert!(lines.next().unwrap().starts_with("0,"));
}

fn random_logits(n: usize, k: usize, salt: u32) -> Array2<f32> {
    Array2::from_shape_fn((n, k), |(i, j)| (((i * 7 + j * 3) as u32 ^ salt) % 11) as f32 * 0.4 - 2.0)
}

#[test]
fn kd_eval_laws() {
    let labels: Vec<Label> = (0..6).map(|i| Label::Class(i % 3)).collect();
    let s = random_logits(6, 3, 5);
    let t = random_logits(6, 3, 9);

    let self_kd = KdConfig {
        lambda: 0.0,
        ..KdConfig::new(TaskKind::SingleLabel)
    };
    let r = kd_eval(s.view(), s.view(), &labels, &self_kd, 4).unwrap();
    let entropy: f64 = s
        .rows()
        .into_iter()
        .map(|row| {
            let p = tome_ast::head::softmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>());
            -p.iter().map(|q| q * q.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / 6.0;
    assert!((r.mean.distillation - entropy).abs() < 1e-12);
    assert_eq!(r.per_batch.len(), 2);

    let gt_only = KdConfig {
        lambda: 1.0,
        ..KdConfig::new(TaskKind::SingleLabel)
    };
    let r = kd_eval(s.view(), t.view(), &labels, &gt_only, 6).unwrap();
    assert_eq!(r.mean.total, r.mean.ground_truth);

    let r = kd_eval(s.view(), t.view(), &labels, &KdConfig::new(TaskKind::SingleLabel), 3).unwrap();
    assert!((r.mean.total - (0.1 * r.mean.ground_truth + 0.9 * r.mean.distillation)).abs() < 1e-12);
}

#[test]
fn kd_eval_alignment_error_names_counts() {
    let labels: Vec<Label> = (0..4).map(|i| Label::Class(i % 3)).collect();
    let s = random_logits(4, 3, 1);
    let t = random_logits(5, 3, 2);
    let err = kd_eval(s.view(), t.view(), &labels, &KdConfig::new(TaskKind::SingleLabel), 2).unwrap_err();
    assert_eq!(err.category(), "alignment");
    let msg = err.to_string();
    assert!(msg.contains('4') && msg.contains('5'), "{msg}");
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ast-bench")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_sweep_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    setup(TaskKind::SingleLabel, 3, dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    let (code, stdout, stderr) = cli(&[
        "--model", &p("model.modl"),
        "--manifest", &p("manifest.jsonl"),
        "--r-sweep", "10,20",
        "--warmup", "0",
        "--out-json", &p("sweep.json"),
        "--out-csv", &p("sweep.csv"),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("accuracy"));
    let result = SweepResult::from_json(&std::fs::read_to_string(p("sweep.json")).unwrap()).unwrap();
    assert_eq!(result.rows.len(), 3);
    let csv = std::fs::read_to_string(p("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn cli_kd_and_single_r() {
    let dir = tempfile::tempdir().unwrap();
    setup(TaskKind::SingleLabel, 3, dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    write_tlog1(p("teacher.tlog"), &random_logits(3, 4, 3)).unwrap();
    let base = ["--model", &p("model.modl"), "--manifest", &p("manifest.jsonl")];

    let (code, stdout, _) = cli(&[&base[..], &["--r", "12", "--out-json", &p("inf.json")]].concat());
    assert_eq!(code, 0);
    assert!(stdout.contains("final tokens per sample: 61"), "{stdout}");

    let (code, stdout, _) = cli(&[&base[..], &["--teacher-logits", &p("teacher.tlog"), "--lambda", "0.1", "--tau", "1"]].concat());
    assert_eq!(code, 0);
    assert!(stdout.contains("Loss_d="));

    write_tlog1(p("short.tlog"), &random_logits(2, 4, 3)).unwrap();
    let (code, _, stderr) = cli(&[&base[..], &["--teacher-logits", &p("short.tlog")]].concat());
    assert_ne!(code, 0);
    assert!(stderr.starts_with("error[alignment]:"), "{stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1);
}

#[test]
fn cli_errors_are_single_categorized_lines() {
    let (code, _, stderr) = cli(&["--mode", "train-inf"]);
    assert_ne!(code, 0);
    assert!(stderr.starts_with("error[config]:") && stderr.contains("--mode inf"), "{stderr}");

    let (code, _, stderr) = cli(&["--model", "/nonexistent/model.modl"]);
    assert_ne!(code, 0);
    assert!(stderr.starts_with("error[io]:"), "{stderr}");

    let (code, _, stderr) = cli(&["--frobnicate"]);
    assert_eq!(code, 2);
    assert!(stderr.starts_with("error[usage]:"), "{stderr}");

    let (code, _, stderr) = cli(&["--r-sweep", ""]);
    assert_ne!(code, 0);
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
}
