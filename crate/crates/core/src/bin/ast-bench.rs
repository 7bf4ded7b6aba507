//! Command-line front end: single-r inference, r sweeps and distillation-loss evaluation.
//!
//! Without `--model` a seeded synthetic reference-size model is used; without
//! `--manifest` a seeded synthetic dataset is generated in memory and the model
//! head is fitted to it with a template probe.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use tome_ast::bench::{benchmark_throughput, kd_eval, run_inference, BenchConfig, Dataset, DEFAULT_R_VALUES};
use tome_ast::kd::KdConfig;
use tome_ast::model_io::{
    fit_template_probe, generate_synthetic_dataset, generate_synthetic_model, load_model, read_tlog1, save_model,
    write_tlog1, SyntheticDataConfig,
};
use tome_ast::{Error, Model, ModelConfig, Result, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Merge tokens at inference only.
    Inf,
    /// Merge during training as well (not supported: no training here).
    TrainInf,
}

#[derive(Debug, Parser)]
#[command(name = "ast-bench", version, about = "Token-merging inference, r sweeps and distillation loss for audio spectrogram transformers")]
struct Cli {
    /// MODL1 model file. Defaults to a synthetic model built from --seed.
    #[arg(long)]
    model: Option<PathBuf>,
    /// MANI1 manifest. Defaults to a synthetic dataset built from --seed.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run inference at this single reduction factor.
    #[arg(long)]
    r: Option<usize>,
    /// Comma-separated reduction factors to sweep (r = 0 is always included).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    r_sweep: Option<Vec<usize>>,
    /// Samples per timed pass in a sweep, or per loss batch with --teacher-logits.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TLOG1 teacher logits aligned with the manifest; switches to distillation-loss evaluation.
    #[arg(long)]
    teacher_logits: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Inf)]
    mode: Mode,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Synthetic dataset size when no manifest is given.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Save the model used (MODL1) and the student logits at --r (TLOG1) into this directory.
    #[arg(long)]
    save_assets: Option<PathBuf>,
}

fn load_inputs(cli: &Cli) -> Result<(Model, Dataset)> {
    let mut model = match &cli.model {
        Some(p) => load_model(p)?,
        None => generate_synthetic_model(cli.seed, &ModelConfig::reference(4))?,
    };
    let data = match &cli.manifest {
        Some(p) => Dataset::load(&model, p)?,
        None => {
            let cfg = SyntheticDataConfig::new(model.config.n_classes, model.config.clip_seconds, model.config.task_kind);
            if cli.model.is_none() {
                let probe = generate_synthetic_dataset(cli.seed.wrapping_add(1), 8 * cfg.n_classes, &cfg)?;
                fit_template_probe(&mut model, &probe.spectrograms, &probe.labels)?;
            }
            let data = generate_synthetic_dataset(cli.seed.wrapping_add(2), cli.samples, &cfg)?;
            Dataset::from_parts(&model, data.spectrograms, data.labels)?
        }
    };
    Ok((model, data))
}

fn write_text(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    if cli.mode == Mode::TrainInf {
        return Err(Error::Config(
            "--mode train-inf merges tokens during training, and training is out of scope; use --mode inf".into(),
        ));
    }
    if cli.r_sweep.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::Config("r sweep is empty".into()));
    }
    let kd = KdConfig {
        lambda: cli.lambda,
        tau: cli.tau,
        task_kind: TaskKind::SingleLabel,
    };
    if cli.teacher_logits.is_some() {
        kd.validate()?;
    }
    let (model, data) = load_inputs(&cli)?;

    if let Some(teacher_path) = &cli.teacher_logits {
        let r = cli.r.unwrap_or(0);
        let report = run_inference(&model, &data, r, cli.threads)?;
        let teacher = read_tlog1(teacher_path)?;
        let cfg = KdConfig {
            task_kind: data.task_kind,
            ..kd
        };
        let eval = kd_eval(report.logits().view(), teacher.view(), &data.labels, &cfg, cli.batch.unwrap_or(32))?;
        println!(
            "r={r} lambda={} tau={} Loss={:.6} Loss_g={:.6} Loss_d={:.6} ({} batches)",
            eval.lambda,
            eval.tau,
            eval.mean.total,
            eval.mean.ground_truth,
            eval.mean.distillation,
            eval.per_batch.len()
        );
        if let Some(p) = &cli.out_json {
            write_text(p, &serde_json::to_string_pretty(&eval)?)?;
        }
        return Ok(());
    }

    if let (Some(r), None) = (cli.r, &cli.r_sweep) {
        let report = run_inference(&model, &data, r, cli.threads)?;
        let m = report.metrics;
        match m.map {
            Some(map) => println!("r={r} samples={} mAP={map:.4} top1_hit={:.4}", data.len(), m.accuracy),
            None => println!("r={r} samples={} accuracy={:.4}", data.len(), m.accuracy),
        }
        println!("final tokens per sample: {}", report.final_token_counts[0]);
        if let Some(dir) = &cli.save_assets {
            std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
            save_model(dir.join("model.modl"), &model)?;
            write_tlog1(dir.join("logits.tlog"), &report.logits())?;
        }
        if let Some(p) = &cli.out_json {
            write_text(p, &serde_json::to_string_pretty(&report.summary())?)?;
        }
        return Ok(());
    }

    let cfg = BenchConfig {
        r_values: cli.r_sweep.clone().unwrap_or_else(|| DEFAULT_R_VALUES.to_vec()),
        batch: cli.batch,
        warmup_runs: cli.warmup,
        measured_runs: cli.runs,
        threads: cli.threads,
        seed: cli.seed,
    };
    let result = benchmark_throughput(&model, &data, &cfg)?;
    print!("{}", result.to_table());
    if let Some(p) = &cli.out_json {
        write_text(p, &result.to_json()?)?;
    }
    if let Some(p) = &cli.out_csv {
        write_text(p, &result.to_csv())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
