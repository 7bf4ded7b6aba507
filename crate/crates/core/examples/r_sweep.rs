//! Throughput and accuracy across reduction factors on the reference-size model.
//!
//! A synthetic model is given a template probe head so that accuracy carries a
//! signal, then swept over r. Pass a sample count as the first argument.

use tome_ast::bench::{benchmark_throughput, BenchConfig, Dataset, SweepResult};
use tome_ast::model_io::{fit_template_probe, generate_synthetic_dataset, generate_synthetic_model, SyntheticDataConfig};
use tome_ast::{ModelConfig, Result};

pub fn run_example(cfg: ModelConfig, n_samples: usize, r_values: Vec<usize>) -> Result<SweepResult> {
    let mut model = generate_synthetic_model(0, &cfg)?;
    let data_cfg = SyntheticDataConfig::new(cfg.n_classes, cfg.clip_seconds, cfg.task_kind);
    let data = generate_synthetic_dataset(1, n_samples, &data_cfg)?;
    fit_template_probe(&mut model, &data.spectrograms, &data.labels)?;

    let dataset = Dataset::from_parts(&model, data.spectrograms, data.labels)?;
    let bench = BenchConfig {
        r_values,
        warmup_runs: 1,
        ..BenchConfig::default()
    };
    benchmark_throughput(&model, &dataset, &bench)
}

fn main() -> Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let result = run_example(ModelConfig::reference(4), n, vec![0, 10, 20, 30, 40])?;
    print!("{}", result.to_table());
    Ok(())
}

