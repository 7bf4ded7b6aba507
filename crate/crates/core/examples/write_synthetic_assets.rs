//! Writes a model, a manifest with SPEC1 inputs, and teacher logits to a directory,
//! ready for the `ast-bench` command line.
//!
//! ```text
//! cargo run --release --example write_synthetic_assets -- /tmp/assets
//! ast-bench --model /tmp/assets/model.modl --manifest /tmp/assets/manifest.jsonl \
//!     --teacher-logits /tmp/assets/teacher.tlog --r 20
//! ```

use std::path::Path;

use tome_ast::model_io::{
    fit_template_probe, generate_synthetic_dataset, generate_synthetic_model, save_model, write_tlog1, SyntheticDataConfig,
};
use tome_ast::{Error, ModelConfig, Result, TaskKind, ToMeConfig};

pub fn run_example(cfg: &ModelConfig, n_samples: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut model = generate_synthetic_model(0, cfg)?;
    let data_cfg = SyntheticDataConfig::new(cfg.n_classes, cfg.clip_seconds, cfg.task_kind);
    let probe = generate_synthetic_dataset(1, 4 * cfg.n_classes, &data_cfg)?;
    fit_template_probe(&mut model, &probe.spectrograms, &probe.labels)?;
    save_model(dir.join("model.modl"), &model)?;

    let data = generate_synthetic_dataset(2, n_samples, &data_cfg)?;
    data.write(dir)?;

    // A merge-free pass of the same model stands in for a teacher.
    let mut teacher = ndarray::Array2::<f32>::zeros((n_samples, cfg.n_classes));
    for (i, spec) in data.spectrograms.iter().enumerate() {
        let (p, _) = model.forward(spec.view(), &ToMeConfig::disabled())?;
        teacher.row_mut(i).assign(&p.logits);
    }
    write_tlog1(dir.join("teacher.tlog"), &teacher)?;
    println!("wrote model.modl, manifest.jsonl, {n_samples} SPEC1 files and teacher.tlog to {}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synthetic_assets".into());
    let cfg = ModelConfig {
        task_kind: TaskKind::MultiLabel,
        ..ModelConfig::reference(4)
    };
    run_example(&cfg, 12, Path::new(&dir))
}
