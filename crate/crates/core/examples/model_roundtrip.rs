//! Save and reload a model, spectrograms and logits; outputs must not change.

use std::path::Path;

use tome_ast::model_io::{
    generate_synthetic_dataset, generate_synthetic_model, load_model, read_spec1, read_tlog1, save_model, write_tlog1,
    SyntheticDataConfig,
};
use tome_ast::{ModelConfig, Result, ToMeConfig};

/// Returns whether reloaded assets reproduce the original logits bit for bit.
pub fn run_example(cfg: &ModelConfig, dir: &Path) -> Result<bool> {
    let model = generate_synthetic_model(3, cfg)?;
    save_model(dir.join("model.modl"), &model)?;
    let reloaded = load_model(dir.join("model.modl"))?;

    let data_cfg = SyntheticDataConfig::new(cfg.n_classes, cfg.clip_seconds, cfg.task_kind);
    let manifest = generate_synthetic_dataset(5, 3, &data_cfg)?.write(dir)?;
    let mut logits = ndarray::Array2::<f32>::zeros((manifest.entries.len(), cfg.n_classes));
    for (i, e) in manifest.entries.iter().enumerate() {
        let spec = read_spec1(dir.join(&e.path))?;
        let (p, _) = reloaded.forward(spec.view(), &ToMeConfig::new(8))?;
        logits.row_mut(i).assign(&p.logits);
    }
    write_tlog1(dir.join("logits.tlog"), &logits)?;
    let back = read_tlog1(dir.join("logits.tlog"))?;

    let same = reloaded == model && back == logits;
    println!("{} samples, {} classes, round trip exact: {same}", back.nrows(), back.ncols());
    Ok(same)
}

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("tome_ast_roundtrip");
    std::fs::create_dir_all(&dir).map_err(|source| tome_ast::Error::Io { path: dir.clone(), source })?;
    let cfg = ModelConfig {
        depth: 4,
        ..ModelConfig::reference(5)
    };
    run_example(&cfg, &dir)?;
    Ok(())
}
