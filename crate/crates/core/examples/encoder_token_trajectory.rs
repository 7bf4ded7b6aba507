//! Token counts per block as r grows, on a seeded synthetic model.

use ndarray::Array2;
use tome_ast::model_io::generate_synthetic_model;
use tome_ast::{ModelConfig, Result, ToMeConfig};

/// Per-block token counts (input first) for each r.
pub fn run_example(cfg: &ModelConfig, r_values: &[usize]) -> Result<Vec<Vec<usize>>> {
    let model = generate_synthetic_model(0, cfg)?;
    let frames = model.expected_frames();
    let spec = Array2::from_shape_fn((128, frames), |(m, t)| (m as f32 * 0.3).sin() + (t as f32 * 0.05).cos());
    let mut out = Vec::new();
    for &r in r_values {
        let (pred, enc) = model.forward(spec.view(), &ToMeConfig::new(r))?;
        println!("r={r:>2} tokens {:?} -> class {}", enc.per_block_counts, pred.top_class());
        out.push(enc.per_block_counts);
    }
    Ok(out)
}

fn main() -> Result<()> {
    run_example(&ModelConfig::reference(10), &[0, 10, 20, 40])?;
    Ok(())
}
