//! Spectrogram to token sequence: patch grid, projection, positions and [CLS].

use ndarray::Array2;
use tome_ast::patchify::{add_positional_and_cls, embed_patches, extract_patches, patch_count, EmbeddingWeights, PatchConfig};
use tome_ast::{Result, TokenSequence};

pub fn run_example(seconds: f64, embed_dim: usize) -> Result<TokenSequence> {
    let frames = (100.0 * seconds).ceil() as usize;
    let spec = Array2::from_shape_fn((128, frames), |(m, t)| ((m * 31 + t * 17) % 23) as f32 / 23.0);
    let cfg = PatchConfig::new(embed_dim);
    let (patches, grid) = extract_patches(spec.view(), &cfg)?;
    println!(
        "{seconds} s -> {} x {} patch grid = {} patches (closed form {})",
        grid.n_freq_patches,
        grid.n_time_patches,
        grid.total(),
        patch_count(seconds)?
    );

    let mut w = EmbeddingWeights::zeros(cfg.patch_len(), grid.total(), embed_dim);
    w.projection.diag_mut().fill(1.0);
    w.cls_token.fill(0.5);
    let ts = add_positional_and_cls(&embed_patches(&patches, &w)?, &w)?;
    println!("token sequence: {} tokens of width {}", ts.len(), ts.dim());
    Ok(ts)
}

fn main() -> Result<()> {
    run_example(5.0, 192)?;
    Ok(())
}
