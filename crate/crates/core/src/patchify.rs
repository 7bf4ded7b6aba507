//! Overlapping patch extraction, linear patch embedding, positional table and [CLS].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mel bins assumed by [`patch_count`].
pub const DEFAULT_MEL_BINS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    /// 16x16 patches with an overlap of 6 on both axes.
    pub fn new(embed_dim: usize) -> Self {
        Self {
            patch_size: 16,
            stride: 10,
            embed_dim,
        }
    }

    pub fn overlap(&self) -> usize {
        self.patch_size - self.stride
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size || self.embed_dim == 0 {
            return Err(Error::Config(format!("invalid patch config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub n_freq_patches: usize,
    pub n_time_patches: usize,
}

impl PatchGrid {
    /// Valid-origin grid for a `[n_mels, n_frames]` input: origins at multiples of the
    /// stride, no padding.
    pub fn for_shape(n_mels: usize, n_frames: usize, cfg: &PatchConfig) -> Result<Self> {
        if n_mels < cfg.patch_size || n_frames < cfg.patch_size {
            return Err(Error::InvalidInput(format!(
                "spectrogram {n_mels}x{n_frames} is smaller than one {0}x{0} patch",
                cfg.patch_size
            )));
        }
        Ok(Self {
            n_freq_patches: (n_mels - cfg.patch_size) / cfg.stride + 1,
            n_time_patches: (n_frames - cfg.patch_size) / cfg.stride + 1,
        })
    }

    pub fn total(&self) -> usize {
        self.n_freq_patches * self.n_time_patches
    }
}

/// `N = 12 * ceil((100 t - 16) / 10)` for a 128-bin spectrogram of `t` seconds.
///
/// A clip of exactly 16 frames makes the ceiling zero although one column of
/// patches fits; that case returns 12.
pub fn patch_count(seconds: f64) -> Result<usize> {
    let frames = crate::features::SpectrogramConfig::default().frames_for_duration(seconds);
    if !seconds.is_finite() || frames < 16 {
        return Err(Error::InvalidInput(format!(
            "a {seconds} s clip is shorter than one 16-frame patch"
        )));
    }
    let n_freq = (DEFAULT_MEL_BINS - 16) / 10 + 1;
    let n_time = (frames - 16).div_ceil(10).max(1);
    Ok(n_freq * n_time)
}

/// Gathers every patch, flattened row-major (frequency rows, then time columns).
///
/// Patch `p` has frequency index `p % n_freq` and time index `p / n_freq`.
pub fn extract_patches(values: ArrayView2<'_, f32>, cfg: &PatchConfig) -> Result<(Array2<f32>, PatchGrid)> {
    cfg.validate()?;
    let (n_mels, n_frames) = values.dim();
    let grid = PatchGrid::for_shape(n_mels, n_frames, cfg)?;
    let p = cfg.patch_size;
    let mut out = Array2::<f32>::zeros((grid.total(), cfg.patch_len()));
    for tj in 0..grid.n_time_patches {
        for fi in 0..grid.n_freq_patches {
            let (f0, t0) = (fi * cfg.stride, tj * cfg.stride);
            let patch = values.slice(s![f0..f0 + p, t0..t0 + p]);
            let mut row = out.row_mut(tj * grid.n_freq_patches + fi);
            for (dst, src) in row.iter_mut().zip(patch.iter()) {
                *dst = *src;
            }
        }
    }
    Ok((out, grid))
}

/// Patch projection, positional table and [CLS] vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights {
    /// `[patch_len, d]`
    pub projection: Array2<f32>,
    pub projection_bias: Array1<f32>,
    /// `[N + 1, d]`, row 0 belongs to [CLS].
    pub positional: Array2<f32>,
    pub cls_token: Array1<f32>,
}

impl EmbeddingWeights {
    pub fn zeros(patch_len: usize, n_patches: usize, d: usize) -> Self {
        Self {
            projection: Array2::zeros((patch_len, d)),
            projection_bias: Array1::zeros(d),
            positional: Array2::zeros((n_patches + 1, d)),
            cls_token: Array1::zeros(d),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }
}

pub fn embed_patches(patches: &Array2<f32>, w: &EmbeddingWeights) -> Result<Array2<f32>> {
    if patches.ncols() != w.projection.nrows() {
        return Err(Error::shape(
            "patch embedding",
            format!("{} patch values", w.projection.nrows()),
            format!("{}", patches.ncols()),
        ));
    }
    if w.projection_bias.len() != w.projection.ncols() {
        return Err(Error::shape(
            "patch embedding bias",
            w.projection.ncols(),
            w.projection_bias.len(),
        ));
    }
    Ok(patches.dot(&w.projection) + &w.projection_bias)
}

/// Ordered token embeddings plus per-token merge multiplicity.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[n_tokens, d]`
    pub tokens: Array2<f32>,
    pub sizes: Vec<f32>,
}

impl TokenSequence {
    /// Fresh sequence with every size equal to 1.
    pub fn new(tokens: Array2<f32>) -> Result<Self> {
        let n = tokens.nrows();
        Self::with_sizes(tokens, vec![1.0; n])
    }

    pub fn with_sizes(tokens: Array2<f32>, sizes: Vec<f32>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if sizes.len() != tokens.nrows() {
            return Err(Error::shape("token sizes", tokens.nrows(), sizes.len()));
        }
        if let Some(s) = sizes.iter().find(|s| !(**s >= 1.0)) {
            return Err(Error::InvalidInput(format!("token size {s} is below 1")));
        }
        Ok(Self { tokens, sizes })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn total_size(&self) -> f64 {
        self.sizes.iter().map(|&s| s as f64).sum()
    }

    /// `sum_i size_i * x_i`, accumulated in f64.
    pub fn weighted_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim()];
        for (row, &s) in self.tokens.axis_iter(Axis(0)).zip(&self.sizes) {
            for (a, &v) in acc.iter_mut().zip(row.iter()) {
                *a += s as f64 * v as f64;
            }
        }
        acc
    }

    pub fn all_unit_sizes(&self) -> bool {
        self.sizes.iter().all(|&s| s == 1.0)
    }
}

/// Prepends [CLS] and adds the positional table.
pub fn add_positional_and_cls(x: &Array2<f32>, w: &EmbeddingWeights) -> Result<TokenSequence> {
    let (n, d) = x.dim();
    if w.positional.nrows() != n + 1 {
        return Err(Error::shape("positional table rows", n + 1, w.positional.nrows()));
    }
    if w.positional.ncols() != d || w.cls_token.len() != d {
        return Err(Error::shape("embedding width", d, w.positional.ncols()));
    }
    let mut tokens = Array2::<f32>::zeros((n + 1, d));
    tokens.row_mut(0).assign(&(&w.cls_token + &w.positional.row(0)));
    tokens
        .slice_mut(s![1.., ..])
        .assign(&(x + &w.positional.slice(s![1.., ..])));
    TokenSequence::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn patch_count_formula() {
        assert_eq!(patch_count(5.0).unwrap(), 588);
        assert_eq!(patch_count(1.0).unwrap(), 108);
        assert_eq!(patch_count(0.16).unwrap(), 12);
        assert!(patch_count(0.15).is_err());
        assert!(patch_count(f64::NAN).is_err());
    }

    #[test]
    fn degenerate_clip_patch_origins() {
        // Enumerate every origin of a 16x16 window on a 128x16 input.
        let mut origins = 0;
        for f0 in (0..=128 - 16).step_by(10) {
            for t0 in (0..=16 - 16).step_by(10) {
                let _ = (f0, t0);
                origins += 1;
            }
        }
        assert_eq!(origins, 12);
        assert_eq!(patch_count(0.16).unwrap(), origins);
    }

    #[test]
    fn patch_count_agrees_with_extraction() {
        let cfg = PatchConfig::new(8);
        for t in 1..=10 {
            let frames = 100 * t;
            let grid = PatchGrid::for_shape(128, frames, &cfg).unwrap();
            assert_eq!(grid.total(), patch_count(t as f64).unwrap(), "t = {t}");
        }
    }

    #[test]
    fn extract_shapes() {
        let cfg = PatchConfig::new(8);
        let (p, g) = extract_patches(Array2::zeros((128, 500)).view(), &cfg).unwrap();
        assert_eq!((g.n_freq_patches, g.n_time_patches), (12, 49));
        assert_eq!(p.dim(), (588, 256));
        let (p, g) = extract_patches(Array2::zeros((128, 16)).view(), &cfg).unwrap();
        assert_eq!((g.n_freq_patches, g.n_time_patches), (12, 1));
        assert_eq!(p.nrows(), 12);
        assert!(extract_patches(Array2::zeros((15, 100)).view(), &cfg).is_err());
        assert!(extract_patches(Array2::zeros((128, 15)).view(), &cfg).is_err());
    }

    #[test]
    fn constant_input_gives_constant_patches() {
        let (p, _) = extract_patches(Array2::from_elem((128, 40), 2.5f32).view(), &PatchConfig::new(4)).unwrap();
        assert!(p.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn patch_layout() {
        let values = Array2::from_shape_fn((40, 30), |(f, t)| (f * 1000 + t) as f32);
        let (p, g) = extract_patches(values.view(), &PatchConfig::new(4)).unwrap();
        assert_eq!((g.n_freq_patches, g.n_time_patches), (3, 2));
        // patch index 4 -> freq 1, time 1
        let row = p.row(4);
        assert_eq!(row[0], (10 * 1000 + 10) as f32);
        assert_eq!(row[1], (10 * 1000 + 11) as f32);
        assert_eq!(row[16], (11 * 1000 + 10) as f32);
        assert_eq!(row[255], (25 * 1000 + 25) as f32);
    }

    proptest! {
        #[test]
        fn extraction_is_a_pure_gather(seed in any::<u64>(), mels in 16usize..40, frames in 16usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = random_matrix(&mut rng, mels, frames);
            let (p, _) = extract_patches(values.view(), &PatchConfig::new(4)).unwrap();
            let mut pool: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            pool.sort_unstable();
            for v in p.iter() {
                prop_assert!(pool.binary_search(&v.to_bits()).is_ok());
            }
        }
    }

    #[test]
    fn embed_zero_and_selector() {
        let w = EmbeddingWeights::zeros(256, 3, 16);
        let out = embed_patches(&Array2::zeros((3, 256)), &w).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let mut w = EmbeddingWeights::zeros(256, 3, 16);
        for i in 0..16 {
            w.projection[[i, i]] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = random_matrix(&mut rng, 3, 256);
        let out = embed_patches(&patches, &w).unwrap();
        assert_eq!(out, patches.slice(s![.., 0..16]));
    }

    #[test]
    fn embed_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let patches = random_matrix(&mut rng, 11, 256);
        let mut w = EmbeddingWeights::zeros(256, 11, 24);
        w.projection = random_matrix(&mut rng, 256, 24);
        w.projection_bias = Array1::from_shape_fn(24, |_| rng.gen_range(-1.0f32..1.0));
        let out = embed_patches(&patches, &w).unwrap();
        for i in 0..11 {
            for j in 0..24 {
                let mut acc = w.projection_bias[j] as f64;
                for k in 0..256 {
                    acc += patches[[i, k]] as f64 * w.projection[[k, j]] as f64;
                }
                assert!((out[[i, j]] as f64 - acc).abs() < 1e-5, "{i},{j}");
            }
        }
    }

    #[test]
    fn embed_shape_mismatch() {
        let w = EmbeddingWeights::zeros(256, 3, 16);
        assert!(matches!(embed_patches(&Array2::zeros((3, 255)), &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn positional_and_cls() {
        let w = EmbeddingWeights::zeros(256, 2, 4);
        let ts = add_positional_and_cls(&Array2::zeros((2, 4)), &w).unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts.sizes, vec![1.0; 3]);
        assert!(ts.tokens.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = EmbeddingWeights::zeros(256, 5, 4);
        w.positional = random_matrix(&mut rng, 6, 4);
        let ts = add_positional_and_cls(&Array2::zeros((5, 4)), &w).unwrap();
        assert_eq!(ts.tokens, w.positional);

        w.cls_token = Array1::from_elem(4, 1.0);
        let x = random_matrix(&mut rng, 5, 4);
        let ts = add_positional_and_cls(&x, &w).unwrap();
        assert_eq!(ts.tokens.row(0), &w.positional.row(0) + 1.0);
        assert_eq!(ts.tokens.row(3), &x.row(2) + &w.positional.row(3));

        assert!(add_positional_and_cls(&Array2::zeros((4, 4)), &w).is_err());
    }

    #[test]
    fn five_second_model_has_589_tokens() {
        let n = patch_count(5.0).unwrap();
        let w = EmbeddingWeights::zeros(256, n, 4);
        let ts = add_positional_and_cls(&Array2::zeros((n, 4)), &w).unwrap();
        assert_eq!(ts.len(), 589);
    }
}
