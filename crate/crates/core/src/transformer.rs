//! Pre-norm transformer encoder with a merge step between attention and MLP.
//!
//! Attention is proportional: the logit for key `j` is offset by `ln(size_j)`, so
//! a token standing for `s` merged tokens draws as much attention mass as its `s`
//! constituents would. With all sizes equal to 1 no offset is applied at all.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::{patch_count, TokenSequence};
use crate::tome::{merge_step_with_plan, MergePlan, SimilarityFeatures, ToMeConfig};

pub const LAYER_NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub clip_seconds: f64,
    pub n_classes: usize,
    pub task_kind: TaskKind,
}

impl ModelConfig {
    /// Desk-scale reference: 12 blocks, width 192, 3 heads, 5 s clips (589 tokens).
    pub fn reference(n_classes: usize) -> Self {
        Self {
            depth: 12,
            embed_dim: 192,
            n_heads: 3,
            mlp_ratio: 4.0,
            clip_seconds: 5.0,
            n_classes,
            task_kind: TaskKind::SingleLabel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible into {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::Config(format!("mlp_ratio {} gives no hidden units", self.mlp_ratio)));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        patch_count(self.clip_seconds)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Patch tokens for the declared clip length (excluding [CLS]).
    pub fn n_patches(&self) -> Result<usize> {
        patch_count(self.clip_seconds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let d = x.ncols();
        let mut out = Array2::<f32>::zeros(x.dim());
        for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            for (((o, &v), &g), &b) in dst.iter_mut().zip(src).zip(&self.gain).zip(&self.bias) {
                *o = ((v as f64 - mean) * inv) as f32 * g + b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    /// `[d, 3d]`, columns laid out as q | k | v, each split contiguously by head.
    pub qkv: Array2<f32>,
    pub qkv_bias: Array1<f32>,
    pub proj: Array2<f32>,
    pub proj_bias: Array1<f32>,
    pub ln2: LayerNorm,
    pub mlp_in: Array2<f32>,
    pub mlp_in_bias: Array1<f32>,
    pub mlp_out: Array2<f32>,
    pub mlp_out_bias: Array1<f32>,
}

impl BlockWeights {
    /// All-zero block (including LayerNorm gains).
    pub fn zeros(d: usize, hidden: usize) -> Self {
        let zero_ln = LayerNorm {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        };
        Self {
            ln1: zero_ln.clone(),
            qkv: Array2::zeros((d, 3 * d)),
            qkv_bias: Array1::zeros(3 * d),
            proj: Array2::zeros((d, d)),
            proj_bias: Array1::zeros(d),
            ln2: zero_ln,
            mlp_in: Array2::zeros((d, hidden)),
            mlp_in_bias: Array1::zeros(hidden),
            mlp_out: Array2::zeros((hidden, d)),
            mlp_out_bias: Array1::zeros(d),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.qkv.nrows()
    }

    pub fn check_shapes(&self, d: usize, hidden: usize) -> Result<()> {
        let mats = [
            ("qkv", self.qkv.dim(), (d, 3 * d)),
            ("proj", self.proj.dim(), (d, d)),
            ("mlp_in", self.mlp_in.dim(), (d, hidden)),
            ("mlp_out", self.mlp_out.dim(), (hidden, d)),
        ];
        for (name, found, expected) in mats {
            if found != expected {
                return Err(Error::shape("block weights", format!("{name} {expected:?}"), format!("{found:?}")));
            }
        }
        let vecs = [
            ("qkv_bias", self.qkv_bias.len(), 3 * d),
            ("proj_bias", self.proj_bias.len(), d),
            ("mlp_in_bias", self.mlp_in_bias.len(), hidden),
            ("mlp_out_bias", self.mlp_out_bias.len(), d),
            ("ln1.gain", self.ln1.gain.len(), d),
            ("ln1.bias", self.ln1.bias.len(), d),
            ("ln2.gain", self.ln2.gain.len(), d),
            ("ln2.bias", self.ln2.bias.len(), d),
        ];
        for (name, found, expected) in vecs {
            if found != expected {
                return Err(Error::shape("block weights", format!("{name} [{expected}]"), found));
            }
        }
        Ok(())
    }
}

/// Exact-form GELU, `x·Φ(x)`, with `erf` from Abramowitz & Stegun 7.1.26
/// (absolute error below 1.5e-7).
///
/// The tail `q = 1 − erf(|z|)` is computed directly, so negative inputs keep
/// their relative accuracy instead of cancelling in `1 + erf`.
#[inline]
fn gelu(x: f32) -> f32 {
    const P: f32 = 0.327_591_1;
    const A: [f32; 5] = [0.254_829_6, -0.284_496_74, 1.421_413_8, -1.453_152, 1.061_405_4];
    let z = x.abs() * std::f32::consts::FRAC_1_SQRT_2;
    let t = 1.0 / (1.0 + P * z);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    let q = poly * exp_nonpositive(-z * z);
    let phi2 = if x >= 0.0 { 2.0 - q } else { q };
    0.5 * x * phi2
}

/// `e^x` for `x <= 0`, branch-free so that row loops vectorize.
///
/// Range reduction `x = n·ln2 + r`, then a degree-7 polynomial on
/// `|r| <= ln2/2` (Cephes coefficients, relative error below 2e-7).
/// Inputs below -87 are clamped and give about 1.6e-38 instead of underflowing.
#[inline]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5·2^23: adding and subtracting rounds to an integer
    let x = x.clamp(-87.0, 0.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 0.5;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

fn softmax_rows_in_place(m: &mut Array2<f32>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let row = row.as_slice_mut().expect("row-major logits");
        for v in row.iter_mut() {
            *v = exp_nonpositive(*v - max);
        }
        // Eight running lanes keep the reduction vectorizable and the order fixed.
        let mut lanes = [0.0f32; 8];
        let mut chunks = row.chunks_exact(8);
        for c in &mut chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += v;
            }
        }
        let sum = lanes.iter().sum::<f32>() + chunks.remainder().iter().sum::<f32>();
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Multi-head attention sub-layer. Returns `x + attn(ln1(x))` and head-averaged keys.
fn attention_core(
    x: ArrayView2<'_, f32>,
    w: &BlockWeights,
    n_heads: usize,
    log_sizes: Option<&[f32]>,
) -> (Array2<f32>, Array2<f32>) {
    let (n, d) = x.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let xn = w.ln1.apply(x);
    let qkv = xn.dot(&w.qkv) + &w.qkv_bias;
    let mut heads = Array2::<f32>::zeros((n, d));
    let mut key_mean = Array2::<f32>::zeros((n, dh));
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut logits = q.dot(&k.t());
        match log_sizes {
            None => logits.mapv_inplace(|l| l * scale),
            Some(ls) => {
                for mut row in logits.axis_iter_mut(Axis(0)) {
                    let row = row.as_slice_mut().expect("row-major logits");
                    for (l, &o) in row.iter_mut().zip(ls) {
                        *l = *l * scale + o;
                    }
                }
            }
        }
        softmax_rows_in_place(&mut logits);
        heads.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&logits.dot(&v));
        key_mean += &k;
    }
    key_mean.mapv_inplace(|v| v / n_heads as f32);
    let out = heads.dot(&w.proj) + &w.proj_bias + x;
    (out, key_mean)
}

/// MLP sub-layer: `x + W2 gelu(W1 ln2(x) + b1) + b2`.
fn mlp(x: &Array2<f32>, w: &BlockWeights) -> Array2<f32> {
    let xn = w.ln2.apply(x.view());
    let mut hidden = xn.dot(&w.mlp_in) + &w.mlp_in_bias;
    hidden.mapv_inplace(gelu);
    hidden.dot(&w.mlp_out) + &w.mlp_out_bias + x
}

fn check_width(ts_width: usize, w: &BlockWeights, n_heads: usize) -> Result<()> {
    if ts_width != w.embed_dim() {
        return Err(Error::shape("token width", w.embed_dim(), ts_width));
    }
    if n_heads == 0 || ts_width % n_heads != 0 {
        return Err(Error::Config(format!("width {ts_width} not divisible into {n_heads} heads")));
    }
    Ok(())
}

/// Attention sub-layer with residual, plus the keys the merge step compares.
pub fn attention_with_keys(
    ts: &TokenSequence,
    w: &BlockWeights,
    n_heads: usize,
) -> Result<(Array2<f32>, SimilarityFeatures)> {
    check_width(ts.dim(), w, n_heads)?;
    let log_sizes: Option<Vec<f32>> = (!ts.all_unit_sizes()).then(|| ts.sizes.iter().map(|s| s.ln()).collect());
    let (out, keys) = attention_core(ts.tokens.view(), w, n_heads, log_sizes.as_deref());
    Ok((out, SimilarityFeatures { keys }))
}

/// Attention -> merge -> MLP.
pub fn encoder_block(ts: &TokenSequence, w: &BlockWeights, n_heads: usize, cfg: &ToMeConfig) -> Result<TokenSequence> {
    encoder_block_with_plan(ts, w, n_heads, cfg).map(|(ts, _)| ts)
}

/// As [`encoder_block`], also returning the sequence right before and after the merge.
pub fn encoder_block_with_plan(
    ts: &TokenSequence,
    w: &BlockWeights,
    n_heads: usize,
    cfg: &ToMeConfig,
) -> Result<(TokenSequence, BlockTrace)> {
    let (attended, keys) = attention_with_keys(ts, w, n_heads)?;
    let attended = TokenSequence {
        tokens: attended,
        sizes: ts.sizes.clone(),
    };
    let (merged, plan) = merge_step_with_plan(&attended, &keys, cfg)?;
    let tokens = mlp(&merged.tokens, w);
    let out = TokenSequence {
        tokens,
        sizes: merged.sizes.clone(),
    };
    Ok((
        out,
        BlockTrace {
            pre_merge: attended,
            post_merge: merged,
            plan,
        },
    ))
}

/// What happened at one block's merge step.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub pre_merge: TokenSequence,
    pub post_merge: TokenSequence,
    pub plan: MergePlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_embedding: Array1<f32>,
    pub final_token_count: usize,
    /// Token count entering each block, followed by the final count (`depth + 1` entries).
    pub per_block_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub n_heads: usize,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, ts: &TokenSequence, cfg: &ToMeConfig) -> Result<EncoderOutput> {
        self.forward_traced(ts, cfg, |_, _| {})
    }

    /// Runs every block, handing each block's merge trace to `observe`.
    pub fn forward_traced(
        &self,
        ts: &TokenSequence,
        cfg: &ToMeConfig,
        mut observe: impl FnMut(usize, &BlockTrace),
    ) -> Result<EncoderOutput> {
        let mut counts = Vec::with_capacity(self.depth() + 1);
        let mut cur = ts.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            counts.push(cur.len());
            let (next, trace) = encoder_block_with_plan(&cur, block, self.n_heads, cfg)?;
            observe(i, &trace);
            cur = next;
        }
        counts.push(cur.len());
        let normed = self.final_norm.apply(cur.tokens.slice(s![0..1, ..]));
        Ok(EncoderOutput {
            cls_embedding: normed.row(0).to_owned(),
            final_token_count: cur.len(),
            per_block_counts: counts,
        })
    }

    /// Reference encoder with no merge step and no size bookkeeping.
    pub fn forward_without_merging(&self, tokens: &Array2<f32>) -> Result<Array1<f32>> {
        let mut x = tokens.clone();
        for block in &self.blocks {
            check_width(x.ncols(), block, self.n_heads)?;
            let (attended, _) = attention_core(x.view(), block, self.n_heads, None);
            x = mlp(&attended, block);
        }
        Ok(self.final_norm.apply(x.slice(s![0..1, ..])).row(0).to_owned())
    }
}
