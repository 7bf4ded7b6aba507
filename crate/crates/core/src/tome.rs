//! Bipartite soft matching.
//!
//! One merge step: split tokens into alternating sets A and B, link every A token
//! to its most similar B token (cosine over attention keys), keep the `r`
//! strongest links and fold each linked A token into its B partner with a
//! size-weighted mean. Surviving tokens keep their original relative order.
//!
//! With `protect_cls` the [CLS] token (index 0) is always on the B side, so it
//! can absorb merges but is never removed.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchify::TokenSequence;

/// With [CLS] protected, a merge step leaves it plus at least one other token.
pub const MIN_TOKENS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToMeConfig {
    /// Tokens removed per block.
    pub r: usize,
    pub protect_cls: bool,
}

impl ToMeConfig {
    pub fn new(r: usize) -> Self {
        Self { r, protect_cls: true }
    }

    pub fn disabled() -> Self {
        Self::new(0)
    }
}

impl Default for ToMeConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
}

/// Head-averaged attention keys, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityFeatures {
    pub keys: Array2<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEdge {
    /// Token index in the pre-merge sequence (member of A).
    pub src: usize,
    /// Token index in the pre-merge sequence (member of B).
    pub dst: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub n_tokens: usize,
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
    pub edges: Vec<MergeEdge>,
    pub unmerged_a: Vec<usize>,
}

impl MergePlan {
    pub fn empty(n_tokens: usize) -> Self {
        Self {
            n_tokens,
            set_a: Vec::new(),
            set_b: Vec::new(),
            edges: Vec::new(),
            unmerged_a: Vec::new(),
        }
    }
}

/// Alternating split: even indices to A and odd to B, or the reverse when
/// [CLS] is protected so that index 0 lands in B.
pub fn partition(n_tokens: usize, protect_cls: bool) -> Result<Partition> {
    if n_tokens < 2 {
        return Err(Error::InvalidInput(format!(
            "cannot partition {n_tokens} token(s); need at least 2"
        )));
    }
    let a_parity = usize::from(protect_cls);
    let (set_a, set_b) = (0..n_tokens).partition(|i| i % 2 == a_parity);
    Ok(Partition { set_a, set_b })
}

/// How many merges a sequence of `n_tokens` can take in one step: all of A,
/// except that a protected [CLS] is never left on its own.
pub fn merge_capacity(n_tokens: usize, protect_cls: bool) -> usize {
    if n_tokens < 2 {
        return 0;
    }
    if protect_cls {
        (n_tokens / 2).min(n_tokens - MIN_TOKENS)
    } else {
        n_tokens.div_ceil(2)
    }
}

pub fn effective_r(n_tokens: usize, cfg: &ToMeConfig) -> usize {
    cfg.r.min(merge_capacity(n_tokens, cfg.protect_cls))
}

/// Cosine similarity `[|A|, |B|]`. Rows or columns with a zero-norm key are -1.
pub fn score_edges(f: &SimilarityFeatures, parts: &Partition) -> Result<Array2<f64>> {
    let n = f.keys.nrows();
    if let Some(&bad) = parts.set_a.iter().chain(&parts.set_b).find(|&&i| i >= n) {
        return Err(Error::InvalidInput(format!(
            "token index {bad} out of range for {n} key rows"
        )));
    }
    let k = f.keys.ncols();
    let unit_rows = |set: &[usize]| -> (Array2<f64>, Vec<bool>) {
        let mut m = Array2::<f64>::zeros((set.len(), k));
        let mut valid = vec![false; set.len()];
        for (r, &i) in set.iter().enumerate() {
            let row = f.keys.row(i);
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                valid[r] = true;
                m.row_mut(r).iter_mut().zip(row).for_each(|(o, &v)| *o = v as f64 / norm);
            }
        }
        (m, valid)
    };
    let (a, a_ok) = unit_rows(&parts.set_a);
    let (b, b_ok) = unit_rows(&parts.set_b);
    let mut sim = a.dot(&b.t());
    for ((i, j), v) in sim.indexed_iter_mut() {
        if !(a_ok[i] && b_ok[j]) {
            *v = -1.0;
        }
    }
    Ok(sim)
}

/// Keeps each A token's best edge, then the `r` strongest of those.
///
/// Ties resolve toward the lower index on both sides. `r` is clamped to `|A|`.
pub fn select_edges(sim: &Array2<f64>, parts: &Partition, r: usize) -> Result<MergePlan> {
    if sim.dim() != (parts.set_a.len(), parts.set_b.len()) {
        return Err(Error::shape(
            "similarity matrix",
            format!("{}x{}", parts.set_a.len(), parts.set_b.len()),
            format!("{}x{}", sim.nrows(), sim.ncols()),
        ));
    }
    let n_tokens = parts.set_a.len() + parts.set_b.len();
    let mut best: Vec<(usize, usize, f64)> = sim
        .axis_iter(Axis(0))
        .enumerate()
        .filter_map(|(ai, row)| {
            row.iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (bj, &v)| match acc {
                    Some((_, m)) if m >= v => acc,
                    _ => Some((bj, v)),
                })
                .map(|(bj, v)| (ai, bj, v))
        })
        .collect();
    // Stable sort keeps lower A positions first among equal similarities.
    best.sort_by(|x, y| y.2.total_cmp(&x.2));
    let k = r.min(best.len());
    let mut merged = vec![false; parts.set_a.len()];
    let edges = best[..k]
        .iter()
        .map(|&(ai, bj, s)| {
            merged[ai] = true;
            MergeEdge {
                src: parts.set_a[ai],
                dst: parts.set_b[bj],
                similarity: s,
            }
        })
        .collect();
    let unmerged_a = parts
        .set_a
        .iter()
        .zip(&merged)
        .filter(|(_, m)| !**m)
        .map(|(&i, _)| i)
        .collect();
    Ok(MergePlan {
        n_tokens,
        set_a: parts.set_a.clone(),
        set_b: parts.set_b.clone(),
        edges,
        unmerged_a,
    })
}

/// Folds every edge source into its destination and drops the sources.
pub fn apply_merge(ts: &TokenSequence, plan: &MergePlan) -> Result<TokenSequence> {
    if plan.edges.is_empty() {
        return Ok(ts.clone());
    }
    let n = ts.len();
    if plan.n_tokens != n {
        return Err(Error::InvalidInput(format!(
            "merge plan built for {} tokens applied to {n}",
            plan.n_tokens
        )));
    }
    let d = ts.dim();
    let mut removed = vec![false; n];
    // Per destination: (weighted sum, total size).
    let mut acc: Vec<Option<(Vec<f64>, f64)>> = vec![None; n];
    for e in &plan.edges {
        if e.src >= n || e.dst >= n || e.src == e.dst {
            return Err(Error::InvalidInput(format!(
                "merge edge {} -> {} invalid for {n} tokens",
                e.src, e.dst
            )));
        }
        if removed[e.src] || removed[e.dst] || acc[e.src].is_some() {
            return Err(Error::InvalidInput(format!(
                "edge {} -> {} reuses a source or mixes source and destination roles",
                e.src, e.dst
            )));
        }
        removed[e.src] = true;
        let slot = acc[e.dst].get_or_insert_with(|| {
            let s = ts.sizes[e.dst] as f64;
            (ts.tokens.row(e.dst).iter().map(|&v| s * v as f64).collect(), s)
        });
        let s = ts.sizes[e.src] as f64;
        for (a, &v) in slot.0.iter_mut().zip(ts.tokens.row(e.src)) {
            *a += s * v as f64;
        }
        slot.1 += s;
    }

    let keep = n - plan.edges.len();
    let mut tokens = Array2::<f32>::zeros((keep, d));
    let mut sizes = Vec::with_capacity(keep);
    let mut out = 0;
    for i in (0..n).filter(|&i| !removed[i]) {
        match &acc[i] {
            Some((sum, size)) => {
                for (dst, v) in tokens.row_mut(out).iter_mut().zip(sum) {
                    *dst = (v / size) as f32;
                }
                sizes.push(*size as f32);
            }
            None => {
                tokens.row_mut(out).assign(&ts.tokens.row(i));
                sizes.push(ts.sizes[i]);
            }
        }
        out += 1;
    }
    TokenSequence::with_sizes(tokens, sizes)
}

/// Builds the plan for one merge step (empty when the effective `r` is zero).
pub fn plan_merge(f: &SimilarityFeatures, cfg: &ToMeConfig) -> Result<MergePlan> {
    let n = f.keys.nrows();
    let r = effective_r(n, cfg);
    if r == 0 {
        return Ok(MergePlan::empty(n));
    }
    let parts = partition(n, cfg.protect_cls)?;
    let sim = score_edges(f, &parts)?;
    select_edges(&sim, &parts, r)
}

pub fn merge_step(ts: &TokenSequence, f: &SimilarityFeatures, cfg: &ToMeConfig) -> Result<TokenSequence> {
    merge_step_with_plan(ts, f, cfg).map(|(ts, _)| ts)
}

pub fn merge_step_with_plan(
    ts: &TokenSequence,
    f: &SimilarityFeatures,
    cfg: &ToMeConfig,
) -> Result<(TokenSequence, MergePlan)> {
    if f.keys.nrows() != ts.len() {
        return Err(Error::shape("similarity features rows", ts.len(), f.keys.nrows()));
    }
    let plan = plan_merge(f, cfg)?;
    let merged = apply_merge(ts, &plan)?;
    Ok((merged, plan))
}
