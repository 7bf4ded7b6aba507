//! One bipartite soft matching step on hand-made keys.
//!
//! Tokens 1 and 2 share a key, as do 3 and 4, so with r = 2 those pairs merge
//! into size-2 tokens while [CLS] and token 5 are left alone.

use ndarray::array;
use tome_ast::tome::{merge_step_with_plan, SimilarityFeatures};
use tome_ast::{Result, ToMeConfig, TokenSequence};

pub fn run_example(r: usize) -> Result<TokenSequence> {
    let tokens = array![[9.0f32, 9.0], [1.0, 0.0], [3.0, 0.0], [0.0, 1.0], [0.0, 3.0], [-1.0, -1.0]];
    let keys = array![[0.0f32, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [-1.0, 0.2]];
    let ts = TokenSequence::new(tokens)?;
    let (merged, plan) = merge_step_with_plan(&ts, &SimilarityFeatures { keys }, &ToMeConfig::new(r))?;
    for e in &plan.edges {
        println!("token {} -> token {} (cosine {:.3})", e.src, e.dst, e.similarity);
    }
    for (row, size) in merged.tokens.rows().into_iter().zip(&merged.sizes) {
        println!("{row} size {size}");
    }
    println!("total size {} -> {}", ts.total_size(), merged.total_size());
    Ok(merged)
}

fn main() -> Result<()> {
    run_example(2)?;
    Ok(())
}
