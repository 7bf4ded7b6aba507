//! Average precision and mAP for a toy multi-label tagging result.

use ndarray::array;
use tome_ast::head::{average_precision, mean_average_precision, top1_hit_rate};
use tome_ast::Result;

pub fn run_example() -> Result<f64> {
    let ap = average_precision(array![0.9f32, 0.8, 0.7].view(), array![1u8, 0, 1].view());
    println!("AP of (0.9, 0.8, 0.7) with labels (1, 0, 1): {ap:?}");

    let scores = array![[0.9f32, 0.1, 0.3], [0.2, 0.8, 0.7], [0.95, 0.4, 0.1], [0.1, 0.3, 0.9]];
    let labels = array![[1u8, 0, 0], [0, 1, 1], [0, 0, 0], [0, 0, 1]];
    let map = mean_average_precision(&scores, &labels)?;
    println!("mAP {map:.4}, top-1 hit rate {:.2}", top1_hit_rate(&scores, &labels)?);
    Ok(map)
}

fn main() -> Result<()> {
    run_example()?;
    Ok(())
}
