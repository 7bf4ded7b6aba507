//! Distillation loss and its gradient for a small single-label batch.

use ndarray::array;
use tome_ast::kd::{kd_loss, kd_loss_grad, KdBatch, KdConfig, KdLoss, Labels};
use tome_ast::{Result, TaskKind};

pub fn run_example(lambda: f64, tau: f64) -> Result<KdLoss> {
    let batch = KdBatch {
        student_logits: array![[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]],
        teacher_logits: array![[3.0, 1.0, -2.0], [-1.0, 2.0, 0.0]],
        labels: Labels::Single(vec![0, 2]),
    };
    let cfg = KdConfig {
        lambda,
        tau,
        task_kind: TaskKind::SingleLabel,
    };
    let loss = kd_loss(&batch, &cfg)?;
    println!(
        "lambda={lambda} tau={tau}: Loss={:.5} Loss_g={:.5} Loss_d={:.5}",
        loss.total, loss.ground_truth, loss.distillation
    );
    println!("dLoss/dz_s =\n{:.5}", kd_loss_grad(&batch, &cfg)?);
    Ok(loss)
}

fn main() -> Result<()> {
    run_example(0.1, 1.0)?;
    run_example(0.5, 2.0)?;
    Ok(())
}
