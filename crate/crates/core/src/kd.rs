//! Cross-model distillation loss over student and teacher logits.
//!
//! `loss = λ·L_g(ψ(Z_s), y) + (1 − λ)·L_d(ψ(Z_s), ψ(Z_t / τ))`
//!
//! ψ is softmax for single-label tasks (both terms are cross-entropy) and the
//! elementwise sigmoid for multi-label tasks (both terms are binary
//! cross-entropy). Only the teacher logits are divided by τ, and there is no τ²
//! rescaling. Losses are averaged over the batch, and additionally over classes
//! in the multi-label case. Everything runs in f64.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{sigmoid, softmax};
use crate::transformer::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub lambda: f64,
    pub tau: f64,
    pub task_kind: TaskKind,
}

impl KdConfig {
    pub fn new(task_kind: TaskKind) -> Self {
        Self {
            lambda: 0.1,
            tau: 1.0,
            task_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Single(Vec<usize>),
    /// `[batch, classes]` with entries in [0, 1].
    Multi(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdBatch {
    pub student_logits: Array2<f64>,
    pub teacher_logits: Array2<f64>,
    pub labels: Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLoss {
    pub total: f64,
    pub ground_truth: f64,
    pub distillation: f64,
}

impl KdBatch {
    fn validate(&self, cfg: &KdConfig) -> Result<()> {
        cfg.validate()?;
        let (b, c) = self.student_logits.dim();
        if b == 0 || c == 0 {
            return Err(Error::InvalidInput("empty logit batch".into()));
        }
        if self.teacher_logits.dim() != (b, c) {
            return Err(Error::shape(
                "teacher logits",
                format!("{b}x{c}"),
                format!("{}x{}", self.teacher_logits.nrows(), self.teacher_logits.ncols()),
            ));
        }
        match (&self.labels, cfg.task_kind) {
            (Labels::Single(y), TaskKind::SingleLabel) => {
                if y.len() != b {
                    return Err(Error::shape("labels", b, y.len()));
                }
                if let Some(bad) = y.iter().find(|&&k| k >= c) {
                    return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
                }
            }
            (Labels::Multi(y), TaskKind::MultiLabel) => {
                if y.dim() != (b, c) {
                    return Err(Error::shape("labels", format!("{b}x{c}"), format!("{:?}", y.dim())));
                }
                if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidInput("multi-label targets must lie in [0, 1]".into()));
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "labels do not match task kind {:?}",
                    cfg.task_kind
                )))
            }
        }
        Ok(())
    }
}

fn log_softmax(z: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - lse).collect()
}

/// Binary cross-entropy of `sigmoid(z)` against target `t`, from the logit.
fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - t * z + (-z.abs()).exp().ln_1p()
}

pub fn kd_loss(b: &KdBatch, cfg: &KdConfig) -> Result<KdLoss> {
    b.validate(cfg)?;
    let (n, c) = b.student_logits.dim();
    let (ground_truth, distillation) = match &b.labels {
        Labels::Single(y) => {
            let mut lg = 0.0;
            let mut ld = 0.0;
            for (i, (zs, zt)) in b
                .student_logits
                .axis_iter(Axis(0))
                .zip(b.teacher_logits.axis_iter(Axis(0)))
                .enumerate()
            {
                let log_ps = log_softmax(zs);
                let scaled: Vec<f64> = zt.iter().map(|&v| v / cfg.tau).collect();
                let pt = softmax(&scaled);
                lg -= log_ps[y[i]];
                ld -= pt.iter().zip(&log_ps).map(|(p, l)| p * l).sum::<f64>();
            }
            (lg / n as f64, ld / n as f64)
        }
        Labels::Multi(y) => {
            let mut lg = 0.0;
            let mut ld = 0.0;
            for ((&zs, &zt), &t) in b.student_logits.iter().zip(&b.teacher_logits).zip(y) {
                lg += bce_with_logit(zs, t);
                ld += bce_with_logit(zs, sigmoid(zt / cfg.tau));
            }
            let m = (n * c) as f64;
            (lg / m, ld / m)
        }
    };
    Ok(KdLoss {
        total: cfg.lambda * ground_truth + (1.0 - cfg.lambda) * distillation,
        ground_truth,
        distillation,
    })
}

/// Analytic gradient of [`kd_loss`]'s total with respect to the student logits.
pub fn kd_loss_grad(b: &KdBatch, cfg: &KdConfig) -> Result<Array2<f64>> {
    b.validate(cfg)?;
    let (n, c) = b.student_logits.dim();
    let lambda = cfg.lambda;
    let mut grad = Array2::<f64>::zeros((n, c));
    match &b.labels {
        Labels::Single(y) => {
            for i in 0..n {
                let zs: Vec<f64> = b.student_logits.row(i).to_vec();
                let ps = softmax(&zs);
                let scaled: Vec<f64> = b.teacher_logits.row(i).iter().map(|&v| v / cfg.tau).collect();
                let pt = softmax(&scaled);
                for k in 0..c {
                    let onehot = if k == y[i] { 1.0 } else { 0.0 };
                    grad[[i, k]] = (lambda * (ps[k] - onehot) + (1.0 - lambda) * (ps[k] - pt[k])) / n as f64;
                }
            }
        }
        Labels::Multi(y) => {
            let m = (n * c) as f64;
            for ((g, (&zs, &zt)), &t) in grad
                .iter_mut()
                .zip(b.student_logits.iter().zip(&b.teacher_logits))
                .zip(y)
            {
                let ss = sigmoid(zs);
                *g = (lambda * (ss - t) + (1.0 - lambda) * (ss - sigmoid(zt / cfg.tau))) / m;
            }
        }
    }
    Ok(grad)
}
