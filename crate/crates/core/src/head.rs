//! Linear readout over the [CLS] embedding and the evaluation metrics.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::transformer::TaskKind;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `[d, n_classes]`
    pub linear: Array2<f32>,
    pub bias: Array1<f32>,
}

impl HeadWeights {
    pub fn n_classes(&self) -> usize {
        self.linear.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Array1<f32>,
    pub probabilities: Array1<f32>,
    pub task_kind: TaskKind,
}

impl Prediction {
    /// Highest-probability class; ties go to the lowest index.
    pub fn top_class(&self) -> usize {
        argmax(self.probabilities.view())
    }
}

pub(crate) fn argmax(v: ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax in f64.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn classify(cls: ArrayView1<'_, f32>, w: &HeadWeights, task: TaskKind) -> Result<Prediction> {
    if cls.len() != w.linear.nrows() || w.bias.len() != w.linear.ncols() {
        return Err(Error::shape(
            "classifier head",
            format!("[{}] -> [{}]", w.linear.nrows(), w.linear.ncols()),
            format!("[{}] with bias [{}]", cls.len(), w.bias.len()),
        ));
    }
    let logits = cls.dot(&w.linear) + &w.bias;
    let wide: Vec<f64> = logits.iter().map(|&l| l as f64).collect();
    let probs: Vec<f32> = match task {
        TaskKind::SingleLabel => softmax(&wide).into_iter().map(|p| p as f32).collect(),
        TaskKind::MultiLabel => wide.iter().map(|&l| sigmoid(l) as f32).collect(),
    };
    Ok(Prediction {
        logits,
        probabilities: Array1::from(probs),
        task_kind: task,
    })
}

/// Fraction of predictions whose top class equals the label.
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("accuracy over zero samples".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Alignment {
            what: "labels",
            expected: predictions.len(),
            found: labels.len(),
        });
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.top_class() == y)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Multi-label "accuracy": the top class is one of the sample's positives.
///
/// Not a standard audio-tagging metric; reported next to mAP for completeness.
pub fn top1_hit_rate(scores: &Array2<f32>, labels: &Array2<u8>) -> Result<f64> {
    if scores.dim() != labels.dim() {
        return Err(Error::shape("label matrix", format!("{:?}", scores.dim()), format!("{:?}", labels.dim())));
    }
    if scores.nrows() == 0 {
        return Err(Error::InvalidInput("accuracy over zero samples".into()));
    }
    let hits = scores
        .rows()
        .into_iter()
        .zip(labels.rows())
        .filter(|(s, y)| y[argmax(*s)] != 0)
        .count();
    Ok(hits as f64 / scores.nrows() as f64)
}

/// Average precision of one class: mean precision at the rank of each positive.
///
/// Ranking is by descending score with ties broken by lower sample index.
/// Returns `None` when the class has no positives.
pub fn average_precision(scores: ArrayView1<'_, f32>, labels: ArrayView1<'_, u8>) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut positives = 0usize;
    let mut sum = 0.0;
    // Exact running sum of precisions while it fits, so small cases round once.
    let mut exact = Some((0u128, 1u128));
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            positives += 1;
            sum += positives as f64 / (rank + 1) as f64;
            exact = exact.and_then(|(num, den)| add_fraction(num, den, positives as u128, rank as u128 + 1));
        }
    }
    if positives == 0 {
        return None;
    }
    const F64_EXACT: u128 = 1 << 53;
    match exact.and_then(|(num, den)| Some((num, den.checked_mul(positives as u128)?))) {
        Some((num, den)) if num < F64_EXACT && den < F64_EXACT => Some(num as f64 / den as f64),
        _ => Some(sum / positives as f64),
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `num/den + p/q` in lowest terms, or `None` on overflow.
fn add_fraction(num: u128, den: u128, p: u128, q: u128) -> Option<(u128, u128)> {
    let g = gcd(den, q);
    let l = (den / g).checked_mul(q)?;
    let n = num.checked_mul(l / den)?.checked_add(p.checked_mul(l / q)?)?;
    let h = gcd(n, l).max(1);
    Some((n / h, l / h))
}

/// Mean of per-class AP over classes that have at least one positive.
pub fn mean_average_precision(scores: &Array2<f32>, labels: &Array2<u8>) -> Result<f64> {
    if scores.dim() != labels.dim() {
        return Err(Error::shape("label matrix", format!("{:?}", scores.dim()), format!("{:?}", labels.dim())));
    }
    let aps: Vec<f64> = scores
        .columns()
        .into_iter()
        .zip(labels.columns())
        .filter_map(|(s, y)| average_precision(s, y))
        .collect();
    if aps.is_empty() {
        return Err(Error::InvalidInput("no class has a positive label".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn pred(probs: Vec<f32>) -> Prediction {
        Prediction {
            logits: Array1::from(probs.clone()),
            probabilities: Array1::from(probs),
            task_kind: TaskKind::SingleLabel,
        }
    }

    #[test]
    fn classify_closed_forms() {
        let w = HeadWeights {
            linear: Array2::zeros((3, 4)),
            bias: Array1::zeros(4),
        };
        let cls = Array1::from(vec![1.0f32, -2.0, 0.5]);
        let p = classify(cls.view(), &w, TaskKind::SingleLabel).unwrap();
        assert!(p.probabilities.iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let p = classify(cls.view(), &w, TaskKind::MultiLabel).unwrap();
        assert!(p.probabilities.iter().all(|&v| v == 0.5));

        let w = HeadWeights {
            linear: Array2::zeros((1, 2)),
            bias: array![2f32.ln(), 0.0],
        };
        let p = classify(array![0.0f32].view(), &w, TaskKind::SingleLabel).unwrap();
        assert!((p.probabilities[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.probabilities[1] - 1.0 / 3.0).abs() < 1e-6);

        assert!(classify(array![0.0f32, 1.0].view(), &w, TaskKind::SingleLabel).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn accuracy_cases() {
        let preds = vec![pred(vec![0.9, 0.1]), pred(vec![0.2, 0.8]), pred(vec![0.6, 0.4]), pred(vec![0.5, 0.5])];
        assert_eq!(accuracy(&preds, &[0, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&preds, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&preds, &[0, 1, 1, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&preds, &[0]).is_err());
    }

    #[test]
    fn ap_hand_case() {
        let ap = average_precision(array![0.9f32, 0.8, 0.7].view(), array![1u8, 0, 1].view()).unwrap();
        assert_eq!(ap, 5.0 / 6.0);
        let all = average_precision(array![0.1f32, 0.5, 0.3].view(), array![1u8, 1, 1].view()).unwrap();
        assert_eq!(all, 1.0);
        assert_eq!(average_precision(array![0.1f32].view(), array![0u8].view()), None);
    }

    #[test]
    fn long_rankings_fall_back_to_floating_sum() {
        // Alternating labels: precision at the k-th positive is k / (2k - 1).
        let n = 400;
        let scores = Array1::from_shape_fn(n, |i| (n - i) as f32);
        let labels = Array1::from_shape_fn(n, |i| u8::from(i % 2 == 0));
        let want = (1..=n / 2).map(|k| k as f64 / (2 * k - 1) as f64).sum::<f64>() / (n / 2) as f64;
        let ap = average_precision(scores.view(), labels.view()).unwrap();
        assert!((ap - want).abs() < 1e-12);
    }

    #[test]
    fn map_cases() {
        let scores = array![[0.9f32, 0.1], [0.8, 0.7], [0.1, 0.9]];
        let labels = array![[1u8, 0], [1, 0], [0, 1]];
        assert_eq!(mean_average_precision(&scores, &labels).unwrap(), 1.0);
        // Class 1 has no positives and is skipped.
        let labels = array![[1u8, 0], [0, 0], [1, 0]];
        let expected = 5.0 / 6.0;
        assert_eq!(mean_average_precision(&scores, &labels).unwrap(), expected);
        assert!(mean_average_precision(&scores, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn hit_rate() {
        let scores = array![[0.9f32, 0.1], [0.2, 0.7]];
        assert_eq!(top1_hit_rate(&scores, &array![[1u8, 1], [1, 0]]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-30.0f32..30.0, 1..50)) {
            let d = logits.len();
            let w = HeadWeights { linear: Array2::zeros((1, d)), bias: Array1::from(logits) };
            let p = classify(array![0.0f32].view(), &w, TaskKind::SingleLabel).unwrap();
            let sum: f64 = p.probabilities.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.probabilities.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn ap_invariant_under_monotone_maps(
            scores in prop::collection::vec(-5.0f32..5.0, 2..40),
            labels_seed in prop::collection::vec(any::<bool>(), 40),
        ) {
            let n = scores.len();
            let mut labels: Vec<u8> = labels_seed[..n].iter().map(|&b| b as u8).collect();
            labels[0] = 1;
            let s = Array1::from(scores);
            let y = Array1::from(labels);
            let a = average_precision(s.view(), y.view()).unwrap();
            let mapped = s.mapv(|v| (v * 0.5).exp() + 3.0);
            let b = average_precision(mapped.view(), y.view()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn accuracy_permutation_invariant(
            rows in prop::collection::vec((prop::collection::vec(0.0f32..1.0, 3), 0usize..3), 1..30),
            rot in 0usize..30,
        ) {
            let preds: Vec<Prediction> = rows.iter().map(|(p, _)| pred(p.clone())).collect();
            let labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
            let a = accuracy(&preds, &labels).unwrap();
            let k = rot % preds.len();
            let mut p2 = preds.clone();
            let mut l2 = labels.clone();
            p2.rotate_left(k);
            l2.rotate_left(k);
            p2.reverse();
            l2.reverse();
            prop_assert_eq!(a, accuracy(&p2, &l2).unwrap());
        }
    }
}
