//! Inference runs, reduction-factor sweeps with throughput timing, and
//! distillation-loss evaluation against stored teacher logits.
//!
//! Timing covers patch extraction, the encoder and the head. Model loading and
//! reading inputs from disk happen once, before any clock starts.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::head::{accuracy, mean_average_precision, top1_hit_rate, Prediction};
use crate::kd::{kd_loss, KdBatch, KdConfig, KdLoss, Labels};
use crate::model::Model;
use crate::model_io::{read_spec1, DatasetManifest, Label};
use crate::tome::ToMeConfig;
use crate::transformer::TaskKind;

/// Reduction factors swept by default: 0, 5, ..., 40.
pub const DEFAULT_R_VALUES: [usize; 9] = [0, 5, 10, 15, 20, 25, 30, 35, 40];
pub const MIN_MEASURED_RUNS: usize = 3;

/// Model-ready inputs with their labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task_kind: TaskKind,
    pub n_classes: usize,
    pub inputs: Vec<Array2<f32>>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Reads every manifest entry. WAV files go through the model's front end;
    /// SPEC1 files are taken as already normalized.
    pub fn load(model: &Model, manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        check_manifest(model, &manifest)?;
        let inputs = manifest
            .entries
            .iter()
            .map(|e| {
                let path = manifest.resolve(manifest_path, e);
                let is_wav = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
                let values = if is_wav {
                    model.spectrogram_from_waveform(&Waveform::read_wav(&path)?)?
                } else {
                    read_spec1(&path)?
                };
                // Validates length up front so timed runs cannot fail on input shape.
                model.fit_input(values.view()).map_err(|err| match err {
                    Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task_kind: manifest.task_kind,
            n_classes: manifest.n_classes,
            inputs,
            labels: manifest.entries.into_iter().map(|e| e.label).collect(),
        })
    }

    pub fn from_parts(model: &Model, inputs: Vec<Array2<f32>>, labels: Vec<Label>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Alignment {
                what: "labels",
                expected: inputs.len(),
                found: labels.len(),
            });
        }
        Ok(Self {
            task_kind: model.config.task_kind,
            n_classes: model.config.n_classes,
            inputs,
            labels,
        })
    }
}

fn check_manifest(model: &Model, m: &DatasetManifest) -> Result<()> {
    if (m.clip_seconds - model.config.clip_seconds).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "manifest clips are {} s but the model expects {} s",
            m.clip_seconds, model.config.clip_seconds
        )));
    }
    if m.task_kind != model.config.task_kind {
        return Err(Error::Config(format!(
            "manifest task {:?} does not match model task {:?}",
            m.task_kind, model.config.task_kind
        )));
    }
    if m.n_classes != model.config.n_classes {
        return Err(Error::Alignment {
            what: "classes",
            expected: model.config.n_classes,
            found: m.n_classes,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Single-label accuracy, or the top-1-is-positive rate for multi-label sets.
    pub accuracy: f64,
    /// Multi-label only.
    pub map: Option<f64>,
}

impl Metrics {
    /// The figure a sweep reports: accuracy, or mAP for multi-label tasks.
    pub fn headline(&self) -> f64 {
        self.map.unwrap_or(self.accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub r: usize,
    pub predictions: Vec<Prediction>,
    pub final_token_counts: Vec<usize>,
    pub metrics: Metrics,
}

impl InferenceReport {
    /// `[samples, classes]` logits in manifest order.
    pub fn logits(&self) -> Array2<f32> {
        let k = self.predictions.first().map_or(0, |p| p.logits.len());
        Array2::from_shape_fn((self.predictions.len(), k), |(i, j)| self.predictions[i].logits[j])
    }
}

impl InferenceReport {
    pub fn summary(&self) -> InferenceSummary {
        InferenceSummary {
            r: self.r,
            metrics: self.metrics,
            predicted_classes: self.predictions.iter().map(Prediction::top_class).collect(),
            final_token_counts: self.final_token_counts.clone(),
        }
    }
}

/// JSON form of a single-r inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub r: usize,
    pub metrics: Metrics,
    pub predicted_classes: Vec<usize>,
    pub final_token_counts: Vec<usize>,
}

pub fn compute_metrics(task: TaskKind, n_classes: usize, predictions: &[Prediction], labels: &[Label]) -> Result<Metrics> {
    match task {
        TaskKind::SingleLabel => {
            let y = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    Label::Multi(_) => Err(Error::Config("multi-label entry in a single-label dataset".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Metrics {
                accuracy: accuracy(predictions, &y)?,
                map: None,
            })
        }
        TaskKind::MultiLabel => {
            let n = predictions.len();
            let scores = Array2::from_shape_fn((n, n_classes), |(i, j)| predictions[i].probabilities[j]);
            let mut y = Array2::<u8>::zeros((n, n_classes));
            for (i, l) in labels.iter().enumerate() {
                match l {
                    Label::Multi(v) if v.len() == n_classes => {
                        for (j, &b) in v.iter().enumerate() {
                            y[[i, j]] = b;
                        }
                    }
                    _ => return Err(Error::Config(format!("label {i} is not a {n_classes}-class indicator"))),
                }
            }
            Ok(Metrics {
                accuracy: top1_hit_rate(&scores, &y)?,
                map: Some(mean_average_precision(&scores, &y)?),
            })
        }
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Forward passes over `inputs`, results in input order regardless of thread count.
fn forward_all(
    model: &Model,
    inputs: &[Array2<f32>],
    tome: &ToMeConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<(Prediction, usize)>> {
    let one = |x: &Array2<f32>| -> Result<(Prediction, usize)> {
        let (p, out) = model.forward(x.view(), tome)?;
        Ok((p, out.final_token_count))
    };
    if pool.current_num_threads() == 1 {
        inputs.iter().map(one).collect()
    } else {
        pool.install(|| inputs.par_iter().map(one).collect())
    }
}

pub fn run_inference(model: &Model, data: &Dataset, r: usize, threads: usize) -> Result<InferenceReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset has no samples".into()));
    }
    let pool = thread_pool(threads)?;
    let results = forward_all(model, &data.inputs, &ToMeConfig::new(r), &pool)?;
    let (predictions, final_token_counts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let metrics = compute_metrics(data.task_kind, data.n_classes, &predictions, &data.labels)?;
    Ok(InferenceReport {
        r,
        predictions,
        final_token_counts,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub r_values: Vec<usize>,
    /// Samples per timed run, taken from the start of the dataset; `None` means all.
    pub batch: Option<usize>,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            r_values: DEFAULT_R_VALUES.to_vec(),
            batch: None,
            warmup_runs: 2,
            measured_runs: MIN_MEASURED_RUNS,
            threads: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_values.is_empty() {
            return Err(Error::Config("r sweep is empty".into()));
        }
        if self.measured_runs < MIN_MEASURED_RUNS {
            return Err(Error::Config(format!(
                "need at least {MIN_MEASURED_RUNS} measured runs, got {}",
                self.measured_runs
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        if self.batch == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Sorted, deduplicated r values, always including 0 as the baseline.
    pub fn sweep_values(&self) -> Vec<usize> {
        let mut r = self.r_values.clone();
        r.push(0);
        r.sort_unstable();
        r.dedup();
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub metric: f64,
    /// `metric − metric(r = 0)`.
    pub drop: f64,
    pub s_per_s: f64,
    pub tokens_final: usize,
    pub thread_count: usize,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    /// Wall-clock seconds of each measured run.
    pub timings_s: Vec<f64>,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: String,
    pub task_kind: TaskKind,
    /// `"accuracy"` or `"mAP"`.
    pub metric_name: String,
    pub n_samples: usize,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Warmup: `warmup_runs` untimed passes over the first batch for each r. Then
/// `max(measured_runs, ceil(n / batch))` timed rounds; round `k` runs every r
/// back to back on batch `k mod n_batches`, so slow drift of the machine lands
/// on all r alike instead of on whichever r happened to run last.
///
/// Every sample is scored inside a timed pass and the metric comes from those
/// predictions. `s_per_s` is the median of the per-pass rates.
pub fn benchmark_throughput(model: &Model, data: &Dataset, cfg: &BenchConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset has no samples".into()));
    }
    let pool = thread_pool(cfg.threads)?;
    let batch_len = cfg.batch.unwrap_or(data.len()).min(data.len());
    let batches: Vec<&[Array2<f32>]> = data.inputs.chunks(batch_len).collect();
    let n_runs = cfg.measured_runs.max(batches.len());
    let r_values = cfg.sweep_values();

    struct Track {
        timings: Vec<f64>,
        rates: Vec<f64>,
        results: Vec<(Prediction, usize)>,
    }
    let mut tracks: Vec<Track> = r_values
        .iter()
        .map(|_| Track {
            timings: Vec::with_capacity(n_runs),
            rates: Vec::with_capacity(n_runs),
            results: Vec::with_capacity(data.len()),
        })
        .collect();
    for &r in &r_values {
        for _ in 0..cfg.warmup_runs {
            forward_all(model, batches[0], &ToMeConfig::new(r), &pool)?;
        }
    }
    for run in 0..n_runs {
        let batch = batches[run % batches.len()];
        for (&r, track) in r_values.iter().zip(&mut tracks) {
            let start = Instant::now();
            let out = forward_all(model, batch, &ToMeConfig::new(r), &pool)?;
            let elapsed = start.elapsed().as_secs_f64();
            track.timings.push(elapsed);
            track.rates.push(batch.len() as f64 / elapsed.max(1e-12));
            if run < batches.len() {
                track.results.extend(out);
            }
        }
    }

    let mut rows: Vec<SweepRow> = Vec::with_capacity(r_values.len());
    for (r, track) in r_values.into_iter().zip(tracks) {
        let tokens_final = track.results[0].1;
        let predictions: Vec<Prediction> = track.results.into_iter().map(|(p, _)| p).collect();
        let metric = compute_metrics(data.task_kind, data.n_classes, &predictions, &data.labels)?.headline();
        let baseline = rows.first().map_or(metric, |row| row.metric);
        rows.push(SweepRow {
            r,
            metric,
            drop: if r == 0 { 0.0 } else { metric - baseline },
            s_per_s: median(&track.rates),
            tokens_final,
            thread_count: cfg.threads,
            warmup_runs: cfg.warmup_runs,
            measured_runs: n_runs,
            timings_s: track.timings,
            batch: batch_len,
        });
    }
    Ok(SweepResult {
        mode: "inf".into(),
        task_kind: data.task_kind,
        metric_name: match data.task_kind {
            TaskKind::SingleLabel => "accuracy".into(),
            TaskKind::MultiLabel => "mAP".into(),
        },
        n_samples: data.len(),
        seed: cfg.seed,
        rows,
    })
}

pub const CSV_HEADER: &str = "r,metric,drop,s_per_s,tokens_final";

impl SweepResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fixed column order; floats use Rust's locale-free formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.r, row.metric, row.drop, row.s_per_s, row.tokens_final
            ));
        }
        out
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:>4}  {:>9}  {:>8}  {:>9}  {:>6}\n", "r", self.metric_name, "drop", "S/s", "tokens");
        for row in &self.rows {
            out.push_str(&format!(
                "{:>4}  {:>9.4}  {:>8.4}  {:>9.2}  {:>6}\n",
                row.r, row.metric, row.drop, row.s_per_s, row.tokens_final
            ));
        }
        out
    }
}

/// Emits the JSON and CSV renderings; fails on an empty sweep.
pub fn sweep_report(result: &SweepResult) -> Result<(String, String)> {
    if result.rows.is_empty() {
        return Err(Error::InvalidInput("sweep has no rows".into()));
    }
    Ok((result.to_json()?, result.to_csv()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdEvalReport {
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub per_batch: Vec<KdLoss>,
    /// Over all samples at once.
    pub mean: KdLoss,
}

fn kd_labels(task: TaskKind, labels: &[Label]) -> Result<Labels> {
    match task {
        TaskKind::SingleLabel => labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => Ok(*c),
                Label::Multi(_) => Err(Error::Config("multi-label entry in a single-label dataset".into())),
            })
            .collect::<Result<Vec<_>>>()
            .map(Labels::Single),
        TaskKind::MultiLabel => {
            let k = labels.first().map_or(0, |l| match l {
                Label::Multi(v) => v.len(),
                Label::Class(_) => 0,
            });
            let mut y = Array2::<f64>::zeros((labels.len(), k));
            for (i, l) in labels.iter().enumerate() {
                match l {
                    Label::Multi(v) if v.len() == k => {
                        for (j, &b) in v.iter().enumerate() {
                            y[[i, j]] = b as f64;
                        }
                    }
                    _ => return Err(Error::Config(format!("label {i} is not a {k}-class indicator"))),
                }
            }
            Ok(Labels::Multi(y))
        }
    }
}

fn slice_labels(labels: &Labels, lo: usize, hi: usize) -> Labels {
    match labels {
        Labels::Single(v) => Labels::Single(v[lo..hi].to_vec()),
        Labels::Multi(m) => Labels::Multi(m.slice(ndarray::s![lo..hi, ..]).to_owned()),
    }
}

/// Distillation loss of the student's logits against teacher logits, per batch
/// of `batch_size` consecutive samples and over the whole set.
pub fn kd_eval(
    student_logits: ArrayView2<'_, f32>,
    teacher_logits: ArrayView2<'_, f32>,
    labels: &[Label],
    cfg: &KdConfig,
    batch_size: usize,
) -> Result<KdEvalReport> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (n, k) = student_logits.dim();
    if teacher_logits.nrows() != n {
        return Err(Error::Alignment {
            what: "teacher logit samples",
            expected: n,
            found: teacher_logits.nrows(),
        });
    }
    if teacher_logits.ncols() != k {
        return Err(Error::Alignment {
            what: "teacher logit classes",
            expected: k,
            found: teacher_logits.ncols(),
        });
    }
    if labels.len() != n {
        return Err(Error::Alignment {
            what: "labels",
            expected: n,
            found: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput("no samples to distill".into()));
    }
    let zs = student_logits.mapv(|v| v as f64);
    let zt = teacher_logits.mapv(|v| v as f64);
    let y = kd_labels(cfg.task_kind, labels)?;
    let mut per_batch = Vec::new();
    for lo in (0..n).step_by(batch_size) {
        let hi = (lo + batch_size).min(n);
        let b = KdBatch {
            student_logits: zs.slice(ndarray::s![lo..hi, ..]).to_owned(),
            teacher_logits: zt.slice(ndarray::s![lo..hi, ..]).to_owned(),
            labels: slice_labels(&y, lo, hi),
        };
        per_batch.push(kd_loss(&b, cfg)?);
    }
    let mean = kd_loss(
        &KdBatch {
            student_logits: zs,
            teacher_logits: zt,
            labels: y,
        },
        cfg,
    )?;
    Ok(KdEvalReport {
        lambda: cfg.lambda,
        tau: cfg.tau,
        batch_size,
        per_batch,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_runs() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn config_checks() {
        let mut cfg = BenchConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.measured_runs = 2;
        assert!(cfg.validate().is_err());
        let cfg = BenchConfig {
            r_values: vec![],
            ..BenchConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = BenchConfig {
            r_values: vec![20, 5, 20],
            ..BenchConfig::default()
        };
        assert_eq!(cfg.sweep_values(), vec![0, 5, 20]);
    }

    #[test]
    fn csv_layout() {
        let result = SweepResult {
            mode: "inf".into(),
            task_kind: TaskKind::SingleLabel,
            metric_name: "accuracy".into(),
            n_samples: 4,
            seed: 1,
            rows: vec![SweepRow {
                r: 0,
                metric: 0.75,
                drop: 0.0,
                s_per_s: 12.5,
                tokens_final: 589,
                thread_count: 1,
                warmup_runs: 2,
                measured_runs: 3,
                timings_s: vec![0.1, 0.1, 0.1],
                batch: 4,
            }],
        };
        assert_eq!(result.to_csv(), "r,metric,drop,s_per_s,tokens_final\n0,0.75,0,12.5,589\n");
        let (json, _) = sweep_report(&result).unwrap();
        assert_eq!(SweepResult::from_json(&json).unwrap(), result);
        let empty = SweepResult { rows: vec![], ..result };
        assert!(sweep_report(&empty).is_err());
    }
}
