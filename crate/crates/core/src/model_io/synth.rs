//! Seeded synthetic models and datasets.
//!
//! All randomness comes from ChaCha8 keyed by the caller's seed. Each tensor
//! (in file order) and each dataset sample gets its own ChaCha stream, so a
//! value depends only on `(seed, stream, position)` and never on platform,
//! thread count or generation order.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{write_spec1, DatasetManifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::SpectrogramConfig;
use crate::head::HeadWeights;
use crate::model::{Model, NormStats};
use crate::patchify::{EmbeddingWeights, PatchConfig, PatchGrid};
use crate::tome::ToMeConfig;
use crate::transformer::{BlockWeights, Encoder, LayerNorm, ModelConfig, TaskKind};

struct Streams {
    seed: u64,
    next: u64,
    scale: f32,
}

impl Streams {
    fn draw(&mut self, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.next);
        self.next += 1;
        (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * self.scale
            })
            .collect()
    }

    fn mat(&mut self, r: usize, c: usize) -> Array2<f32> {
        Array2::from_shape_vec((r, c), self.draw(r * c)).expect("sized draw")
    }

    fn vec1(&mut self, n: usize) -> Array1<f32> {
        Array1::from(self.draw(n))
    }

    fn norm(&mut self, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.vec1(d) + 1.0,
            bias: self.vec1(d),
        }
    }
}

/// Random model with every tensor drawn from `N(0, 1) / sqrt(d)`.
///
/// Layer-norm gains are offset by 1. Uses the default front end (128 mel bins,
/// 100 frames/s) and 16x16 patches with stride 10.
pub fn generate_synthetic_model(seed: u64, cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let spectrogram = SpectrogramConfig::default();
    let patch = PatchConfig::new(cfg.embed_dim);
    let frames = spectrogram.frames_for_duration(cfg.clip_seconds);
    let n = PatchGrid::for_shape(spectrogram.n_mels, frames, &patch)?.total();
    let (d, hidden) = (cfg.embed_dim, cfg.hidden_dim());
    let mut s = Streams {
        seed,
        next: 0,
        scale: 1.0 / (d as f32).sqrt(),
    };
    // Draw order must follow the MODL1 tensor order.
    let embedding = EmbeddingWeights {
        projection: s.mat(patch.patch_len(), d),
        projection_bias: s.vec1(d),
        positional: s.mat(n + 1, d),
        cls_token: s.vec1(d),
    };
    let blocks = (0..cfg.depth)
        .map(|_| BlockWeights {
            ln1: s.norm(d),
            qkv: s.mat(d, 3 * d),
            qkv_bias: s.vec1(3 * d),
            proj: s.mat(d, d),
            proj_bias: s.vec1(d),
            ln2: s.norm(d),
            mlp_in: s.mat(d, hidden),
            mlp_in_bias: s.vec1(hidden),
            mlp_out: s.mat(hidden, d),
            mlp_out_bias: s.vec1(d),
        })
        .collect();
    let final_norm = s.norm(d);
    let head = HeadWeights {
        linear: s.mat(d, cfg.n_classes),
        bias: s.vec1(cfg.n_classes),
    };
    let model = Model {
        config: cfg.clone(),
        spectrogram,
        patch,
        input_norm: NormStats::default(),
        embedding,
        encoder: Encoder {
            n_heads: cfg.n_heads,
            blocks,
            final_norm,
        },
        head,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataConfig {
    pub n_classes: usize,
    pub n_mels: usize,
    pub clip_seconds: f64,
    pub task_kind: TaskKind,
    /// Peak height of a class template.
    pub amplitude: f32,
    pub noise_std: f32,
}

impl SyntheticDataConfig {
    pub fn new(n_classes: usize, clip_seconds: f64, task_kind: TaskKind) -> Self {
        Self {
            n_classes,
            n_mels: 128,
            clip_seconds,
            task_kind,
            amplitude: 2.0,
            noise_std: 1.0,
        }
    }

    pub fn n_frames(&self) -> usize {
        SpectrogramConfig::default().frames_for_duration(self.clip_seconds)
    }
}

/// Noise-free pattern for one class: a spectral comb whose period in mel bins
/// is class-specific, under a slow loudness envelope.
///
/// Periods spread over 3..16 bins so that every 16x16 patch carries the class
/// texture, much as real sound classes differ in local spectral structure.
pub fn class_template(cfg: &SyntheticDataConfig, class: usize) -> Array2<f32> {
    use std::f64::consts::PI;
    let period = 3.0 + 13.0 * class as f64 / cfg.n_classes as f64;
    let frames = cfg.n_frames();
    let env_period = 20.0 + 10.0 * (class % 3) as f64;
    Array2::from_shape_fn((cfg.n_mels, frames), |(m, t)| {
        let comb = 0.5 + 0.5 * (2.0 * PI * m as f64 / period).cos();
        let env = 0.75 + 0.25 * (2.0 * PI * t as f64 / env_period).cos();
        (cfg.amplitude as f64 * comb * env) as f32
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticDataConfig,
    pub spectrograms: Vec<Array2<f32>>,
    pub labels: Vec<Label>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.spectrograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrograms.is_empty()
    }

    /// Class indices; panics on a multi-label set.
    pub fn class_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => *c,
                Label::Multi(_) => panic!("class_labels on a multi-label dataset"),
            })
            .collect()
    }

    /// Writes one SPEC1 per sample plus `manifest.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (spec, label)) in self.spectrograms.iter().zip(&self.labels).enumerate() {
            let name = format!("sample_{i:05}.spec");
            write_spec1(dir.join(&name), spec)?;
            entries.push(ManifestEntry {
                path: name,
                label: label.clone(),
            });
        }
        let manifest = DatasetManifest {
            task_kind: self.config.task_kind,
            clip_seconds: self.config.clip_seconds,
            n_classes: self.config.n_classes,
            entries,
        };
        manifest.save(dir.join("manifest.jsonl"))?;
        Ok(manifest)
    }
}

fn sample_classes(cfg: &SyntheticDataConfig, i: usize) -> Vec<usize> {
    let primary = i % cfg.n_classes;
    match cfg.task_kind {
        TaskKind::SingleLabel => vec![primary],
        TaskKind::MultiLabel => {
            let second = (i * 7 + 3) % cfg.n_classes;
            if i % 3 == 0 && second != primary {
                vec![primary, second]
            } else {
                vec![primary]
            }
        }
    }
}

/// Sample `i` has class `i % n_classes` (multi-label sets add a second class to
/// every third sample) and noise from stream `i` of the seed.
pub fn generate_synthetic_dataset(seed: u64, n_samples: usize, cfg: &SyntheticDataConfig) -> Result<SyntheticDataset> {
    if cfg.n_classes == 0 || cfg.n_mels == 0 {
        return Err(Error::Config("synthetic data needs classes and mel bins".into()));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be non-negative".into()));
    }
    let templates: Vec<Array2<f32>> = (0..cfg.n_classes).map(|c| class_template(cfg, c)).collect();
    let mut spectrograms = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let classes = sample_classes(cfg, i);
        let mut spec = Array2::<f32>::zeros(templates[0].dim());
        for &c in &classes {
            spec += &templates[c];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for v in spec.iter_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v += cfg.noise_std * z;
        }
        spectrograms.push(spec);
        labels.push(match cfg.task_kind {
            TaskKind::SingleLabel => Label::Class(classes[0]),
            TaskKind::MultiLabel => {
                let mut v = vec![0u8; cfg.n_classes];
                for c in classes {
                    v[c] = 1;
                }
                Label::Multi(v)
            }
        });
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        spectrograms,
        labels,
    })
}

/// Replaces the head with a nearest-centroid probe over merge-free [CLS] embeddings.
///
/// With `μ_c` the mean embedding of examples labelled `c`, single-label logit `c` is
/// `x·μ_c − |μ_c|²/2`, so the argmax is the nearest centroid. Multi-label logit `c`
/// is `x·(μ_c − ν_c) − (|μ_c|² − |ν_c|²)/2` with `ν_c` the mean of the examples
/// without `c`: positive exactly when `x` is nearer `μ_c` than `ν_c`.
pub fn fit_template_probe(model: &mut Model, spectrograms: &[Array2<f32>], labels: &[Label]) -> Result<()> {
    if spectrograms.len() != labels.len() {
        return Err(Error::Alignment {
            what: "probe labels",
            expected: spectrograms.len(),
            found: labels.len(),
        });
    }
    let (d, k) = (model.config.embed_dim, model.config.n_classes);
    let mut pos = vec![(vec![0.0f64; d], 0usize); k];
    let mut neg = vec![(vec![0.0f64; d], 0usize); k];
    for (spec, label) in spectrograms.iter().zip(labels) {
        let ts = model.tokens(spec.view())?;
        let x = model.encoder.forward(&ts, &ToMeConfig::disabled())?.cls_embedding;
        let positive = |c: usize| match label {
            Label::Class(y) => *y == c,
            Label::Multi(v) => v.get(c).copied().unwrap_or(0) != 0,
        };
        for c in 0..k {
            let slot = if positive(c) { &mut pos[c] } else { &mut neg[c] };
            for (a, &v) in slot.0.iter_mut().zip(x.iter()) {
                *a += v as f64;
            }
            slot.1 += 1;
        }
    }
    let mean = |(sum, n): &(Vec<f64>, usize)| -> Vec<f64> { sum.iter().map(|v| v / (*n).max(1) as f64).collect() };
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut linear = Array2::<f32>::zeros((d, k));
    let mut bias = Array1::<f32>::zeros(k);
    for c in 0..k {
        if pos[c].1 == 0 || neg[c].1 == 0 {
            return Err(Error::InvalidInput(format!("class {c} needs examples with and without it")));
        }
        let mp = mean(&pos[c]);
        let mn = match model.config.task_kind {
            TaskKind::SingleLabel => vec![0.0; d],
            TaskKind::MultiLabel => mean(&neg[c]),
        };
        for j in 0..d {
            linear[[j, c]] = (mp[j] - mn[j]) as f32;
        }
        bias[c] = (-0.5 * (sq(&mp) - sq(&mn))) as f32;
    }
    model.head = HeadWeights { linear, bias };
    Ok(())
}
