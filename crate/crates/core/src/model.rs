//! Full classifier: spectrogram -> patches -> tokens -> encoder -> head.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_log_mel, normalize, SpectrogramConfig, Waveform};
use crate::head::{classify, HeadWeights, Prediction};
use crate::patchify::{add_positional_and_cls, embed_patches, extract_patches, EmbeddingWeights, PatchConfig, TokenSequence};
use crate::tome::ToMeConfig;
use crate::transformer::{BlockTrace, Encoder, EncoderOutput, ModelConfig};

/// Input normalization applied after the log-mel front end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub spectrogram: SpectrogramConfig,
    pub patch: PatchConfig,
    pub input_norm: NormStats,
    pub embedding: EmbeddingWeights,
    pub encoder: Encoder,
    pub head: HeadWeights,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        self.spectrogram.validate()?;
        self.patch.validate()?;
        let d = cfg.embed_dim;
        if self.patch.embed_dim != d {
            return Err(Error::Config(format!(
                "patch embed_dim {} differs from model width {d}",
                self.patch.embed_dim
            )));
        }
        let n = self.n_patches()?;
        let e = &self.embedding;
        let checks = [
            ("patch projection", e.projection.dim(), (self.patch.patch_len(), d)),
            ("positional table", e.positional.dim(), (n + 1, d)),
            ("head", self.head.linear.dim(), (d, cfg.n_classes)),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(Error::shape(what, format!("{expected:?}"), format!("{found:?}")));
            }
        }
        if e.projection_bias.len() != d || e.cls_token.len() != d || self.head.bias.len() != cfg.n_classes {
            return Err(Error::shape("embedding or head bias", d, e.projection_bias.len()));
        }
        if self.encoder.blocks.len() != cfg.depth || self.encoder.n_heads != cfg.n_heads {
            return Err(Error::shape("encoder depth", cfg.depth, self.encoder.blocks.len()));
        }
        for b in &self.encoder.blocks {
            b.check_shapes(d, cfg.hidden_dim())?;
        }
        if self.encoder.final_norm.gain.len() != d || self.encoder.final_norm.bias.len() != d {
            return Err(Error::shape("final norm", d, self.encoder.final_norm.gain.len()));
        }
        Ok(())
    }

    /// Frames in a model-ready spectrogram.
    pub fn expected_frames(&self) -> usize {
        self.spectrogram.frames_for_duration(self.config.clip_seconds)
    }

    /// Patch tokens the positional table is sized for.
    pub fn n_patches(&self) -> Result<usize> {
        let grid = crate::patchify::PatchGrid::for_shape(self.spectrogram.n_mels, self.expected_frames(), &self.patch)?;
        Ok(grid.total())
    }

    /// Log-mel plus normalization with this model's front-end settings.
    pub fn spectrogram_from_waveform(&self, w: &Waveform) -> Result<Array2<f32>> {
        let spec = compute_log_mel(w, &self.spectrogram)?;
        Ok(normalize(&spec, self.input_norm.mean, self.input_norm.std)?.values)
    }

    /// Zero-pads short inputs in time; longer inputs are rejected.
    pub fn fit_input(&self, values: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        let (mels, frames) = values.dim();
        let want = self.expected_frames();
        if mels != self.spectrogram.n_mels {
            return Err(Error::shape("spectrogram mel bins", self.spectrogram.n_mels, mels));
        }
        if frames > want {
            return Err(Error::InvalidInput(format!(
                "clip has {frames} frames but the model takes at most {want}"
            )));
        }
        let mut out = Array2::zeros((mels, want));
        out.slice_mut(s![.., ..frames]).assign(&values);
        Ok(out)
    }

    pub fn tokens(&self, values: ArrayView2<'_, f32>) -> Result<TokenSequence> {
        let input = self.fit_input(values)?;
        let (patches, _) = extract_patches(input.view(), &self.patch)?;
        let embedded = embed_patches(&patches, &self.embedding)?;
        add_positional_and_cls(&embedded, &self.embedding)
    }

    pub fn forward(&self, values: ArrayView2<'_, f32>, tome: &ToMeConfig) -> Result<(Prediction, EncoderOutput)> {
        self.forward_traced(values, tome, |_, _| {})
    }

    pub fn forward_traced(
        &self,
        values: ArrayView2<'_, f32>,
        tome: &ToMeConfig,
        observe: impl FnMut(usize, &BlockTrace),
    ) -> Result<(Prediction, EncoderOutput)> {
        let ts = self.tokens(values)?;
        let out = self.encoder.forward_traced(&ts, tome, observe)?;
        let pred = classify(out.cls_embedding.view(), &self.head, self.config.task_kind)?;
        Ok((pred, out))
    }

    /// Same pipeline through the merge-free reference encoder.
    pub fn forward_without_merging(&self, values: ArrayView2<'_, f32>) -> Result<Prediction> {
        let ts = self.tokens(values)?;
        let cls = self.encoder.forward_without_merging(&ts.tokens)?;
        classify(cls.view(), &self.head, self.config.task_kind)
    }
}
