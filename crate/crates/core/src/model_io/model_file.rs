use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::binary::{push_f32s, Cursor};
use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::features::SpectrogramConfig;
use crate::head::HeadWeights;
use crate::model::{Model, NormStats};
use crate::patchify::{EmbeddingWeights, PatchConfig};
use crate::transformer::{BlockWeights, Encoder, LayerNorm, ModelConfig};

pub const MODL1_MAGIC: &[u8; 5] = b"MODL1";
pub const MODL1_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// JSON header stored ahead of the tensor payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub model: ModelConfig,
    pub spectrogram: SpectrogramConfig,
    pub patch: PatchConfig,
    pub input_norm: NormStats,
    pub tensors: Vec<TensorInfo>,
}

fn tensor_list(m: &Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    fn mat(name: String, a: &Array2<f32>) -> (String, Vec<usize>, Vec<f32>) {
        (name, a.shape().to_vec(), a.iter().copied().collect())
    }
    fn vec1(name: String, a: &Array1<f32>) -> (String, Vec<usize>, Vec<f32>) {
        (name, vec![a.len()], a.to_vec())
    }
    let e = &m.embedding;
    let mut out = vec![
        mat("patch_embed.projection".into(), &e.projection),
        vec1("patch_embed.bias".into(), &e.projection_bias),
        mat("pos_embed".into(), &e.positional),
        vec1("cls_token".into(), &e.cls_token),
    ];
    for (i, b) in m.encoder.blocks.iter().enumerate() {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            vec1(p("ln1.gain"), &b.ln1.gain),
            vec1(p("ln1.bias"), &b.ln1.bias),
            mat(p("attn.qkv"), &b.qkv),
            vec1(p("attn.qkv_bias"), &b.qkv_bias),
            mat(p("attn.proj"), &b.proj),
            vec1(p("attn.proj_bias"), &b.proj_bias),
            vec1(p("ln2.gain"), &b.ln2.gain),
            vec1(p("ln2.bias"), &b.ln2.bias),
            mat(p("mlp.in"), &b.mlp_in),
            vec1(p("mlp.in_bias"), &b.mlp_in_bias),
            mat(p("mlp.out"), &b.mlp_out),
            vec1(p("mlp.out_bias"), &b.mlp_out_bias),
        ]);
    }
    out.extend([
        vec1("final_norm.gain".into(), &m.encoder.final_norm.gain),
        vec1("final_norm.bias".into(), &m.encoder.final_norm.bias),
        mat("head.linear".into(), &m.head.linear),
        vec1("head.bias".into(), &m.head.bias),
    ]);
    out
}

pub fn encode_model(m: &Model) -> Result<Vec<u8>> {
    m.validate()?;
    let tensors = tensor_list(m);
    let header = ModelHeader {
        model: m.config.clone(),
        spectrogram: m.spectrogram.clone(),
        patch: m.patch,
        input_norm: m.input_norm,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MODL1_MAGIC);
    out.push(MODL1_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in tensors {
        push_f32s(&mut out, data);
    }
    Ok(out)
}

/// Pops tensors in file order, checking each against the name and shape the config implies.
struct TensorReader<'a> {
    infos: std::slice::Iter<'a, TensorInfo>,
    payload: Cursor<'a>,
}

impl TensorReader<'_> {
    fn next(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let info = self.infos.next().ok_or_else(|| Error::Malformed {
            format: "MODL1",
            reason: format!("header ends before tensor {name}"),
        })?;
        if info.name != name || info.shape != shape {
            return Err(Error::shape(
                "MODL1 tensor",
                format!("{name} {shape:?}"),
                format!("{} {:?}", info.name, info.shape),
            ));
        }
        self.payload.f32s(info.numel()).map_err(|_| Error::Malformed {
            format: "MODL1",
            reason: format!("payload ends inside tensor {name}"),
        })
    }

    fn mat(&mut self, name: &str, r: usize, c: usize) -> Result<Array2<f32>> {
        Ok(Array2::from_shape_vec((r, c), self.next(name, &[r, c])?).expect("length checked"))
    }

    fn vec1(&mut self, name: &str, n: usize) -> Result<Array1<f32>> {
        Ok(Array1::from(self.next(name, &[n])?))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.vec1(&format!("{prefix}.gain"), d)?,
            bias: self.vec1(&format!("{prefix}.bias"), d)?,
        })
    }
}

pub fn decode_model(bytes: &[u8], path: &str) -> Result<Model> {
    let mut c = Cursor::new(bytes, "MODL1");
    c.magic(MODL1_MAGIC, path)?;
    let version = c.u8()?;
    if version != MODL1_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "MODL1",
            version,
        });
    }
    let header_len = c.u32()? as usize;
    let header: ModelHeader = serde_json::from_slice(c.take(header_len)?)?;
    let cfg = &header.model;
    cfg.validate()?;
    header.spectrogram.validate()?;
    header.patch.validate()?;

    let declared: usize = header.tensors.iter().map(TensorInfo::numel).sum();
    let remaining = bytes.len() - header_len - 10;
    if declared.checked_mul(4) != Some(remaining) {
        return Err(Error::Malformed {
            format: "MODL1",
            reason: format!(
                "header declares {} tensors with {declared} values but the payload holds {} bytes",
                header.tensors.len(),
                remaining
            ),
        });
    }

    let (d, hidden) = (cfg.embed_dim, cfg.hidden_dim());
    let patch_len = header.patch.patch_len();
    let frames = header.spectrogram.frames_for_duration(cfg.clip_seconds);
    let n = crate::patchify::PatchGrid::for_shape(header.spectrogram.n_mels, frames, &header.patch)?.total();

    let mut r = TensorReader {
        infos: header.tensors.iter(),
        payload: Cursor::new(&bytes[header_len + 10..], "MODL1"),
    };
    let embedding = EmbeddingWeights {
        projection: r.mat("patch_embed.projection", patch_len, d)?,
        projection_bias: r.vec1("patch_embed.bias", d)?,
        positional: r.mat("pos_embed", n + 1, d)?,
        cls_token: r.vec1("cls_token", d)?,
    };
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(BlockWeights {
            ln1: r.norm(&p("ln1"), d)?,
            qkv: r.mat(&p("attn.qkv"), d, 3 * d)?,
            qkv_bias: r.vec1(&p("attn.qkv_bias"), 3 * d)?,
            proj: r.mat(&p("attn.proj"), d, d)?,
            proj_bias: r.vec1(&p("attn.proj_bias"), d)?,
            ln2: r.norm(&p("ln2"), d)?,
            mlp_in: r.mat(&p("mlp.in"), d, hidden)?,
            mlp_in_bias: r.vec1(&p("mlp.in_bias"), hidden)?,
            mlp_out: r.mat(&p("mlp.out"), hidden, d)?,
            mlp_out_bias: r.vec1(&p("mlp.out_bias"), d)?,
        });
    }
    let final_norm = r.norm("final_norm", d)?;
    let head = HeadWeights {
        linear: r.mat("head.linear", d, cfg.n_classes)?,
        bias: r.vec1("head.bias", cfg.n_classes)?,
    };
    if let Some(extra) = r.infos.next() {
        return Err(Error::Malformed {
            format: "MODL1",
            reason: format!("unexpected tensor {}", extra.name),
        });
    }
    r.payload.finish()?;

    let model = Model {
        config: header.model.clone(),
        spectrogram: header.spectrogram,
        patch: header.patch,
        input_norm: header.input_norm,
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

pub fn save_model(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    write_file(path.as_ref(), &encode_model(m)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode_model(&read_file(path)?, &path.display().to_string())
}
