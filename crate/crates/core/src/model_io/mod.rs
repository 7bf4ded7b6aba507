//! On-disk formats and deterministic synthetic assets.
//!
//! | format  | layout (little-endian)                                                     |
//! |---------|----------------------------------------------------------------------------|
//! | `SPEC1` | `"SPEC1"`, u32 n_mels, u32 n_frames, f32 values (mel-major)                 |
//! | `TLOG1` | `"TLOG1"`, u32 n_samples, u32 n_classes, f32 logits (row-major)             |
//! | `MODL1` | `"MODL1"`, u8 version, u32 header length, JSON header, f32 tensors in order |
//! | `MANI1` | JSON lines: one header object, then one `{path, label}` object per sample   |

mod binary;
mod manifest;
mod model_file;
mod synth;

pub use binary::{read_spec1, read_tlog1, write_spec1, write_tlog1, SPEC1_MAGIC, TLOG1_MAGIC};
pub use manifest::{DatasetManifest, Label, ManifestEntry, ManifestHeader, MANI1_FORMAT};
pub use model_file::{decode_model, encode_model, load_model, save_model, ModelHeader, TensorInfo, MODL1_MAGIC, MODL1_VERSION};
pub use synth::{
    class_template, fit_template_probe, generate_synthetic_dataset, generate_synthetic_model, SyntheticDataConfig,
    SyntheticDataset,
};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
