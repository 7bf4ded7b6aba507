//! Audio spectrogram transformer inference with token merging.
//!
//! The pipeline turns a waveform (or a stored spectrogram) into overlapping
//! 16x16 patches, embeds them, and runs a pre-norm transformer encoder in which
//! every block merges `r` tokens between its attention and MLP sub-layers. The
//! [CLS] embedding feeds a linear head. Around that sit a distillation loss over
//! student/teacher logits, tagging metrics, binary file formats and a
//! throughput harness that sweeps `r`.
//!
//! Module map:
//! - [`features`]: waveform to log-mel spectrogram
//! - [`patchify`]: patches, patch embedding, positional table, [CLS]
//! - [`tome`]: bipartite soft matching merge step
//! - [`transformer`]: encoder blocks with proportional attention
//! - [`head`]: classifier readout, accuracy and mAP
//! - [`kd`]: distillation loss and its gradient
//! - [`model`]: the assembled classifier
//! - [`model_io`]: MODL1 / SPEC1 / TLOG1 / MANI1 formats and synthetic assets
//! - [`bench`]: inference runs, r sweeps, distillation evaluation

pub mod bench;
pub mod error;
pub mod features;
pub mod head;
pub mod kd;
pub mod model;
pub mod model_io;
pub mod patchify;
pub mod tome;
pub mod transformer;

pub use error::{Error, Result};
pub use model::Model;
pub use patchify::TokenSequence;
pub use tome::ToMeConfig;
pub use transformer::{ModelConfig, TaskKind};
