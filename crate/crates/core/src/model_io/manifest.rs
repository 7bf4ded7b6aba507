use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::transformer::TaskKind;

pub const MANI1_FORMAT: &str = "MANI1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    /// Binary indicator per class.
    Multi(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// WAV (`.wav`) or SPEC1 file, relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub task_kind: TaskKind,
    pub clip_seconds: f64,
    pub n_classes: usize,
}

/// Ordered dataset listing. Entry order is the alignment order for teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task_kind: TaskKind,
    pub clip_seconds: f64,
    pub n_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            match (&e.label, self.task_kind) {
                (Label::Class(c), TaskKind::SingleLabel) if *c < self.n_classes => {}
                (Label::Multi(v), TaskKind::MultiLabel) if v.len() == self.n_classes && v.iter().all(|&b| b <= 1) => {}
                _ => {
                    return Err(Error::Malformed {
                        format: "MANI1",
                        reason: format!("entry {i} label {:?} does not fit a {:?} task with {} classes", e.label, self.task_kind, self.n_classes),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let header = ManifestHeader {
            format: MANI1_FORMAT.into(),
            task_kind: self.task_kind,
            clip_seconds: self.clip_seconds,
            n_classes: self.n_classes,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?).expect("writing to a String");
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| Error::Malformed {
            format: "MANI1",
            reason: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|_| Error::BadMagic {
            path: path.into(),
            expected: MANI1_FORMAT.into(),
            found: first.chars().take(32).collect(),
        })?;
        if header.format != MANI1_FORMAT {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: MANI1_FORMAT.into(),
                found: header.format,
            });
        }
        let entries = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Malformed {
                    format: "MANI1",
                    reason: format!("entry {i}: {e}"),
                })
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let m = Self {
            task_kind: header.task_kind,
            clip_seconds: header.clip_seconds,
            n_classes: header.n_classes,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Malformed {
            format: "MANI1",
            reason: "not UTF-8".into(),
        })?;
        Self::from_jsonl(&text, &path.display().to_string())
    }

    /// Entry path resolved against the manifest location.
    pub fn resolve(&self, manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}
