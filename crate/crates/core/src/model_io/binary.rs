use std::path::Path;

use ndarray::Array2;

use super::{read_file, write_file};
use crate::error::{Error, Result};

pub const SPEC1_MAGIC: &[u8; 5] = b"SPEC1";
pub const TLOG1_MAGIC: &[u8; 5] = b"TLOG1";

/// Little-endian reader over an in-memory file.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self { bytes, pos: 0, format }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Malformed {
            format: self.format,
            reason: format!("truncated: wanted {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 5], path: &str) -> Result<()> {
        let found = self.take(5).map_err(|_| Error::BadMagic {
            path: path.to_string(),
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&self.bytes[..self.bytes.len().min(5)]).into_owned(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                path: path.to_string(),
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed {
            format: self.format,
            reason: format!("element count {n} overflows"),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed {
                format: self.format,
                reason: format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn u32_dim(n: usize, what: &'static str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidInput(format!("{what} {n} does not fit in u32")))
}

fn encode_matrix(magic: &[u8; 5], m: &Array2<f32>, rows: &'static str, cols: &'static str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 4 * m.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&u32_dim(m.nrows(), rows)?.to_le_bytes());
    out.extend_from_slice(&u32_dim(m.ncols(), cols)?.to_le_bytes());
    push_f32s(&mut out, m.iter().copied());
    Ok(out)
}

fn decode_matrix(bytes: &[u8], magic: &[u8; 5], format: &'static str, path: &str) -> Result<Array2<f32>> {
    let mut c = Cursor::new(bytes, format);
    c.magic(magic, path)?;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let values = c.f32s(rows.saturating_mul(cols))?;
    c.finish()?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

/// `[n_mels, n_frames]` spectrogram.
pub fn write_spec1(path: impl AsRef<Path>, values: &Array2<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode_matrix(SPEC1_MAGIC, values, "n_mels", "n_frames")?)
}

pub fn read_spec1(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    decode_matrix(&read_file(path)?, SPEC1_MAGIC, "SPEC1", &path.display().to_string())
}

/// `[n_samples, n_classes]` teacher logits.
pub fn write_tlog1(path: impl AsRef<Path>, logits: &Array2<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode_matrix(TLOG1_MAGIC, logits, "n_samples", "n_classes")?)
}

pub fn read_tlog1(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    decode_matrix(&read_file(path)?, TLOG1_MAGIC, "TLOG1", &path.display().to_string())
}
