//! Little-endian binary formats.
//!
//! ```text
//! MCR  "MCR1" u32 height, u32 width, u32 channels (= 11), f32[c·h·w] channel-major
//! MSK  "MSK1" u32 height, u32 width, u8[h·w] row-major, values in {0, 1, 2}
//! PRB  "PRB1" u32 height, u32 width, u32 classes (= 3), f32[3·h·w] channel-major
//! ```

use std::path::Path;

use super::{MaskMap, Patch, NUM_CHANNELS};
use crate::error::{Error, FormatError, Result};
use crate::fusion::{ProbMap, READ_SUM_TOLERANCE};
use crate::nets::NUM_CLASSES;

pub const MCR_MAGIC: &[u8; 4] = b"MCR1";
pub const MSK_MAGIC: &[u8; 4] = b"MSK1";
pub const PRB_MAGIC: &[u8; 4] = b"PRB1";

/// Sequential reader over an in-memory file that reports truncation against
/// the size the header promises.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            expected: usize::MAX,
            actual: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                expected: end,
                actual: self.buf.len(),
            }
            .into());
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    /// Fail with the full expected size if fewer than `n` bytes remain.
    pub fn require(&self, n: usize) -> Result<()> {
        let need = self.pos.saturating_add(n);
        if need > self.buf.len() {
            return Err(FormatError::Truncated {
                expected: need,
                actual: self.buf.len(),
            }
            .into());
        }
        Ok(())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(FormatError::Header("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(FormatError::TrailingBytes(self.remaining()).into());
        }
        Ok(())
    }
}

fn dims(cur: &mut Cursor<'_>) -> Result<(usize, usize)> {
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    if h == 0 || w == 0 {
        return Err(FormatError::Header(format!("zero extent {h}x{w}")).into());
    }
    Ok((h, w))
}

/// Product of `parts` or a header error on overflow.
fn payload(parts: &[usize]) -> Result<usize> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| FormatError::Header(format!("dimensions {parts:?} overflow")).into())
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::from(e).at(path))
}

pub fn encode_patch(p: &Patch) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + p.data().len() * 4);
    out.extend_from_slice(MCR_MAGIC);
    out.extend_from_slice(&(p.height() as u32).to_le_bytes());
    out.extend_from_slice(&(p.width() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_CHANNELS as u32).to_le_bytes());
    push_f32s(&mut out, p.data());
    out
}

pub fn decode_patch(bytes: &[u8], id: &str) -> Result<Patch> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MCR_MAGIC)?;
    let (h, w) = dims(&mut cur)?;
    let c = cur.u32()? as usize;
    if c != NUM_CHANNELS {
        return Err(FormatError::ChannelCount {
            expected: NUM_CHANNELS,
            found: c,
        }
        .into());
    }
    cur.require(payload(&[c, h, w, 4])?)?;
    let data = cur.f32s(c * h * w)?;
    cur.finish()?;
    Patch::new(id, h, w, data)
}

pub fn encode_mask(m: &MaskMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.data().len());
    out.extend_from_slice(MSK_MAGIC);
    out.extend_from_slice(&(m.height() as u32).to_le_bytes());
    out.extend_from_slice(&(m.width() as u32).to_le_bytes());
    out.extend_from_slice(m.data());
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskMap> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MSK_MAGIC)?;
    let (h, w) = dims(&mut cur)?;
    cur.require(payload(&[h, w])?)?;
    let data = cur.take(h * w)?.to_vec();
    cur.finish()?;
    MaskMap::new(h, w, data)
}

pub fn encode_prb(p: &ProbMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + p.data().len() * 4);
    out.extend_from_slice(PRB_MAGIC);
    out.extend_from_slice(&(p.height() as u32).to_le_bytes());
    out.extend_from_slice(&(p.width() as u32).to_le_bytes());
    out.extend_from_slice(&(NUM_CLASSES as u32).to_le_bytes());
    push_f32s(&mut out, p.data());
    out
}

/// Decode and validate that every pixel's probabilities sum to 1 within
/// [`READ_SUM_TOLERANCE`].
pub fn decode_prb(bytes: &[u8]) -> Result<ProbMap> {
    let mut cur = Cursor::new(bytes);
    cur.magic(PRB_MAGIC)?;
    let (h, w) = dims(&mut cur)?;
    let c = cur.u32()? as usize;
    if c != NUM_CLASSES {
        return Err(FormatError::ChannelCount {
            expected: NUM_CLASSES,
            found: c,
        }
        .into());
    }
    cur.require(payload(&[c, h, w, 4])?)?;
    let data = cur.f32s(c * h * w)?;
    cur.finish()?;
    let p = ProbMap::new(h, w, data)?;
    p.check_normalized(READ_SUM_TOLERANCE)?;
    Ok(p)
}

pub fn write_patch(path: impl AsRef<Path>, p: &Patch) -> Result<()> {
    write_file(path.as_ref(), &encode_patch(p))
}

/// The patch id is taken from the file stem.
pub fn read_patch(path: impl AsRef<Path>) -> Result<Patch> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_patch(&read_file(path)?, &id).map_err(|e| e.at(path))
}

pub fn write_mask(path: impl AsRef<Path>, m: &MaskMap) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(m))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskMap> {
    let path = path.as_ref();
    decode_mask(&read_file(path)?).map_err(|e| e.at(path))
}

pub fn write_prb(path: impl AsRef<Path>, p: &ProbMap) -> Result<()> {
    write_file(path.as_ref(), &encode_prb(p))
}

pub fn read_prb(path: impl AsRef<Path>) -> Result<ProbMap> {
    let path = path.as_ref();
    decode_prb(&read_file(path)?).map_err(|e| e.at(path))
}
