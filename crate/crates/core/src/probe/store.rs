//! Binary and CSV persistence for region embeddings.
//!
//! Binary layout (all integers little-endian):
//! magic `HMEB`, u32 version, u32 record count, u32 vector dim, then per
//! record: u32 id byte length, UTF-8 id, i32 label id (−1 = unlabeled),
//! u8 split code (0 train, 1 val, 2 test, 255 none), `dim` f32 values.

use std::path::Path;

use crate::corpus::Split;
use crate::error::{Error, Result};

pub const EMBED_MAGIC: [u8; 4] = *b"HMEB";
pub const EMBED_VERSION: u32 = 1;

const SPLIT_NONE: u8 = 255;

/// One region's frozen-encoder embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
    /// Index into the class list the producer used; `None` = unlabeled.
    pub label: Option<usize>,
    pub split: Option<Split>,
}

fn split_code(split: Option<Split>) -> u8 {
    match split {
        Some(Split::Train) => 0,
        Some(Split::Val) => 1,
        Some(Split::Test) => 2,
        None => SPLIT_NONE,
    }
}

fn split_from_code(code: u8) -> Result<Option<Split>> {
    match code {
        0 => Ok(Some(Split::Train)),
        1 => Ok(Some(Split::Val)),
        2 => Ok(Some(Split::Test)),
        SPLIT_NONE => Ok(None),
        other => Err(Error::Probe(format!("unknown split code {other}"))),
    }
}

/// Writes records to the binary embedding store. Every vector must be finite
/// and exactly `dim` long.
pub fn write_embeddings(records: &[EmbeddingRecord], dim: usize, path: &Path) -> Result<()> {
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "write_embeddings",
                left: vec![r.vector.len()],
                right: vec![dim],
            });
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Probe(format!(
                "embedding '{}' contains a non-finite value",
                r.id
            )));
        }
        if let Some(label) = r.label {
            if label > i32::MAX as usize {
                return Err(Error::Probe(format!(
                    "label id {label} exceeds the storable range"
                )));
            }
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&EMBED_MAGIC);
    buf.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.id.as_bytes());
        let label = r.label.map_or(-1i32, |l| l as i32);
        buf.extend_from_slice(&label.to_le_bytes());
        buf.push(split_code(r.split));
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Probe(format!(
                "embedding store truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads a binary embedding store; returns `(records, dim)`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<EmbeddingRecord>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != EMBED_MAGIC {
        return Err(Error::Probe("embedding store magic mismatch".into()));
    }
    let version = c.u32()?;
    if version != EMBED_VERSION {
        return Err(Error::Probe(format!(
            "embedding store version {version} unsupported (expected {EMBED_VERSION})"
        )));
    }
    let count = c.u32()? as usize;
    let dim = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|e| Error::Probe(format!("embedding id is not UTF-8: {e}")))?
            .to_string();
        let label_raw = c.i32()?;
        let label = if label_raw < 0 {
            None
        } else {
            Some(label_raw as usize)
        };
        let split = split_from_code(c.u8()?)?;
        let mut vector = Vec::with_capacity(dim);
        for chunk in c.take(dim * 4)?.chunks_exact(4) {
            vector.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        records.push(EmbeddingRecord { id, vector, label, split });
    }
    if c.pos != bytes.len() {
        return Err(Error::Probe(format!(
            "embedding store has {} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok((records, dim))
}

/// CSV inspection export: header `id,label,split,e0..e{dim-1}`, shortest
/// round-trip floats, empty fields for missing label/split.
pub fn export_embeddings_csv(records: &[EmbeddingRecord], dim: usize, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["id".to_string(), "label".to_string(), "split".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "export_embeddings_csv",
                left: vec![r.vector.len()],
                right: vec![dim],
            });
        }
        let mut rec = vec![
            r.id.clone(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
            r.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
        ];
        rec.extend(r.vector.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
