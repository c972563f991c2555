//! Model checkpoint persistence.
//!
//! Layout (integers little-endian):
//! magic `HMAE`, u32 format version, u32 config length + ViTConfig JSON,
//! u64 training step, u64 RNG seed, u32 tensor count, then per tensor:
//! u32 name length, UTF-8 name, u8 dtype code (0 = f32), u32 rank,
//! u32 dims…, raw little-endian f32 payload. A footer (`EMAH` + u64 total
//! file length) makes truncation detectable. Writes go to a temp file in the
//! same directory, are synced, then renamed into place.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{MaeModel, ViTConfig};

pub const CKPT_MAGIC: [u8; 4] = *b"HMAE";
pub const CKPT_FOOTER: [u8; 4] = *b"EMAH";
pub const CKPT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

/// Everything a checkpoint stores.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
    pub rng_seed: u64,
}

impl Checkpoint {
    /// Rebuilds the model; fails loudly on any name/shape mismatch.
    pub fn into_model(self) -> Result<MaeModel> {
        MaeModel::from_named_tensors(self.config, self.tensors)
    }
}

fn encode(model: &MaeModel, step: u64, rng_seed: u64) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(model.config())?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&rng_seed.to_le_bytes());
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&CKPT_FOOTER);
    let total = buf.len() as u64 + 8;
    buf.extend_from_slice(&total.to_le_bytes());
    Ok(buf)
}

/// Writes a checkpoint atomically (temp file + rename in the target dir).
pub fn save_checkpoint(model: &MaeModel, step: u64, rng_seed: u64, path: &Path) -> Result<()> {
    let bytes = encode(model, step, rng_seed)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint path {path:?} has no file name")))?;
    let tmp_name = format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    );
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        Ok(std::str::from_utf8(self.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("non-UTF-8 string: {e}")))?
            .to_string())
    }
}

/// Reads and fully validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("checkpoint magic mismatch".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} unsupported (expected {CKPT_VERSION})"
        )));
    }
    let cfg_len = c.u32()? as usize;
    let config: ViTConfig = serde_json::from_slice(c.take(cfg_len)?)?;
    config.validate()?;
    let step = c.u64()?;
    let rng_seed = c.u64()?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has unknown dtype code {dtype}"
            )));
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for chunk in c.take(numel * 4)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((name, Tensor::new(data, shape)?));
    }
    if c.take(4)? != CKPT_FOOTER {
        return Err(Error::Checkpoint("checkpoint footer magic mismatch".into()));
    }
    let total = c.u64()?;
    if total != bytes.len() as u64 || c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint length field says {total} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(Checkpoint {
        config,
        tensors,
        step,
        rng_seed,
    })
}

/// Loads a checkpoint and asserts it matches `expected`, then builds the
/// model. Any config difference is an error — weights are never reshaped.
pub fn load_model_expecting(path: &Path, expected: &ViTConfig) -> Result<(MaeModel, u64, u64)> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config {:?} does not match the expected config {:?}",
            ckpt.config, expected
        )));
    }
    let (step, seed) = (ckpt.step, ckpt.rng_seed);
    Ok((ckpt.into_model()?, step, seed))
}
