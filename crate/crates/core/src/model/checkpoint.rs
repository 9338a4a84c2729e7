//! Versioned binary checkpoint.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `SEQSLPCK` | 8 bytes |
//! | format version (= 1) | u32 |
//! | model config as JSON | u32 length, UTF-8 bytes |
//! | originating seed | u64 |
//! | tensor count | u32 |
//! | per tensor: kind (0 parameter, 1 buffer), name, rank, dims, values | u8, u16 length + UTF-8, u8, rank × u32, f32 × product(dims) |
//!
//! Values are stored as 32-bit floats; writing a checkpoint that was just
//! read reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use seqsleep_autodiff::Tensor;

use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEQSLPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.params, self.seed)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = fs::File::open(path)
            .map_err(|e| ModelError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        read_checkpoint(std::io::BufReader::new(file))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.params, self.seed).expect("writing to memory");
        buf
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, seed: u64) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&params.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&((params.tensors.len() + params.buffers.len()) as u32).to_le_bytes());
    for (kind, map) in [(0u8, &params.tensors), (1u8, &params.buffers)] {
        for (name, t) in map {
            buf.push(kind);
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }
    let len = c.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let seed = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..count {
        let kind = c.take(1)?[0];
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = c.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::try_new(dims, data)
            .ok_or_else(|| ModelError::Checkpoint(format!("tensor `{name}` has an empty dimension")))?;
        match kind {
            0 => tensors.insert(name, t),
            1 => buffers.insert(name, t),
            k => return Err(ModelError::Checkpoint(format!("unknown tensor kind {k}"))),
        };
    }
    if c.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let params = ModelParams { config, tensors, buffers };
    params.check_layout()?;
    Ok(Checkpoint { params, seed })
}
