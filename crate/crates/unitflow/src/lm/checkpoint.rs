//! Binary checkpoint formats.
//!
//! Model file: magic "UFLM", version u32, config block (six u32 fields),
//! tensor count u32, then per tensor: name length u32 + UTF-8 name +
//! rows u32 + cols u32 + little-endian f32 data. Adapters use the same
//! tensor framing under the "UFLA" magic with a rank/alpha/layers/dim block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::ops::Mat;
use crate::lm::{LoraAdapters, LoraConfig, Model, ModelConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"UFLM";
pub const ADAPTER_MAGIC: &[u8; 4] = b"UFLA";
pub const FORMAT_VERSION: u32 = 1;

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Mat<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.fail("truncated"))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(self.fail("tensor name too long"));
        }
        let b = self
            .buf
            .get(self.pos..self.pos + len)
            .ok_or_else(|| self.fail("truncated name"))?;
        self.pos += len;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("non-UTF8 tensor name"))
    }

    fn tensor(&mut self) -> Result<(String, Mat<f32>)> {
        let name = self.name()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.fail("tensor shape overflow"))?;
        let bytes = self
            .buf
            .get(self.pos..self.pos + n * 4)
            .ok_or_else(|| self.fail("truncated tensor data"))?;
        self.pos += n * 4;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((name, Mat::from_vec(rows, cols, data)))
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let path = path.as_ref();
    let cfg = &model.cfg;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.layers,
        cfg.model_dim,
        cfg.heads,
        cfg.ffn_dim,
        cfg.max_len,
        cfg.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params {
        put_tensor(&mut buf, &name, m);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if buf.len() < 8 || &buf[0..4] != MODEL_MAGIC {
        return Err(r.fail("bad magic"));
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(&format!("unsupported version {version}")));
    }
    let cfg = ModelConfig {
        layers: r.u32()? as usize,
        model_dim: r.u32()? as usize,
        heads: r.u32()? as usize,
        ffn_dim: r.u32()? as usize,
        max_len: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
    };
    cfg.validate()?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, m) = r.tensor()?;
        tensors.insert(name, m);
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }

    let emb = crate::vocab::EmbeddingMatrix {
        rows: cfg.vocab_size,
        dim: cfg.model_dim,
        values: vec![0.0; cfg.vocab_size * cfg.model_dim],
    };
    let mut model = Model::<f32>::with_embedding(cfg, &emb, 0)?;
    for (name, slot) in model.params_mut() {
        let tensor = tensors.remove(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if tensor.rows != slot.rows || tensor.cols != slot.cols {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "tensor {name} has shape {}x{}, expected {}x{}",
                    tensor.rows, tensor.cols, slot.rows, slot.cols
                ),
            });
        }
        *slot = tensor;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unknown tensor {name}"),
        });
    }
    Ok(model)
}

pub fn save_adapters(path: impl AsRef<Path>, adapters: &LoraAdapters<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(ADAPTER_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(adapters.cfg.rank as u32).to_le_bytes());
    buf.extend_from_slice(&adapters.cfg.alpha.to_le_bytes());
    buf.extend_from_slice(&(adapters.layers.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(adapters.model_dim as u32).to_le_bytes());
    let params = adapters.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params {
        put_tensor(&mut buf, &name, m);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<LoraAdapters<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if buf.len() < 8 || &buf[0..4] != ADAPTER_MAGIC {
        return Err(r.fail("bad magic"));
    }
    r.pos = 4;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(&format!("unsupported version {version}")));
    }
    let rank = r.u32()? as usize;
    let alpha = r.f32()?;
    let layers = r.u32()? as usize;
    let model_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, m) = r.tensor()?;
        tensors.insert(name, m);
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }

    let model_cfg = ModelConfig {
        layers,
        model_dim,
        heads: 1,
        ffn_dim: 1,
        max_len: 1,
        vocab_size: 1,
    };
    let mut adapters =
        LoraAdapters::<f32>::new_seeded(&model_cfg, LoraConfig { rank, alpha }, 0)?;
    for (name, slot) in adapters.params_mut() {
        let tensor = tensors.remove(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if tensor.rows != slot.rows || tensor.cols != slot.cols {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("tensor {name} shape mismatch"),
            });
        }
        *slot = tensor;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("unknown tensor {name}"),
        });
    }
    Ok(adapters)
}
