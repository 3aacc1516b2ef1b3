//! Checkpoint files.
//!
//! Layout, all little-endian: magic `SLCK`, `u32` version, `u64` config
//! hash, then one record per parameter until end of file: `u16` name
//! length, name bytes, `u8` rank, `u32` per extent, `f64` values.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Next `n` bytes and their offset.
    fn take(&mut self, n: usize, what: &str) -> Result<(u64, &'a [u8])> {
        let start = self.pos;
        let s = self.bytes.get(start..start + n).ok_or_else(|| Error::format(start as u64, format!("truncated {what}")))?;
        self.pos += n;
        Ok((start as u64, s))
    }
}

pub fn encode_checkpoint(model: &Model<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().hash().to_le_bytes());
    for (_, p) in model.params.iter() {
        let name = u16::try_from(p.name.len()).map_err(|_| Error::Config(format!("parameter name {} too long", p.name)))?;
        let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Config(format!("parameter {} has too many axes", p.name)))?;
        out.extend_from_slice(&name.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(rank);
        for &e in p.value.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Config(format!("parameter {} extent too large", p.name)))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds the model for `config` and overwrites every parameter from `bytes`.
pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Model<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    match bytes.get(..4) {
        None => return Err(Error::format(0, "missing magic")),
        Some(m) if m != CHECKPOINT_MAGIC => return Err(Error::format(0, "bad magic")),
        Some(_) => {}
    }
    r.take(4, "magic")?;
    let (_, v) = r.take(4, "header")?;
    let version = u32::from_le_bytes(v.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let (_, h) = r.take(8, "header")?;
    let hash = u64::from_le_bytes(h.try_into().expect("8 bytes"));
    if hash != config.hash() {
        return Err(Error::Version(format!("checkpoint config hash {hash:016x} does not match configuration {:016x}", config.hash())));
    }
    let mut model = Model::new(config.clone())?;
    let mut seen = vec![false; model.params.len()];
    while r.pos < bytes.len() {
        let (start, n) = r.take(2, "record header")?;
        let n = u16::from_le_bytes(n.try_into().expect("2 bytes")) as usize;
        let (_, name) = r.take(n, "record name")?;
        let name = std::str::from_utf8(name).map_err(|_| Error::format(start, "parameter name is not UTF-8"))?.to_owned();
        let (_, rank) = r.take(1, "record rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let (_, e) = r.take(4, "record shape")?;
            shape.push(u32::from_le_bytes(e.try_into().expect("4 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let (_, raw) = r.take(numel * 8, &format!("record {name}"))?;
        let id = model.params.find(&name).ok_or_else(|| Error::format(start, format!("unknown parameter {name}")))?;
        if model.params.value(id).shape() != shape {
            return Err(Error::format(start, format!("parameter {name} has shape {shape:?}, expected {:?}", model.params.value(id).shape())));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::format(start, format!("parameter {name} appears twice")));
        }
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        *model.params.value_mut(id) = Tensor::new(shape, data)?;
    }
    if let Some(missing) = model.params.iter().find(|(id, _)| !seen[id.index()]) {
        return Err(Error::format(bytes.len() as u64, format!("missing parameter {}", missing.1.name)));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f64>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model<f64>> {
    decode_checkpoint(&std::fs::read(path)?, config)
}
