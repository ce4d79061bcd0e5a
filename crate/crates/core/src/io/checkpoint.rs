//! Binary parameter files.
//!
//! Layout, all integers little-endian: magic `GELDCKPT`, format version
//! (u32), tensor count (u32), then per tensor the name (u32 length + UTF-8),
//! rank (u32), dims (u32 each) and f32 values in row-major order. The last
//! eight bytes are the FNV-1a 64 hash of everything before them. The model
//! configuration travels as an extra leading tensor named `meta.config`.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 8] = b"GELDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "meta.config";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} cannot be migrated; this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn config_tensor(c: &ModelConfig) -> Tensor<f32> {
    let vals = [c.hidden, c.heads, c.decoder_layers, c.ffn_mult, c.region_rows, c.region_cols, c.k_max];
    Tensor::vector(vals.iter().map(|&v| v as f32).collect())
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        push_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises `params` to bytes.
pub fn write_checkpoint(params: &ModelParams<f32>) -> Vec<u8> {
    let named = params.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, named.len() as u32 + 1);
    push_tensor(&mut out, CONFIG_TENSOR, &config_tensor(&params.config));
    for (name, t) in named {
        push_tensor(&mut out, &name, t);
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>), CheckpointError> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Parses bytes produced by [`write_checkpoint`]. Nothing is returned
/// unless the checksum, version and every tensor check out.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < MAGIC.len() + 8 + 8 {
        return Err(CheckpointError::Checksum.into());
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(payload) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(CheckpointError::Checksum.into());
    }
    let mut r = Reader { buf: payload, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, supported: FORMAT_VERSION }.into());
    }
    let count = r.u32()? as usize;
    let (name, meta) = r.tensor()?;
    if name != CONFIG_TENSOR || meta.len() != 7 {
        return Err(bad("missing model configuration").into());
    }
    let v: Vec<usize> = meta.data().iter().map(|&x| x as usize).collect();
    let config = ModelConfig {
        hidden: v[0],
        heads: v[1],
        decoder_layers: v[2],
        ffn_mult: v[3],
        region_rows: v[4],
        region_cols: v[5],
        k_max: v[6],
    };
    config.validate()?;
    let expected = ModelParams::<f32>::init(config.clone(), 0)?.names();
    if count != expected.len() + 1 {
        return Err(bad(format!("{} tensors for a model that has {}", count.saturating_sub(1), expected.len())).into());
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for want in &expected {
        let (name, t) = r.tensor()?;
        if &name != want {
            return Err(bad(format!("found tensor `{name}` where `{want}` was expected")).into());
        }
        tensors.push(t);
    }
    if r.pos != payload.len() {
        return Err(bad("trailing bytes after the last tensor").into());
    }
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, write_checkpoint(params))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    read_checkpoint(&fs::read(path)?)
}
