//! Binary checkpoint format (all integers little-endian `u32`):
//!
//! ```text
//! magic            8 bytes  "CLIRCKPT"
//! version          u32      = 1
//! dtype            u32      64 (f64 records) or 32 (f32 records)
//! config           9 x u32  num_layers hidden_dim num_heads ff_dim vocab_size
//!                           max_len middle_layer condenser_layers normalize_tokens
//! sections         u32      number of sections that follow
//! per section:
//!   tag            u32      0 = encoder, 1 = condenser head
//!   count          u32      number of records
//!   per record:    name_len u32, name (UTF-8), rows u32, cols u32,
//!                  rows*cols values, row-major, little-endian
//! ```
//!
//! Writers emit dtype 64 so parameters round-trip bit-exactly.

use std::path::Path;

use super::{param_shapes, EncoderConfig, Model, CONDENSER_PREFIX};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLIRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTION_ENCODER: u32 = 0;
const SECTION_CONDENSER: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&64u32.to_le_bytes());
    for v in [
        c.num_layers,
        c.hidden_dim,
        c.num_heads,
        c.ff_dim,
        c.vocab_size,
        c.max_len,
        c.middle_layer,
        c.condenser_layers,
        usize::from(c.normalize_tokens),
    ] {
        put_u32(&mut buf, v)?;
    }
    let (head, body): (Vec<_>, Vec<_>) = model.params.iter().partition(|p| p.name.starts_with(CONDENSER_PREFIX));
    let sections: Vec<(u32, Vec<_>)> = [(SECTION_ENCODER, body), (SECTION_CONDENSER, head)]
        .into_iter()
        .filter(|(_, ps)| !ps.is_empty())
        .collect();
    put_u32(&mut buf, sections.len())?;
    for (tag, params) in sections {
        buf.extend_from_slice(&tag.to_le_bytes());
        put_u32(&mut buf, params.len())?;
        for p in params {
            put_u32(&mut buf, p.name.len())?;
            buf.extend_from_slice(p.name.as_bytes());
            put_u32(&mut buf, p.value.rows())?;
            put_u32(&mut buf, p.value.cols())?;
            for v in p.value.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_checkpoint(model)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

/// Parses a checkpoint; the Condenser section is skipped unless
/// `with_condenser` is set.
pub fn decode_checkpoint(bytes: &[u8], with_condenser: bool) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let dtype = r.u32()?;
    if dtype != 64 && dtype != 32 {
        return Err(Error::Checkpoint(format!("unknown dtype {dtype}")));
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.usize()?;
    }
    let config = EncoderConfig {
        num_layers: f[0],
        hidden_dim: f[1],
        num_heads: f[2],
        ff_dim: f[3],
        vocab_size: f[4],
        max_len: f[5],
        middle_layer: f[6],
        condenser_layers: f[7],
        normalize_tokens: f[8] != 0,
    };
    config.validate()?;

    let mut params = ParamStore::new();
    let sections = r.u32()?;
    for _ in 0..sections {
        let tag = r.u32()?;
        if tag != SECTION_ENCODER && tag != SECTION_CONDENSER {
            return Err(Error::Checkpoint(format!("unknown section tag {tag}")));
        }
        let keep = tag == SECTION_ENCODER || with_condenser;
        let count = r.usize()?;
        for _ in 0..count {
            let name_len = r.usize()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = r.usize()?;
            let cols = r.usize()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let width = if dtype == 64 { 8 } else { 4 };
            let raw = r.take(
                n.checked_mul(width)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            if !keep {
                continue;
            }
            let values: Vec<f64> = if dtype == 64 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            };
            params.insert(name, Matrix::from_vec(rows, cols, values)?)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.pos
        )));
    }

    for (name, rows, cols, _) in param_shapes(&config) {
        let is_head = name.starts_with(CONDENSER_PREFIX);
        match params.id(&name) {
            Some(id) if params.get(id).value.shape() != (rows, cols) => {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match the config ({rows}, {cols})",
                    params.get(id).value.shape()
                )));
            }
            None if !is_head => {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
            _ => {}
        }
    }
    Ok(Model { config, params })
}

pub fn load_checkpoint(path: &Path, with_condenser: bool) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, with_condenser)
}
