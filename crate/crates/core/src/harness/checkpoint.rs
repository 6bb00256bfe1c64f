//! Binary checkpoint: magic `BDRC`, a `u32` format version, a `u32` tensor
//! count, then per tensor its UTF-8 name (`u32` length prefix), rank, `u32`
//! dims and little-endian `f32` data, and finally the run configuration as
//! TOML text (`u32` length prefix). All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    /// Echo of the configuration the parameters were trained with.
    pub config: String,
}

pub fn encode_checkpoint(params: &ParamStore<f32>, config: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for name in params.sorted_names() {
        let t = params.get(name).expect("listed name");
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, config: &str) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!(
                "checkpoint ends while reading {what} at byte {} of {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Parse(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "BDRC",
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Parse(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.saturating_mul(4), &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(data, &shape)?)?;
    }
    let config = r.string("config")?;
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, config })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
