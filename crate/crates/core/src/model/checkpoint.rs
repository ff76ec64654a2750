//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ATTRLAB\0"
//! version    u32
//! config     u32 length + JSON ModelConfig
//! meta       u32 length + JSON object (free-form provenance)
//! n_tensors  u32
//! tensor     u32 name length + name, u32 rank, u64 dims[rank], f64 values
//! checksum   32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{ModelConfig, Parameters};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ATTRLAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

pub fn encode_checkpoint(params: &Parameters, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let write_blob = |buf: &mut Vec<u8>, bytes: &[u8]| {
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
    };
    write_blob(&mut buf, &serde_json::to_vec(&params.config)?);
    write_blob(&mut buf, &serde_json::to_vec(meta)?);
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        write_blob(&mut buf, name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(params: &Parameters, meta: &serde_json::Value, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected end at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let config: ModelConfig = serde_json::from_slice(r.blob()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    config.validate()?;
    let meta: serde_json::Value = serde_json::from_slice(r.blob()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta: {e}")))?;
    let mut params = Parameters::zeros(&config);
    let expected: Vec<(String, usize, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.rows, m.cols))
        .collect();
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {n}",
            expected.len()
        )));
    }
    for ((name, rows, cols), dst) in expected.into_iter().zip(params.tensors_mut()) {
        let found = r.blob()?;
        if found != name.as_bytes() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(found)
            )));
        }
        if r.u32()? != 2 {
            return Err(Error::CorruptCheckpoint(format!("{name}: rank must be 2")));
        }
        let (fr, fc) = (r.u64()? as usize, r.u64()? as usize);
        if (fr, fc) != (rows, cols) {
            return Err(Error::CorruptCheckpoint(format!(
                "{name}: shape {fr}x{fc}, expected {rows}x{cols}"
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        for (v, chunk) in dst.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, meta })
}
