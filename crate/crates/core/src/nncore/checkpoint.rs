//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes  "NTWCKPT\0"
//! version    u32 LE
//! n_meta     u32 LE, then n_meta × (key, value) length-prefixed UTF-8
//! n_tensors  u32 LE, then per tensor:
//!            name (u32 LE length + UTF-8), ndim u32 LE, dims u64 LE each,
//!            values f64 LE
//! sha256     32 bytes over everything above
//! ```
//!
//! Every string length is a u32 LE prefix. Loading verifies magic, version
//! and digest before decoding anything else.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParameterSet;
use super::{NnError, Tensor};

pub const MAGIC: &[u8; 8] = b"NTWCKPT\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| NnError::CorruptFile(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::CorruptFile("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn from_params(params: &ParameterSet, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint { metadata, tensors: params.named_values().map(|(n, t)| (n.to_string(), t.clone())).collect() }
    }

    /// Loads every tensor into `params`; nothing is modified on error.
    pub fn restore_into(&self, params: &mut ParameterSet) -> Result<(), NnError> {
        params.load_named(&self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, SCHEMA_VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(NnError::CorruptFile("missing checkpoint magic".into()));
        }
        if bytes.len() < MAGIC.len() + 4 {
            return Err(NnError::CorruptFile("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(NnError::SchemaVersionMismatch { found: version, expected: SCHEMA_VERSION });
        }
        if bytes.len() < 12 + 32 {
            return Err(NnError::CorruptFile("truncated checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(NnError::CorruptFile("digest mismatch (truncated or modified)".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let n_meta = r.u32()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| NnError::CorruptFile("tensor size overflow".into()))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| NnError::CorruptFile("tensor size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(NnError::CorruptFile("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
