//! Weights file format.
//!
//! ```text
//! magic           b"FRKW"
//! format version  u32
//! schema          u32 length + UTF-8
//! metadata        u32 length + UTF-8 JSON (model config or optimizer state)
//! tensor count    u32
//! directory       per tensor: u32 length + UTF-8 name, u32 rank, u64 dims,
//!                 u8 dtype (0 = f32, 1 = f64), u64 offset into the data section
//! data            raw little-endian tensor data
//! digest          32-byte SHA-256 of everything above
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, AdamConfig, ModelConfig, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::features::SCHEMA_VERSION;

pub const MAGIC: &[u8; 4] = b"FRKW";
pub const FORMAT_VERSION: u32 = 1;
pub const DIGEST_LEN: usize = 32;
const OPTIMIZER_SCHEMA: &str = "feedrank-adam/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

struct Container {
    schema: String,
    meta: String,
    tensors: Vec<(Tensor, DType)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &c.schema);
    put_str(&mut out, &c.meta);
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (t, dtype) in &c.tensors {
        put_str(&mut out, &t.name);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.push(*dtype as u8);
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.data.len() * dtype.width()) as u64;
    }
    for (t, dtype) in &c.tensors {
        match dtype {
            DType::F32 => t
                .data
                .iter()
                .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
            DType::F64 => t.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Hex SHA-256 of the digest-covered part of a weights file.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn verify(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < DIGEST_LEN + MAGIC.len() {
        return Err(Error::Format("file too short".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let computed = Sha256::digest(body);
    if computed.as_slice() != stored {
        return Err(Error::DigestMismatch {
            expected: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }
    Ok(body)
}

fn decode(bytes: &[u8]) -> Result<Container> {
    let body = verify(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let schema = r.string()?;
    let meta = r.string()?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let offset = r.u64()? as usize;
        dir.push((name, shape, dtype, offset));
    }
    let data = &body[r.pos..];
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, dtype, offset) in dir {
        let n: usize = shape.iter().product();
        let end = offset + n * dtype.width();
        let raw = data
            .get(offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {name} exceeds data section")))?;
        let values = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        tensors.push((
            Tensor {
                name,
                shape,
                data: values,
            },
            dtype,
        ));
    }
    Ok(Container {
        schema,
        meta,
        tensors,
    })
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>> {
    Ok(encode(&Container {
        schema: SCHEMA_VERSION.to_string(),
        meta: serde_json::to_string(params.config())?,
        tensors: params
            .tensors()
            .iter()
            .map(|t| (t.clone(), DType::F32))
            .collect(),
    }))
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let c = decode(bytes)?;
    if c.schema != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            expected: SCHEMA_VERSION.into(),
            found: c.schema,
        });
    }
    let config: ModelConfig = serde_json::from_str(&c.meta)?;
    ModelParams::from_tensors(config, c.tensors.into_iter().map(|(t, _)| t).collect())
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<String> {
    let bytes = encode_params(params)?;
    std::fs::write(path, &bytes)?;
    Ok(stored_digest(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_params(&std::fs::read(path)?)
}

fn stored_digest(bytes: &[u8]) -> String {
    hex::encode(&bytes[bytes.len().saturating_sub(DIGEST_LEN)..])
}

/// The digest a client reports for its local model file.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    verify(&bytes)?;
    Ok(stored_digest(&bytes))
}

/// Whether a client holding `client_digest` must download the registry model.
pub fn update_required(client_digest: Option<&str>, registry_digest: &str) -> bool {
    client_digest.map_or(true, |d| !d.eq_ignore_ascii_case(registry_digest))
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    config: AdamConfig,
}

/// Adam moments are stored in double precision so a resumed run continues exactly.
pub fn save_optimizer(opt: &Adam, params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors = Vec::new();
    for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
        for (t, data) in params.tensors().iter().zip(moments) {
            tensors.push((
                Tensor {
                    name: format!("adam.{kind}.{}", t.name),
                    shape: t.shape.clone(),
                    data: data.clone(),
                },
                DType::F64,
            ));
        }
    }
    let bytes = encode(&Container {
        schema: OPTIMIZER_SCHEMA.into(),
        meta: serde_json::to_string(&OptimizerMeta {
            step: opt.step,
            config: opt.config.clone(),
        })?,
        tensors,
    });
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_optimizer(path: impl AsRef<Path>, params: &ModelParams) -> Result<Adam> {
    let c = decode(&std::fs::read(path)?)?;
    if c.schema != OPTIMIZER_SCHEMA {
        return Err(Error::SchemaMismatch {
            expected: OPTIMIZER_SCHEMA.into(),
            found: c.schema,
        });
    }
    let meta: OptimizerMeta = serde_json::from_str(&c.meta)?;
    let n = params.tensors().len();
    if c.tensors.len() != 2 * n {
        return Err(Error::Format("optimizer state does not match model".into()));
    }
    let mut data: Vec<Vec<f64>> = c.tensors.into_iter().map(|(t, _)| t.data).collect();
    let v = data.split_off(n);
    for (m, t) in data.iter().zip(params.tensors()) {
        if m.len() != t.data.len() {
            return Err(Error::Format(format!("optimizer moment size mismatch for {}", t.name)));
        }
    }
    Ok(Adam {
        config: meta.config,
        step: meta.step,
        m: data,
        v,
    })
}
