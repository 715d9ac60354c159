//! Versioned binary checkpoint: embedded JSON configuration plus named
//! tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ACVCKPT\0"
//! version  u32      1
//! meta     u64 length, then UTF-8 JSON {"model": ..., "config": {...}}
//! count    u32      number of tensors, sorted by name
//! tensor   u32 name length, name bytes,
//!          u8 dtype length, dtype bytes ("f32" or "f64"),
//!          u32 rank, rank x u64 extents,
//!          payload: element count x little-endian values
//! ```

use std::path::Path;

use acv_ndops::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{AcvError, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"ACVCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<T>,
}

fn bad(detail: impl Into<String>) -> AcvError {
    AcvError::format("checkpoint", detail)
}

fn put_le<T: Real>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        "f32" => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.len() as u8);
            out.extend_from_slice(T::DTYPE.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                put_le(&mut out, v);
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint; tensors stored in another precision are converted.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.config.validate()?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let dtype_len = r.take(1)?[0] as usize;
            let dtype = r.take(dtype_len)?.to_vec();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<T> = match &dtype[..] {
                b"f32" => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                    .collect(),
                b"f64" => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                    .collect(),
                other => return Err(bad(format!("unknown dtype {:?}", String::from_utf8_lossy(other)))),
            };
            if params.get(&name).is_ok() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Fails unless every expected parameter is present with the same shape
    /// and nothing else is.
    pub fn check_compatible(&self, expected: &ParamSet<T>) -> Result<()> {
        for (name, t) in expected.iter() {
            let got = self.params.get(name).map_err(|_| bad(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(bad(format!("{name} has shape {:?}, model expects {:?}", got.shape(), t.shape())));
            }
        }
        if let Some(extra) = self.params.names().find(|n| expected.get(n).is_err()) {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamSet::new();
        params.insert("b.w", Tensor::from_fn(&[2, 3], |i| i[0] as f32 - 0.1 * i[1] as f32));
        params.insert("a.bias", Tensor::from_vec(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        Checkpoint { meta: CheckpointMeta { model: "acvnet".into(), config: PipelineConfig::tiny() }, params }
    }

    #[test]
    fn save_load_save_identical() {
        let bytes = sample().encode().unwrap();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::decode(&extra).is_err());
        assert!(Checkpoint::<f32>::decode(b"NOTACKPT").is_err());
    }

    #[test]
    fn compatibility() {
        let ck = sample();
        assert!(ck.check_compatible(&ck.params).is_ok());
        let mut other = ck.params.clone();
        other.insert("c.w", Tensor::zeros(&[1]));
        assert!(ck.check_compatible(&other).is_err());
    }

    #[test]
    fn byte_layout() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap());
        let ck = Checkpoint { meta: CheckpointMeta { model: "acvnet".into(), config: PipelineConfig::tiny() }, params };
        let bytes = ck.encode().unwrap();
        let meta = serde_json::to_vec(&ck.meta).unwrap();
        assert_eq!(&bytes[..12], b"ACVCKPT\0\x01\0\0\0");
        assert_eq!(bytes[12..20], (meta.len() as u64).to_le_bytes());
        assert_eq!(&bytes[20..20 + meta.len()], &meta[..]);
        #[rustfmt::skip]
        let tensors: &[u8] = &[
            1, 0, 0, 0,                         // one tensor
            1, 0, 0, 0, b'w',                   // name
            3, b'f', b'3', b'2',                // dtype
            1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, // rank 1, extent 2
            0x00, 0x00, 0x80, 0x3f,             // 1.0
            0x00, 0x00, 0x00, 0xc0,             // -2.0
        ];
        assert_eq!(&bytes[20 + meta.len()..], tensors);
    }
}
