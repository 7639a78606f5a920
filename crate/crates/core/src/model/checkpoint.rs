//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "LDNNCKPT"
//! version    u32      1
//! scalar     u8 len + ASCII ("f32" | "f64")
//! config     u32 len + UTF-8 JSON of ModelConfig
//! frozen     u8       0 | 1
//! tensors    u32 count, then per tensor:
//!              u16 len + UTF-8 name
//!              u8 rank, rank × u32 dims
//!              product(dims) × f64 bit patterns (f32 values widened exactly)
//! ```

use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LDNNCKPT";
const VERSION: u32 = 1;

impl<S: Scalar> ModelParams<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let ty = S::type_name().as_bytes();
        out.push(ty.len() as u8);
        out.extend_from_slice(ty);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.push(self.frozen as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let n = r.u8()? as usize;
        let ty = std::str::from_utf8(r.take(n)?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if ty != S::type_name() {
            return Err(Error::format(
                "checkpoint",
                format!("stored as {ty}, requested {}", S::type_name()),
            ));
        }
        let n = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            x => return Err(Error::format("checkpoint", format!("frozen flag {x}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            r.take(n)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| r.u64().map(|b| S::lit(f64::from_bits(b))))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Self::from_parts(config, tensors, frozen)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// FNV-1a over the checkpoint bytes.
    pub fn fingerprint(&self) -> u64 {
        self.to_bytes().iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
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
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
