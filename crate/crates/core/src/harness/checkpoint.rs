//! Checkpoint files.
//!
//! ```text
//! "STSNCKPT" | version u16 | config hash [32] | config json (u32 len)
//! step u64 | tensor count u32
//! per tensor: name (u16 len) | ndim u8 | dims u32… | f32 data
//! optimiser flag u8; when set: step u64 | β1 β2 ε f64 | first and second
//! moments as raw f32 data in tensor order
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Adam, AdamConfig, ParamStore, Tensor};

use super::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"STSNCKPT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// Optimiser steps taken when the checkpoint was written.
    pub step: u64,
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }
}

fn put_floats(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.architecture_hash());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            let name = name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Format("parameter name too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step().to_le_bytes());
                for v in [adam.config.beta1, adam.config.beta2, adam.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for m in adam.first_moments().iter().chain(adam.second_moments()) {
                    put_floats(&mut out, m.data());
                }
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint. With `expected`, a checkpoint written for a
    /// different architecture is refused.
    pub fn from_bytes(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash: [u8; 32] = r.array()?;
        if let Some(cfg) = expected {
            if cfg.architecture_hash() != hash {
                return Err(Error::Config("checkpoint config hash does not match the requested architecture".into()));
            }
        }
        let len = r.u32()? as usize;
        let config: TrainConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
        if config.architecture_hash() != hash {
            return Err(Error::Format("stored config does not match its hash".into()));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            if params.find(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format("tensor too large".into()))?;
            let data = r.floats(numel)?;
            params.add(name, Tensor::new(&shape, data)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let opt_step = r.u64()?;
                let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
                let moments = |r: &mut Reader<'_>| -> Result<Vec<Tensor<f32>>> {
                    params.iter().map(|(_, _, t)| Tensor::new(t.shape(), r.floats(t.numel())?)).collect()
                };
                let first = moments(&mut r)?;
                let second = moments(&mut r)?;
                Some(Adam::from_parts(config, opt_step, first, second)?)
            }
            f => return Err(Error::Format(format!("bad optimiser flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { config, params, optimizer, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}
