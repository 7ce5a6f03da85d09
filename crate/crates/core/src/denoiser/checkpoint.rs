//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "TDIFFCKP" | u32 version
//! u32 patch_size | u32 base_channels | u32 n | n x u32 multiplier | u32 time_embed_dim
//! u64 optimizer step | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | 4 x u32 shape | f32 values, row-major
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Optimizer moments, when present, are stored as ordinary tensors named
//! `adam.m.<param>` and `adam.v.<param>` after the parameters.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::train::AdamState;
use super::unet::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const MAGIC: &[u8; 8] = b"TDIFFCKP";
pub const VERSION: u32 = 1;
const MAX_NAME: usize = 256;
const MAX_MULTIPLIERS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(net: &Denoiser, adam: Option<&AdamState>) -> Self {
        let p = net.params();
        let mut tensors: Vec<(String, Tensor)> = p.names.iter().cloned().zip(p.tensors.iter().cloned()).collect();
        if let Some(a) = adam {
            for (name, m) in p.names.iter().zip(&a.m) {
                tensors.push((format!("adam.m.{name}"), m.clone()));
            }
            for (name, v) in p.names.iter().zip(&a.v) {
                tensors.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        Self {
            config: net.config().clone(),
            step: adam.map_or(0, |a| a.step),
            tensors,
        }
    }

    /// Rebuilds the network and, if stored, the optimizer state.
    /// `expected` rejects checkpoints trained for a different architecture.
    pub fn restore(&self, expected: Option<&DenoiserConfig>) -> Result<(Denoiser, Option<AdamState>)> {
        if let Some(cfg) = expected {
            if *cfg != self.config {
                return Err(Error::Incompatible(format!(
                    "checkpoint config {:?} does not match requested {:?}",
                    self.config, cfg
                )));
            }
        }
        let mut net = Denoiser::new(self.config.clone(), &mut SeededRng::new(0))?;
        let n = net.params().len();
        if self.tensors.len() != n && self.tensors.len() != 3 * n {
            return Err(Error::Incompatible(format!(
                "expected {n} or {} tensors, found {}",
                3 * n,
                self.tensors.len()
            )));
        }
        net.load_params(&self.tensors[..n])?;
        if self.tensors.len() == n {
            return Ok((net, None));
        }
        let mut adam = AdamState::new(&net);
        adam.step = self.step;
        for (k, prefix) in ["adam.m.", "adam.v."].iter().enumerate() {
            for i in 0..n {
                let (name, t) = &self.tensors[(k + 1) * n + i];
                let want = format!("{prefix}{}", net.params().names[i]);
                if *name != want || t.shape != net.params().tensors[i].shape {
                    return Err(Error::Incompatible(format!("optimizer tensor '{name}' where '{want}' expected")));
                }
                let slot = if k == 0 { &mut adam.m[i] } else { &mut adam.v[i] };
                *slot = t.clone();
            }
        }
        Ok((net, Some(adam)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let c = &self.config;
        put_u32(&mut out, c.patch_size as u32);
        put_u32(&mut out, c.base_channels as u32);
        put_u32(&mut out, c.channel_multipliers.len() as u32);
        for &m in &c.channel_multipliers {
            put_u32(&mut out, m as u32);
        }
        put_u32(&mut out, c.time_embed_dim as u32);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            for d in t.shape {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::format("checkpoint", r);
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!("unsupported checkpoint version {version}")));
        }
        let patch_size = r.u32()? as usize;
        let base_channels = r.u32()? as usize;
        let depth = r.u32()? as usize;
        if depth > MAX_MULTIPLIERS {
            return Err(bad("too many channel multipliers"));
        }
        let channel_multipliers = (0..depth).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let time_embed_dim = r.u32()? as usize;
        let config = DenoiserConfig {
            patch_size,
            base_channels,
            channel_multipliers,
            time_embed_dim,
        };
        config.validate().map_err(|e| bad(&format!("config header: {e}")))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            if len > MAX_NAME {
                return Err(bad("tensor name too long"));
            }
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = r.u32()? as usize;
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 4)
                .ok_or_else(|| bad("tensor larger than file"))?;
            let raw = r.take(4 * n)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(&format!("tensor '{name}' holds non-finite values")));
            }
            tensors.push((name, Tensor::from_vec(shape, data)));
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes before checksum"));
        }
        Ok(Self { config, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format("checkpoint", "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
