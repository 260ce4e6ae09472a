//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CAID" | version u32 | config hash [32] | count u32
//! | { name_len u16 | name | dtype u8 (0 = f32) | ndim u8 | dims u32… | payload f32… }
//! | crc32 u32
//! ```
//!
//! The CRC covers everything between the version and the CRC itself, so a
//! damaged hash, table entry or payload byte is caught before parsing.

use std::fs;
use std::path::Path;

use super::{Result, TrainError};
use crate::nn::{Model, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAID";
pub const FORMAT_VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "momentum.";
const META_EPOCH: &str = "meta.epoch";
const META_VAL_LOSS: &str = "meta.val_loss";
const HEADER: usize = 4 + 4 + 32 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u32,
    pub val_loss: f32,
    /// Model tensors in store order, momentum entries prefixed `momentum.`.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u32, val_loss: f32, config_hash: [u8; 32]) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.online.iter().map(|(_, e)| (e.name.clone(), e.value.clone())).collect();
        if let Some(m) = &model.momentum {
            tensors.extend(m.iter().map(|(_, e)| (format!("{MOMENTUM_PREFIX}{}", e.name), e.value.clone())));
        }
        Self {
            config_hash,
            epoch,
            val_loss,
            tensors,
        }
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn without_prefix(mut self, prefix: &str) -> Self {
        self.tensors.retain(|(n, _)| !n.starts_with(prefix));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every entry of `store` whose name starts with one of
    /// `prefixes` from the checkpoint. Missing names and shape differences
    /// are errors; returns the number of tensors copied.
    pub fn load_into(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize> {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, e)| prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|(_, e)| e.name.clone())
            .collect();
        for name in &names {
            let t = self.get(name).ok_or_else(|| TrainError::MissingTensor(name.clone()))?;
            store.assign(name, t)?;
        }
        Ok(names.len())
    }

    /// Restores online and momentum parameters of a model built with the
    /// same architecture. Decoder tensors are optional.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        self.load_into(&mut model.online, &["encoder.", "projector.", "predictor."])?;
        if self.tensors.iter().any(|(n, _)| n.starts_with("decoder.")) {
            self.load_into(&mut model.online, &["decoder."])?;
        }
        if let Some(m) = &mut model.momentum {
            let names: Vec<String> = m.iter().map(|(_, e)| e.name.clone()).collect();
            for name in names {
                let key = format!("{MOMENTUM_PREFIX}{name}");
                let t = self.get(&key).ok_or(TrainError::MissingTensor(key))?;
                m.assign(&name, t)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let meta = [
            (META_EPOCH.to_string(), Tensor::scalar(self.epoch as f32)),
            (META_VAL_LOSS.to_string(), Tensor::scalar(self.val_loss)),
        ];
        let all: Vec<&(String, Tensor<f32>)> = self.tensors.iter().chain(meta.iter()).collect();
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            let len = u16::try_from(name.len()).map_err(|_| TrainError::Format(format!("name too long: {name}")))?;
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| TrainError::Format(format!("too many dims in {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| TrainError::Format(format!("dim too large in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[8..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(TrainError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(TrainError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TrainError::Version(version));
        }
        if bytes.len() < HEADER + 4 {
            return Err(TrainError::Truncated);
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&body[8..]);
        if stored != computed {
            return Err(TrainError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        let (mut epoch, mut val_loss) = (None, None);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| TrainError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let head = r.take(2)?;
            if head[0] != 0 {
                return Err(TrainError::Format(format!("{name}: unsupported dtype {}", head[0])));
            }
            let mut shape = Vec::with_capacity(head[1] as usize);
            for _ in 0..head[1] {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .filter(|&b| b <= r.remaining())
                .ok_or(TrainError::Truncated)?;
            let data = r
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Format(e.to_string()))?;
            match name.as_str() {
                META_EPOCH => epoch = Some(t.data().first().copied().unwrap_or(0.0) as u32),
                META_VAL_LOSS => val_loss = Some(t.data().first().copied().unwrap_or(f32::NAN)),
                _ => tensors.push((name, t)),
            }
        }
        if r.remaining() != 0 {
            return Err(TrainError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_hash,
            epoch: epoch.ok_or_else(|| TrainError::MissingTensor(META_EPOCH.into()))?,
            val_loss: val_loss.ok_or_else(|| TrainError::MissingTensor(META_VAL_LOSS.into()))?,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
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
            return Err(TrainError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
