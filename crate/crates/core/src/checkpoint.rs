//! DRXC checkpoint files.
//!
//! Layout (little-endian): magic `DRXC` | version u32 | header_len u32 |
//! header JSON (model config, training config, step count) | array_count u32 |
//! per array: kind u8 (0 parameter, 1 averaged weights) | name_len u32 | name |
//! ndim u32 | dims u64 x ndim | f32 x prod(dims) | trailing CRC-32 of all
//! preceding bytes.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DrexModel, FusionConfig, ModelError};
use crate::nn::{EmaState, ParamStore};
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DRXC";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_EMA: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no averaged weights")]
    MissingEma,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: FusionConfig,
    train: TrainConfig,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub steps: u64,
    pub params: Vec<NamedArray>,
    pub ema: Option<Vec<NamedArray>>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        model: FusionConfig,
        train: TrainConfig,
        params: &ParamStore<T>,
        ema: Option<&EmaState<T>>,
        steps: u64,
    ) -> Self {
        let arrays = |values: &mut dyn Iterator<Item = &[T]>| -> Vec<NamedArray> {
            params
                .iter()
                .zip(values)
                .map(|((_, p), v)| NamedArray {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: v.iter().map(|x| x.as_f32()).collect(),
                })
                .collect()
        };
        let raw = arrays(&mut params.iter().map(|(_, p)| p.value.as_slice()));
        let ema = ema.map(|e| match e.average() {
            Some(avg) => arrays(&mut avg.iter().map(Vec::as_slice)),
            None => raw.clone(),
        });
        Self {
            model,
            train,
            steps,
            params: raw,
            ema,
        }
    }

    fn store<T: Scalar>(arrays: &[NamedArray]) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for a in arrays {
            store.add(
                a.name.clone(),
                a.shape.clone(),
                a.data.iter().map(|&v| T::of_f32(v)).collect(),
            );
        }
        store
    }

    pub fn raw_model<T: Scalar>(&self) -> Result<DrexModel<T>, CheckpointError> {
        Ok(DrexModel::from_params(
            &self.model,
            Self::store(&self.params),
        )?)
    }

    pub fn ema_model<T: Scalar>(&self) -> Result<DrexModel<T>, CheckpointError> {
        let ema = self.ema.as_ref().ok_or(CheckpointError::MissingEma)?;
        Ok(DrexModel::from_params(&self.model, Self::store(ema))?)
    }

    /// Averaged weights when `use_ema`, raw weights otherwise.
    pub fn model<T: Scalar>(&self, use_ema: bool) -> Result<DrexModel<T>, CheckpointError> {
        if use_ema {
            self.ema_model()
        } else {
            self.raw_model()
        }
    }

    /// The weights selected by the stored evaluation setting.
    pub fn eval_model<T: Scalar>(&self) -> Result<DrexModel<T>, CheckpointError> {
        self.model(self.train.eval_with_ema)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            steps: self.steps,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let ema = self.ema.iter().flatten().map(|a| (KIND_EMA, a));
        let all: Vec<(u8, &NamedArray)> = self
            .params
            .iter()
            .map(|a| (KIND_PARAM, a))
            .chain(ema)
            .collect();
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (kind, a) in all {
            out.push(kind);
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Cursor { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Cursor { buf: body, pos: 8 };
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut params = Vec::new();
        let mut ema = Vec::new();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(
                    usize::try_from(r.u64()?)
                        .map_err(|_| CheckpointError::Corrupt("dimension overflow".into()))?,
                );
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| CheckpointError::Corrupt(format!("array `{name}` is too large")))?;
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let array = NamedArray { name, shape, data };
            match kind {
                KIND_PARAM => params.push(array),
                KIND_EMA => ema.push(array),
                k => return Err(CheckpointError::Corrupt(format!("unknown array kind {k}"))),
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            steps: header.steps,
            params,
            ema: if ema.is_empty() { None } else { Some(ema) },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
