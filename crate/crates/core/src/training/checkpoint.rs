//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `b"SKH1"`, `u64` header length, canonical JSON header, `u64` parameter
//! count, then per parameter (in name order) `u64` name length, UTF-8 name,
//! `u64` rank, `rank` x `u64` dims, and the `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ModelParams, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SKH1";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the training RNG streams at the time of saving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    pub dropout_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub rng: RngState,
    pub best_val_ks_f1: f64,
    pub best_epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, rng: RngState, best_val_ks_f1: f64, best_epoch: u64) -> Self {
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                config: config.clone(),
                vocab: model.vocab.tokens().to_vec(),
                rng,
                best_val_ks_f1,
                best_epoch,
            },
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n = r.len()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(n)?)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let count = r.len()?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let n = r.len()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = size
                .filter(|&s| s.checked_mul(8).is_some_and(|b| b <= buf.len()))
                .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for {name}")))?;
            let data = r
                .take(size * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model described by the header and loads the stored
    /// values into it; any name or shape disagreement is an error.
    pub fn to_model(&self) -> Result<Model> {
        self.to_model_with(&self.header.config.model)
    }

    /// As [`Self::to_model`] under a caller-supplied architecture.
    pub fn to_model_with(&self, config: &crate::model::ModelConfig) -> Result<Model> {
        let vocab = Vocab::from_tokens(self.header.vocab.clone())?;
        let mut model = Model::new(config.clone(), vocab, 0)?;
        model.params.assign_from(&self.params)?;
        Ok(model)
    }
}
