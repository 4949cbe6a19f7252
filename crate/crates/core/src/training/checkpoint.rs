//! Single-file training snapshot.
//!
//! ```text
//! b"BVAECKPT" | u32 LE version | u64 LE header length | JSON header | tensor bytes (LE)
//! ```
//!
//! The header carries the run configuration, progress, RNG position, loss
//! history and an index of `(name, dtype, shape, offset)` for every tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::EpochRecord;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"BVAECKPT";
pub const VERSION: u32 = 1;

/// Position of the shuffling generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    rng: RngState,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_step: u64,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: &str, shape: &[usize]) -> Result<Tensor> {
    let dev = &Device::Cpu;
    Ok(match dtype {
        "f32" => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        "f64" => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: &Tensor| -> Result<()> {
            let bytes = tensor_bytes(t)?;
            tensors.push(TensorEntry {
                name,
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: blob.len(),
                len: bytes.len(),
            });
            blob.extend_from_slice(&bytes);
            Ok(())
        };
        for (i, (name, var)) in self.params.iter().enumerate() {
            push(format!("param/{name}"), var.as_tensor())?;
            push(format!("adam.m/{name}"), &self.optimizer.m[i])?;
            push(format!("adam.v/{name}"), &self.optimizer.v[i])?;
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            adam_beta1: self.optimizer.beta1,
            adam_beta2: self.optimizer.beta2,
            adam_eps: self.optimizer.eps,
            adam_step: self.optimizer.step,
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let blob = &body[hlen..];
        let mut params = None::<ParamStore>;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for e in &header.tensors {
            let end = e.offset.checked_add(e.len).filter(|end| *end <= blob.len()).ok_or_else(|| bad("truncated data"))?;
            let t = tensor_from_bytes(&blob[e.offset..end], &e.dtype, &e.shape)?;
            if let Some(name) = e.name.strip_prefix("param/") {
                let store = params.get_or_insert_with(|| ParamStore::new(t.dtype()));
                store.insert(name, Var::from_tensor(&t)?)?;
            } else if e.name.starts_with("adam.m/") {
                m.push(t);
            } else if e.name.starts_with("adam.v/") {
                v.push(t);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {}", e.name)));
            }
        }
        let params = params.ok_or_else(|| bad("no parameters"))?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer state does not match parameters"));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            params,
            optimizer: Adam {
                beta1: header.adam_beta1,
                beta2: header.adam_beta2,
                eps: header.adam_eps,
                step: header.adam_step,
                m,
                v,
            },
            rng: header.rng,
            history: header.history,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
