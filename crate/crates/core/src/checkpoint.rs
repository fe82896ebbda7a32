//! Checkpoints: a binary file of named tensors plus a JSON sidecar with
//! everything else.
//!
//! Binary layout (little endian): magic `VFCK`, `u32` format version,
//! `u32` record count, then per record a `u32` name length, the UTF-8 name,
//! a `u32` rank, `u64` extents and the `f64` data. Records are the model
//! parameters (`param/<name>`) followed by the optimizer moments
//! (`adam.m/<name>`, `adam.v/<name>`), all in parameter-store order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::io::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VFCK";

/// Position of a seeded ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, as a decimal string since it is 128 bits wide.
    pub word_pos: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch, measured before each update.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub param_count: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

/// Sidecar path for a checkpoint file: `model.ckpt` → `model.ckpt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &Model,
        adam: &Adam,
        epoch: usize,
        rng: RngState,
        log: &[EpochLog],
    ) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config: config.clone(),
                epoch,
                optimizer_step: adam.step,
                rng,
                param_count: model.param_count(),
                log: log.to_vec(),
            },
            params: model.store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    fn records(&self) -> impl Iterator<Item = (String, &Tensor)> {
        let names = || self.params.iter().map(|(n, _)| n);
        self.params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t))
            .chain(names().zip(&self.adam_m).map(|(n, t)| (format!("adam.m/{n}"), t)))
            .chain(names().zip(&self.adam_v).map(|(n, t)| (format!("adam.v/{n}"), t)))
    }

    pub fn encode(&self) -> (Vec<u8>, String) {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(3 * self.params.len() as u32).to_le_bytes());
        for (name, t) in self.records() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        (out, json)
    }

    pub fn decode(bytes: &[u8], json: &str, path: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(json).map_err(|e| Error::format(sidecar_path(path), e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                    meta.format_version
                ),
            ));
        }
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        if r.u32()? != meta.format_version {
            return Err(Error::format(path, "binary and sidecar format versions differ"));
        }
        let count = r.u32()? as usize;
        if !count.is_multiple_of(3) {
            return Err(Error::format(path, "record count is not a multiple of three"));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last record"));
        }
        let k = count / 3;
        let mut it = records.into_iter();
        let mut group = |prefix: &str| {
            it.by_ref()
                .take(k)
                .map(|(name, t)| match name.strip_prefix(prefix) {
                    Some(n) => Ok((n.to_string(), t)),
                    None => Err(Error::format(path, format!("unexpected record {name}"))),
                })
                .collect::<Result<Vec<_>>>()
        };
        let params = group("param/")?;
        let m = group("adam.m/")?;
        let v = group("adam.v/")?;
        for ((p, _), ((a, _), (b, _))) in params.iter().zip(m.iter().zip(&v)) {
            if p != a || p != b {
                return Err(Error::format(path, format!("optimizer records out of order at {p}")));
            }
        }
        Ok(Checkpoint {
            meta,
            params,
            adam_m: m.into_iter().map(|x| x.1).collect(),
            adam_v: v.into_iter().map(|x| x.1).collect(),
        })
    }

    /// Write the binary file at `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (bin, json) = self.encode();
        write_atomic(path, &bin)?;
        write_atomic(&sidecar_path(path), json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bin = read_bytes(path)?;
        let side = sidecar_path(path);
        let json = String::from_utf8(read_bytes(&side)?).map_err(|_| Error::format(&side, "sidecar is not UTF-8"))?;
        Self::decode(&bin, &json, path)
    }

    /// Rebuild the model and optimizer. Fails if the stored tensors do not
    /// match the architecture described by the stored configuration.
    pub fn restore(&self, path: &Path) -> Result<(Model, Adam)> {
        let cfg = &self.meta.config;
        let mut model = Model::new(&cfg.model, cfg.seed).map_err(|e| Error::format(path, e.to_string()))?;
        if model.store.len() != self.params.len() {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint holds {} tensors but the model has {}",
                    self.params.len(),
                    model.store.len()
                ),
            ));
        }
        let expected: Vec<(String, Vec<usize>)> = model
            .store
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        for ((name, shape), (got, t)) in expected.iter().zip(&self.params) {
            if name != got || shape != t.shape() {
                return Err(Error::format(
                    path,
                    format!("tensor {got} does not match model tensor {name}"),
                ));
            }
            model.store.set(name, t.clone())?;
        }
        let mut adam = Adam::new(cfg.optimizer, &model.store);
        adam.step = self.meta.optimizer_step;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok((model, adam))
    }
}
