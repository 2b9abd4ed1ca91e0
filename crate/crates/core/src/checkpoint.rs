//! Checkpoints: a binary container of named f32 tensors plus a JSON sidecar
//! holding the configuration and training metadata.
//!
//! Container layout, little-endian: the 12-byte magic, a `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u32` dimensions and the `f32` data in row-major order.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tagspace::TagRepresentations;
use crate::train::{EpochStats, Trained};
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 12] = b"MLP4STRCKP1\0";
const TAG_REPR: &str = "tag_repr";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: ArrayD<f32>,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.data.ndim() as u8])?;
        for &d in t.data.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    if &read_exact::<12, _>(&mut r)? != CKPT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let rank = read_exact::<1, _>(&mut r)?[0] as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| read_exact(&mut r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Data(format!("truncated tensor {name}: {e}")))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("size matches dims");
        out.push(NamedTensor { name, data });
    }
    Ok(out)
}

/// JSON sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

/// Everything needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub tags: TagRepresentations<f32>,
    pub meta: CheckpointMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_trained(trained: Trained<f32>, run: &RunConfig) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: trained.model.config,
                run: run.clone(),
                epoch: trained.epoch,
                best_val_loss: trained.best_val_loss,
                seed: run.train.seed,
                history: trained.history,
            },
            model: trained.model,
            tags: trained.tags,
        }
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .model
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, data: t.to_owned() })
            .collect();
        out.push(NamedTensor {
            name: TAG_REPR.into(),
            data: self.tags.matrix.clone().into_dyn(),
        });
        out
    }

    /// Writes the container to `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(BufWriter::new(file), &self.tensors()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", side.display())))?;
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_tensors(BufReader::new(file))?;
        Self::from_tensors(meta, tensors)
    }

    pub fn from_tensors(meta: CheckpointMeta, tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut by_name: HashMap<String, ArrayD<f32>> =
            tensors.into_iter().map(|t| (t.name, t.data)).collect();
        let mut params = skeleton(&meta.model);
        for (name, mut slot) in params.tensors_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.assign(&t);
        }
        let tags = by_name
            .remove(TAG_REPR)
            .ok_or_else(|| Error::Data("checkpoint is missing tag_repr".into()))?;
        let expected = [meta.model.n_tags, meta.model.mixer.d_h];
        if tags.shape() != expected {
            return Err(Error::shape(TAG_REPR, expected, tags.shape()));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Data(format!("unexpected tensor {extra} in checkpoint")));
        }
        let tags = TagRepresentations {
            matrix: tags.into_dimensionality().expect("rank checked"),
        };
        Ok(Checkpoint {
            model: Model {
                config: meta.model,
                params,
            },
            tags,
            meta,
        })
    }
}

fn skeleton(cfg: &ModelConfig) -> ModelParams<f32> {
    use rand_chacha::rand_core::SeedableRng;
    ModelParams::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).zeros_like()
}
