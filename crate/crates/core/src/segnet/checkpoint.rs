//! Single-file model archive: magic, JSON header (config, metadata, tensor index),
//! then raw little-endian `f32` data in index order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::unet::{Model, UNet};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LSCKPT01";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Epoch (1-based) the weights were taken from; 0 before any training.
    pub epoch: usize,
    pub val_f1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    val_f1: Option<f64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: usize, val_f1: Option<f64>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            epoch,
            val_f1,
        }
    }

    /// Rebuilds the model, checking that every tensor matches the configured architecture.
    pub fn to_model(&self) -> Result<Model> {
        let mut fresh = ParamStore::new();
        let net = UNet::build(&self.config, &mut fresh, 0).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        if fresh.len() != self.params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "architecture has {} tensors, checkpoint has {}",
                fresh.len(),
                self.params.len()
            )));
        }
        for id in fresh.ids().collect::<Vec<_>>() {
            let name = fresh.name(id).to_string();
            let src = self
                .params
                .find(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))?;
            let value = self.params.value(src);
            if value.shape() != fresh.value(id).shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    fresh.value(id).shape(),
                    value.shape()
                )));
            }
            fresh.value_mut(id).assign(value);
        }
        Ok(Model::from_parts(net, fresh))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            val_f1: self.val_f1,
            tensors: self
                .params
                .ids()
                .map(|id| TensorEntry {
                    name: self.params.name(id).to_string(),
                    shape: self.params.value(id).shape().to_vec(),
                    trainable: self.params.is_trainable(id),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for id in self.params.ids() {
            for v in self.params.value(id).iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint archive"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let mut data = &bytes[16 + len..];
        let mut params = ParamStore::new();
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if data.len() < 4 * n {
                return Err(corrupt("truncated tensor data"));
            }
            let values: Vec<f32> = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            let tensor = Tensor::from_shape_vec(ndarray::IxDyn(&t.shape), values).map_err(|e| corrupt(&e.to_string()))?;
            params.add(t.name, tensor, t.trainable);
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            epoch: header.epoch,
            val_f1: header.val_f1,
        })
    }
}
