//! Binary model container.
//!
//! ```text
//! b"VFMCKPT1" | u64 LE header length | JSON header | raw little-endian tensors
//! ```
//!
//! The header lists every tensor with its shape and byte range. Tensors are
//! stored in name order, so equal models serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{ModalitySpec, Stage, TrainConfig};
use crate::encoders::{EncoderConfig, HeadKind, Model, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::preprocess::NormStats;
use crate::training::EpochRecord;

pub const MAGIC: &[u8; 8] = b"VFMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON form of a serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadInfo {
    pub kind: HeadKind,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub crate_version: String,
    pub stage: Stage,
    pub seed: u64,
    pub dtype: String,
    pub specs: Vec<ModalitySpec>,
    pub encoder: EncoderConfig,
    pub head: Option<HeadInfo>,
    pub norm: NormStats,
    pub train_config: Option<TrainConfig>,
    pub config_hash: Option<String>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    /// Little-endian element bytes in the checkpoint dtype.
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
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

fn bytes_tensor(stored: &StoredTensor, dtype: DType) -> Result<Tensor> {
    let dev = &Device::Cpu;
    let t = match dtype {
        DType::F32 => {
            let v: Vec<f32> = stored
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, stored.shape.as_slice(), dev)?
        }
        _ => {
            let v: Vec<f64> = stored
                .bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, stored.shape.as_slice(), dev)?
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        seed: u64,
        train_config: Option<&TrainConfig>,
        history: Vec<EpochRecord>,
    ) -> Result<Self> {
        let dtype = model.store.dtype();
        let tensors = model
            .store
            .iter()
            .map(|(name, var)| {
                Ok((
                    name.to_string(),
                    StoredTensor {
                        shape: var.dims().to_vec(),
                        bytes: tensor_bytes(&var.as_tensor().to_dtype(dtype)?)?,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let config_hash = match train_config {
            Some(c) => Some(config_hash(&(c, &model.encoder_config))?),
            None => None,
        };
        Ok(Self {
            meta: CheckpointMeta {
                version: FORMAT_VERSION,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                stage: model.stage,
                seed,
                dtype: dtype_name(dtype)?.to_string(),
                specs: model.specs.clone(),
                encoder: model.encoder_config.clone(),
                head: model.head.as_ref().map(|h| HeadInfo {
                    kind: h.kind,
                    num_classes: h.num_classes,
                }),
                norm: model.norm.clone(),
                train_config: train_config.cloned(),
                config_hash,
                history,
            },
            tensors,
        })
    }

    /// Rebuilds the model and loads every stored tensor into it.
    pub fn to_model(&self) -> Result<Model> {
        let dtype = parse_dtype(&self.meta.dtype)?;
        let mut model = Model::new(&self.meta.specs, &self.meta.encoder, self.meta.stage, dtype)?;
        if let Some(h) = self.meta.head {
            model.attach_head(h.kind, h.num_classes, 0)?;
        }
        model.norm = self.meta.norm.clone();
        let expected: Vec<&str> = model.store.names().collect();
        let found: Vec<&str> = self.tensors.keys().map(String::as_str).collect();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "tensor names do not match the model ({} stored, {} expected)",
                found.len(),
                expected.len()
            )));
        }
        for (name, stored) in &self.tensors {
            model.store.set(name, &bytes_tensor(stored, dtype)?)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.bytes.len(),
                };
                offset += t.bytes.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing magic bytes".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("header runs past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.meta.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported",
                header.meta.version
            )));
        }
        let width = match parse_dtype(&header.meta.dtype)? {
            DType::F32 => 4,
            _ => 8,
        };
        let body = &bytes[body_start..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0;
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.len != count * width || e.offset + e.len > body.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` has an invalid byte range", e.name)));
            }
            expected_offset += e.len;
            tensors.insert(
                e.name,
                StoredTensor {
                    shape: e.shape,
                    bytes: body[e.offset..e.offset + e.len].to_vec(),
                },
            );
        }
        if expected_offset != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Hash over the names, shapes and bytes of tensors whose name starts
    /// with `prefix`.
    pub fn tensor_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            h.update(name.as_bytes());
            h.update(format!("{:?}", t.shape).as_bytes());
            h.update(&t.bytes);
        }
        hex::encode(h.finalize())
    }

    pub fn encoder_hash(&self) -> String {
        self.tensor_hash(ENCODER_PREFIX)
    }
}

/// Hash over the live encoder parameters of a model.
pub fn encoder_hash(model: &Model) -> Result<String> {
    Ok(Checkpoint::from_model(model, 0, None, Vec::new())?.encoder_hash())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{default_specs, EncoderKind};

    fn model(kind: EncoderKind) -> Model {
        let mut m = Model::new(&default_specs(), &EncoderConfig::new(kind), Stage::Supervised, DType::F32).unwrap();
        m.attach_head(HeadKind::SupervisedFusion, 4, 3).unwrap();
        m.norm.modalities.insert("acoustic".into(), crate::preprocess::PlaneStats {
            mean_re: 0.1 + 0.2,
            std_re: 1.0 / 3.0,
            mean_im: -1e-300,
            std_im: 7.0,
        });
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for kind in [EncoderKind::Deepsense, EncoderKind::Swin] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            let ckpt = Checkpoint::from_model(&model(kind), 9, None, Vec::new()).unwrap();
            ckpt.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ckpt);
            let rebuilt = Checkpoint::from_model(&loaded.to_model().unwrap(), 9, None, Vec::new()).unwrap();
            assert_eq!(rebuilt.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let ckpt = Checkpoint::from_model(&model(EncoderKind::Deepsense), 0, None, Vec::new()).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().code(), "CHECKPOINT_INVALID");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn encoder_hash_ignores_head() {
        let mut m = model(EncoderKind::Deepsense);
        let before = encoder_hash(&m).unwrap();
        m.reset_output_layer(4, 99).unwrap();
        assert_eq!(encoder_hash(&m).unwrap(), before);
    }
}
