//! Binary checkpoint format.
//!
//! ```text
//! b"LSEG" | u32 LE version | u64 LE header length | JSON header | f32 LE blobs
//! ```
//!
//! The header carries the model config, training metadata, and a directory
//! of `(name, shape, offset, len)` entries locating each blob in the data
//! section (offsets in bytes from the start of that section). Optimizer
//! moments, when present, are stored as `adam.m.<param>` / `adam.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, INIT_SCHEME};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 4] = b"LSEG";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
    pub param_count: u64,
    pub init: String,
}

impl TrainingMeta {
    pub fn new(model: &Model<f32>, epoch: u32, step: u64, lr: f64) -> Self {
        TrainingMeta {
            epoch,
            step,
            lr,
            seed: model.config().seed,
            param_count: model.param_count() as u64,
            init: INIT_SCHEME.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    /// Parameters and running statistics in model order.
    pub tensors: Vec<NamedBlob>,
    pub optimizer: Option<AdamState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Shape,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
    blobs: Vec<BlobEntry>,
    optimizer: Option<OptimizerHeader>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: TrainingMeta, optimizer: Option<&AdamState<f32>>) -> Self {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, shape, data, _)| NamedBlob { name, shape, data: data.to_vec() })
            .collect();
        Checkpoint { config: model.config().clone(), meta, tensors, optimizer: optimizer.cloned() }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedBlob> {
        self.tensors.iter().find(|b| b.name == name)
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::skeleton(self.config.clone())?;
        check_tensors(&model, &self.tensors)?;
        for b in &self.tensors {
            model.set_tensor(&b.name, &b.data)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let learnable: Vec<String> = learnable_names(&self.config)?;
        let mut blobs: Vec<(String, Shape, &[f32])> =
            self.tensors.iter().map(|b| (b.name.clone(), b.shape, b.data.as_slice())).collect();
        if let Some(opt) = &self.optimizer {
            if !opt.moments.is_empty() && opt.moments.len() != learnable.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tracks {} parameters, model has {}",
                    opt.moments.len(),
                    learnable.len()
                )));
            }
            for (name, mo) in learnable.iter().zip(&opt.moments) {
                let shape = self.tensor(name).map(|b| b.shape).unwrap_or(Shape::vector(mo.m.len()));
                blobs.push((format!("adam.m.{name}"), shape, &mo.m));
                blobs.push((format!("adam.v.{name}"), shape, &mo.v));
            }
        }
        let mut offset = 0u64;
        let entries: Vec<BlobEntry> = blobs
            .iter()
            .map(|(name, shape, data)| {
                let e = BlobEntry { name: name.clone(), shape: *shape, offset, len: data.len() as u64 };
                offset += 4 * data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            blobs: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, step: o.step }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blobs {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let data_start = (PREAMBLE as u64)
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))? as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        let data = &bytes[data_start..];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::new();
        let mut moments: Vec<(String, Vec<f32>)> = Vec::new();
        for e in &header.blobs {
            if e.offset != expected_offset || e.len != e.shape.numel() as u64 {
                return Err(bad(format!("blob '{}' has inconsistent offset or length", e.name)));
            }
            let end = e.offset + 4 * e.len;
            if end > data.len() as u64 {
                return Err(bad(format!("blob '{}' runs past end of file (truncated?)", e.name)));
            }
            let values: Vec<f32> = data[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end;
            if e.name.starts_with("adam.") {
                moments.push((e.name.clone(), values));
            } else {
                tensors.push(NamedBlob { name: e.name.clone(), shape: e.shape, data: values });
            }
        }
        if expected_offset != data.len() as u64 {
            return Err(bad(format!(
                "data section is {} bytes, directory describes {expected_offset}",
                data.len()
            )));
        }

        let skeleton = Model::<f32>::skeleton(header.config.clone())?;
        check_tensors(&skeleton, &tensors)?;

        let optimizer = match header.optimizer {
            None => None,
            Some(oh) => {
                let mut state = AdamState::new(oh.config);
                state.step = oh.step;
                if !moments.is_empty() {
                    let mut it = moments.into_iter();
                    for info in skeleton.param_infos().into_iter().filter(|i| i.learnable) {
                        let (Some((mn, m)), Some((vn, v))) = (it.next(), it.next()) else {
                            return Err(bad(format!("optimizer state missing for '{}'", info.name)));
                        };
                        if mn != format!("adam.m.{}", info.name) || vn != format!("adam.v.{}", info.name) || m.len() != info.shape.numel() {
                            return Err(bad(format!("optimizer state for '{}' is malformed", info.name)));
                        }
                        state.moments.push(Moments { m, v });
                    }
                    if it.next().is_some() {
                        return Err(bad("extra optimizer blobs".into()));
                    }
                }
                Some(state)
            }
        };
        Ok(Checkpoint { config: header.config, meta: header.meta, tensors, optimizer })
    }
}

fn learnable_names(config: &ModelConfig) -> Result<Vec<String>> {
    Ok(Model::<f32>::skeleton(config.clone())?
        .param_infos()
        .into_iter()
        .filter(|i| i.learnable)
        .map(|i| i.name)
        .collect())
}

/// Every tensor of `model` must appear exactly once with the same shape.
fn check_tensors(model: &Model<f32>, tensors: &[NamedBlob]) -> Result<()> {
    let infos = model.param_infos();
    if infos.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} tensors, model has {}",
            tensors.len(),
            infos.len()
        )));
    }
    for (info, b) in infos.iter().zip(tensors) {
        if info.name != b.name || info.shape != b.shape || b.data.len() != info.shape.numel() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' {:?} does not match model tensor '{}' {:?}",
                b.name, b.shape, info.name, info.shape
            )));
        }
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
