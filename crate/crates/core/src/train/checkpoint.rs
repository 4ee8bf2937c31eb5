use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::container::{frame_header, parse_header, push_f32s, read_f32s, read_file, write_file};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

use super::optim::AdamState;
use super::trainer::{MetricSnapshot, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRESCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: usize,
    pub metrics: Option<MetricSnapshot>,
    pub params: ModelParams,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    iteration: usize,
    adam_step: u64,
    metrics: Option<MetricSnapshot>,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    /// Parameters, provided they match the layout `model` declares.
    pub fn params_for(&self, model: &ModelConfig) -> Result<&ModelParams> {
        self.params.check_layout(model)?;
        Ok(&self.params)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        iteration: ckpt.iteration,
        adam_step: ckpt.adam.step,
        metrics: ckpt.metrics,
        params: ckpt
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = frame_header(CHECKPOINT_MAGIC, &manifest)?;
    for (_, t) in ckpt.params.iter() {
        push_f32s(&mut out, t.data());
    }
    for moments in [&ckpt.adam.m, &ckpt.adam.v] {
        for (name, _) in ckpt.params.iter() {
            let m = moments
                .get(name)
                .ok_or_else(|| Error::NameSetMismatch(format!("optimizer state lacks `{name}`")))?;
            push_f32s(&mut out, m);
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload): (Manifest, _) = parse_header(bytes, CHECKPOINT_MAGIC)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: manifest.version,
        });
    }
    let counts: Vec<usize> = manifest.params.iter().map(|p| p.shape.iter().product()).collect();
    let total: usize = counts.iter().sum();
    let expected = total * 4 * 3;
    if payload.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let values = read_f32s(payload);
    let mut offset = 0;
    let mut take = |n: usize| {
        let s = &values[offset..offset + n];
        offset += n;
        s.to_vec()
    };
    let mut params = IndexMap::new();
    for (entry, &n) in manifest.params.iter().zip(&counts) {
        let t = Tensor::new(entry.shape.clone(), take(n))?;
        if params.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Header(format!("duplicate parameter `{}`", entry.name)));
        }
    }
    let mut moments = || -> IndexMap<String, Vec<f32>> {
        manifest
            .params
            .iter()
            .zip(&counts)
            .map(|(e, &n)| (e.name.clone(), take(n)))
            .collect()
    };
    let m = moments();
    let v = moments();
    Ok(Checkpoint {
        config: manifest.config,
        iteration: manifest.iteration,
        metrics: manifest.metrics,
        params: ModelParams::from_map(params),
        adam: AdamState {
            step: manifest.adam_step,
            m,
            v,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
