//! Checkpoints: `model.json` (architecture, non-trainable state, tensor
//! shapes, free-form metadata) plus `weights.bin` (little-endian f64 tensors
//! concatenated in parameter order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autodiff::Tensor;
use super::models::{CnnModel, IinnModel, ScatNetModel};
use super::Predictor;
use crate::error::{Error, Result};
use crate::ga::GaModel;
use crate::io::{read_f64, read_json, write_f64, write_json};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointModel {
    Ga(GaModel),
    Iinn(IinnModel),
    ScatNet(ScatNetModel),
    Cnn(CnnModel),
}

impl CheckpointModel {
    pub fn name(&self) -> &'static str {
        match self {
            CheckpointModel::Ga(_) => "ga",
            CheckpointModel::Iinn(_) => "iinn",
            CheckpointModel::ScatNet(_) => "scatnet",
            CheckpointModel::Cnn(_) => "cnn",
        }
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            CheckpointModel::Ga(m) => m,
            CheckpointModel::Iinn(m) => m,
            CheckpointModel::ScatNet(m) => m,
            CheckpointModel::Cnn(m) => m,
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        match self {
            CheckpointModel::Ga(m) => vec![Tensor::vector(m.pattern.clone())],
            CheckpointModel::Iinn(m) => m.params.clone(),
            CheckpointModel::ScatNet(m) => m.params.clone(),
            CheckpointModel::Cnn(m) => m.params.clone(),
        }
    }

    fn restore(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        match self {
            CheckpointModel::Ga(m) => {
                m.pattern = tensors.into_iter().next().map(|t| t.data).unwrap_or_default();
            }
            CheckpointModel::Iinn(m) => m.params = tensors,
            CheckpointModel::ScatNet(m) => {
                m.params = tensors;
                m.rebuild_bank()?;
            }
            CheckpointModel::Cnn(m) => m.params = tensors,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    pub shapes: Vec<Vec<usize>>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, model: &CheckpointModel, metadata: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = model.tensors();
    let mut stripped = model.clone();
    if let CheckpointModel::Ga(m) = &mut stripped {
        m.pattern.clear();
    }
    let ckpt = Checkpoint {
        model: stripped,
        shapes: tensors.iter().map(|t| t.shape.clone()).collect(),
        metadata,
    };
    write_json(&dir.join("model.json"), &ckpt)?;
    let blob: Vec<f64> = tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    write_f64(&dir.join("weights.bin"), &blob)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mut ckpt: Checkpoint = read_json(&dir.join("model.json"))?;
    let blob = read_f64(&dir.join("weights.bin"))?;
    let expected: usize = ckpt.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != expected {
        return Err(Error::shape(
            format!("{expected} weights"),
            format!("{} in weights.bin", blob.len()),
        ));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(ckpt.shapes.len());
    for shape in &ckpt.shapes {
        let n: usize = shape.iter().product();
        tensors.push(Tensor::new(shape.clone(), blob[offset..offset + n].to_vec())?);
        offset += n;
    }
    ckpt.model.restore(tensors)?;
    Ok(ckpt)
}
