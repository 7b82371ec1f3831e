//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `MANCKPT1` |
//! | 8 | 4 | `u32` manifest length `L` |
//! | 12 | `L` | UTF-8 JSON [`Manifest`] |
//! | 12+L | 8·P | every parameter as `f64`, tensors in manifest order, row-major |
//!
//! `P` is the sum of the tensor sizes listed in the manifest; the file ends
//! right after the last value.

use crate::fusion::{build_variant, ManModel, ModalityDims, Variant, VariantPlan};
use crate::layers::{Parameterized, Task};
use crate::training::TrainedModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 8] = b"MANCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest does not describe a valid model: {0}")]
    Model(#[from] crate::fusion::FusionError),
    #[error("tensor {index}: manifest has {expected}, model has {got}")]
    Tensor {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("{0} trailing bytes after parameters")]
    Trailing(usize),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub variant: Variant,
    pub task: Task,
    pub modalities: Vec<ModalityDims>,
    pub attention_dim: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn tensors_of<M: Parameterized<f64>>(m: &M) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    m.visit_params(&mut |name, t| {
        out.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
    });
    out
}

fn model_tensors(model: &TrainedModel) -> Vec<TensorEntry> {
    match model {
        TrainedModel::Fused(m) => tensors_of(m),
        TrainedModel::Unimodal(n) => tensors_of(n),
    }
}

fn model_params(model: &TrainedModel) -> Vec<f64> {
    match model {
        TrainedModel::Fused(m) => m.flat_params(),
        TrainedModel::Unimodal(n) => n.flat_params(),
    }
}

/// Untrained model with the structure `plan` describes.
pub fn skeleton(plan: &VariantPlan) -> Result<TrainedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if plan.variant.is_unimodal() {
        let mut nets = plan.fresh_subnetworks::<f64, _>(true, &mut rng);
        return Ok(TrainedModel::Unimodal(nets.remove(0)));
    }
    let nets = plan.fresh_subnetworks::<f64, _>(false, &mut rng);
    Ok(TrainedModel::Fused(ManModel::assemble(
        nets,
        plan.attention_dim,
        plan.task,
        &mut rng,
    )?))
}

pub fn to_bytes(plan: &VariantPlan, model: &TrainedModel) -> Vec<u8> {
    let manifest = Manifest {
        version: FORMAT_VERSION,
        variant: plan.variant.clone(),
        task: plan.task,
        modalities: plan.modalities.clone(),
        attention_dim: plan.attention_dim,
        tensors: model_tensors(model),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let params = model_params(model);
    let mut out = Vec::with_capacity(12 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Manifest, TrainedModel)> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or(CheckpointError::Truncated("manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let plan = build_variant(
        &manifest.modalities,
        manifest.attention_dim,
        manifest.task,
        &manifest.variant,
    )?;
    let mut model = skeleton(&plan)?;
    let expected = model_tensors(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(CheckpointError::Tensor {
            index: expected.len().min(manifest.tensors.len()),
            expected: format!("{} tensors", manifest.tensors.len()),
            got: format!("{} tensors", expected.len()),
        });
    }
    for (i, (want, have)) in manifest.tensors.iter().zip(&expected).enumerate() {
        if want != have {
            return Err(CheckpointError::Tensor {
                index: i,
                expected: format!("{} {:?}", want.name, want.shape),
                got: format!("{} {:?}", have.name, have.shape),
            });
        }
    }
    let mut values = bytes[12 + len..].chunks_exact(8);
    let count: usize = expected
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if values.len() < count {
        return Err(CheckpointError::Truncated("parameters"));
    }
    let mut fill = |_: &str, t: &mut crate::tensor::Tensor<f64>| {
        for slot in t.data_mut() {
            let chunk = values.next().expect("length checked");
            *slot = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    };
    match &mut model {
        TrainedModel::Fused(m) => m.visit_params_mut(&mut fill),
        TrainedModel::Unimodal(n) => n.visit_params_mut(&mut fill),
    }
    let rest = values.len() * 8 + values.remainder().len();
    if rest != 0 {
        return Err(CheckpointError::Trailing(rest));
    }
    Ok((manifest, model))
}

pub fn save(path: impl AsRef<Path>, plan: &VariantPlan, model: &TrainedModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(plan, model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<(Manifest, TrainedModel)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

impl Manifest {
    pub fn plan(&self) -> Result<VariantPlan> {
        Ok(build_variant(
            &self.modalities,
            self.attention_dim,
            self.task,
            &self.variant,
        )?)
    }
}
