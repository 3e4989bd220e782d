//! JSON checkpoints.
//!
//! Parameters are stored by name with their shape and flat row-major data.
//! Floats are written in shortest round-trip form and parsed back exactly.

use std::fs;
use std::path::Path;

use dae_core::model::{Architecture, DaeModel, IntervalSpec, ModelKind};
use dae_core::training::{Checkpoint, TrainConfig};
use dae_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredParameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_boundaries: Option<Vec<f64>>,
    pub epoch: usize,
    pub eval_rho: Option<f64>,
    pub mean_sigma2: f64,
    pub train_config: TrainConfig,
    pub parameters: Vec<StoredParameter>,
}

impl CheckpointFile {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let arch = ck.model.architecture();
        CheckpointFile {
            format_version: FORMAT_VERSION,
            kind: ck.model.kind(),
            input_dim: arch.input_dim,
            hidden: arch.hidden,
            interval_boundaries: ck.model.interval_spec().map(|s| s.boundaries().to_vec()),
            epoch: ck.epoch,
            eval_rho: ck.eval_rho,
            mean_sigma2: ck.mean_sigma2,
            train_config: ck.config.clone(),
            parameters: ck
                .model
                .parameters()
                .into_iter()
                .map(|p| StoredParameter {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        let spec = self.interval_boundaries.map(IntervalSpec::new).transpose()?;
        let arch = Architecture {
            input_dim: self.input_dim,
            hidden: self.hidden,
        };
        let mut model = DaeModel::init(self.kind, &arch, spec, 0)?;
        let expected = model.parameters().len();
        if self.parameters.len() != expected {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, a {} model has {expected}",
                self.parameters.len(),
                self.kind
            )));
        }
        let tensors = self
            .parameters
            .into_iter()
            .map(|p| Ok((p.name, Tensor::new(p.shape, p.data)?)))
            .collect::<Result<Vec<(String, Tensor)>>>()?;
        model.load_parameters(|name| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t))?;
        Ok(Checkpoint {
            model,
            config: self.train_config,
            epoch: self.epoch,
            eval_rho: self.eval_rho,
            mean_sigma2: self.mean_sigma2,
        })
    }
}

pub fn to_json(ck: &Checkpoint) -> Result<String> {
    serde_json::to_string_pretty(&CheckpointFile::from_checkpoint(ck))
        .map_err(|e| Error::Data(format!("cannot serialize checkpoint: {e}")))
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid checkpoint: {e}")))?;
    file.into_checkpoint()
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, to_json(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
