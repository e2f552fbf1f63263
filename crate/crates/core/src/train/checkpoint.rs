//! Checkpoint directories: `state.json` plus a named-tensor container
//! holding parameters, buffers and optimizer moments. Each directory is
//! written under a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::diff::{container, DType, Real, Tensor};
use crate::error::{LayaError, Result};
use crate::model::{init_params, ModelConfig, ParamStore};
use crate::sigreg::SigRegConfig;

const STATE: &str = "state.json";
const STEM: &str = "model";
const LATEST: &str = "latest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    /// Number of completed steps.
    pub step: usize,
    pub opt_t: u64,
    pub seed: u64,
    pub dtype: DType,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sigreg: SigRegConfig,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| LayaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LayaError::io(path, e))
}

pub fn read_state(dir: &Path) -> Result<CheckpointState> {
    let path = dir.join(STATE);
    let text = fs::read(&path).map_err(|e| LayaError::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| LayaError::Format {
        path,
        message: e.to_string(),
    })
}

/// Resolves `root/latest`, or `root` itself when it is a checkpoint.
pub fn latest_checkpoint(root: &Path) -> Result<PathBuf> {
    if root.join(STATE).is_file() {
        return Ok(root.to_path_buf());
    }
    let pointer = root.join(LATEST);
    let name = fs::read_to_string(&pointer).map_err(|e| LayaError::io(&pointer, e))?;
    Ok(root.join(name.trim()))
}

/// Model configuration and parameters (any stored dtype, cast to `F`).
pub fn load_model<F: Real>(path: &Path) -> Result<(ModelConfig, ParamStore<F>)> {
    let dir = latest_checkpoint(path)?;
    let state = read_state(&dir)?;
    let mut store = init_params::<F>(&state.model, 0)?;
    let tensors: BTreeMap<String, Tensor<F>> = container::load(&dir, STEM)?;
    store.load_named(tensors)?;
    Ok((state.model, store))
}

impl<F: Real> Trainer<F> {
    /// Writes `root/step_XXXXXX` and repoints `root/latest` at it.
    pub fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        fs::create_dir_all(root).map_err(|e| LayaError::io(root, e))?;
        let name = format!("step_{:06}", self.step);
        let dir = root.join(&name);
        let tmp = root.join(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| LayaError::io(&tmp, e))?;
        }
        let mut named = self.params.named_tensors();
        for (k, t) in &self.opt.m {
            named.push((format!("opt.m.{k}"), t));
        }
        for (k, t) in &self.opt.v {
            named.push((format!("opt.v.{k}"), t));
        }
        container::save(&tmp, STEM, named.iter().map(|(k, t)| (k.as_str(), *t)))?;
        let state = CheckpointState {
            step: self.step,
            opt_t: self.opt.t,
            seed: self.seed,
            dtype: F::DTYPE,
            model: self.model.clone(),
            train: self.train.clone(),
            sigreg: self.sigreg.clone(),
        };
        let path = tmp.join(STATE);
        fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(|e| LayaError::io(&path, e))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| LayaError::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| LayaError::io(&dir, e))?;
        write_atomic(&root.join(LATEST), name.as_bytes())?;
        Ok(dir)
    }

    /// Restores a trainer, optimizer state included.
    pub fn resume(path: &Path) -> Result<Self> {
        let dir = latest_checkpoint(path)?;
        let state = read_state(&dir)?;
        let mut trainer = Trainer::<F>::new(state.model, state.train, state.sigreg, state.seed)?;
        let mut tensors: BTreeMap<String, Tensor<F>> = container::load(&dir, STEM)?;
        for (prefix, moments) in [("opt.m.", &mut trainer.opt.m), ("opt.v.", &mut trainer.opt.v)] {
            for (k, t) in moments.iter_mut() {
                *t = tensors
                    .remove(&format!("{prefix}{k}"))
                    .ok_or_else(|| LayaError::Data(format!("checkpoint lacks optimizer moment `{prefix}{k}`")))?;
            }
        }
        trainer.params.load_named(tensors)?;
        trainer.opt.t = state.opt_t;
        trainer.step = state.step;
        Ok(trainer)
    }
}
