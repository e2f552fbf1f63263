//! Pretraining loop: batches, masks, objective, AdamW, logging and
//! checkpoints. Every stochastic choice of step `k` derives from
//! `(seed, k)`, so a run resumed from a checkpoint matches an
//! uninterrupted one.

mod checkpoint;
mod gradcheck;
mod objective;
mod optim;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{latest_checkpoint, load_model, read_state, CheckpointState};
pub use gradcheck::{objective_grad_check, GradCheckSetup};
pub use objective::{objective, objective_with_targets, Objective, ObjectiveWeights};
pub use optim::{adamw_update, clip_grad_norm, lr_at, AdamState, AdamWConfig};

use crate::data::{derive_seed, sample_windows, Recording, WindowBatch};
use crate::diff::{DType, Graph, Real, Tensor};
use crate::error::{LayaError, Result};
use crate::masking::{sample_mask, MaskConfig};
use crate::model::{init_params, Bound, Laya, ModelConfig, ParamStore};
use crate::sigreg::{SigRegConfig, MIN_BATCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch: usize,
    pub window_seconds: f64,
    pub query_loss_weight: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub mask: MaskConfig,
    pub adam: AdamWConfig,
    pub dtype: DType,
    /// Checkpoint cadence in steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-4,
            min_lr: 1e-6,
            warmup_steps: 100,
            weight_decay: 0.05,
            batch: 64,
            window_seconds: 16.0,
            query_loss_weight: 1.0,
            grad_clip: 1.0,
            mask: MaskConfig::default(),
            adam: AdamWConfig::default(),
            dtype: DType::F32,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(LayaError::config("train.steps", "must be positive"));
        }
        if self.warmup_steps >= self.steps {
            return Err(LayaError::config("train.warmup_steps", "must be smaller than steps"));
        }
        for (name, v) in [
            ("train.lr", self.lr),
            ("train.min_lr", self.min_lr),
            ("train.weight_decay", self.weight_decay),
            ("train.query_loss_weight", self.query_loss_weight),
            ("train.grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LayaError::config(name, "must be finite and >= 0"));
            }
        }
        if self.batch < MIN_BATCH {
            return Err(LayaError::config("train.batch", format!("must be >= {MIN_BATCH}")));
        }
        if !(self.window_seconds > 0.0) {
            return Err(LayaError::config("train.window_seconds", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_sigreg: f64,
    pub loss_query: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean over dimensions of the batch std of `p_cls`.
    pub embedding_std: f64,
}

/// Per-step seeds: (windows, mask, projections).
pub fn step_seeds(seed: u64, step: usize) -> (u64, u64, u64) {
    let base = derive_seed(seed, 0x5_7E9 + step as u64);
    (derive_seed(base, 1), derive_seed(base, 2), derive_seed(base, 3))
}

/// Seed stream used for parameter initialization.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x1_417)
}

fn batch_std<F: Real>(t: &Tensor<F>) -> f64 {
    let (b, d) = (t.shape()[0], t.shape()[1]);
    let x = t.to_f64_vec();
    (0..d)
        .map(|j| {
            let mean = (0..b).map(|i| x[i * d + j]).sum::<f64>() / b as f64;
            let var = (0..b).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / b as f64;
            var.sqrt()
        })
        .sum::<f64>()
        / d as f64
}

pub struct Trainer<F: Real> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sigreg: SigRegConfig,
    pub seed: u64,
    pub params: ParamStore<F>,
    pub opt: AdamState<F>,
    /// Index of the next step to run.
    pub step: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: ModelConfig, train: TrainConfig, sigreg: SigRegConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        sigreg.validate()?;
        let params = init_params::<F>(&model, init_seed(seed))?;
        let opt = AdamState::new(&params);
        Ok(Trainer {
            model,
            train,
            sigreg,
            seed,
            params,
            opt,
            step: 0,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.train;
        lr_at(step, t.steps, t.warmup_steps, t.lr, t.min_lr)
    }

    /// Crops of the current step from `recordings`.
    pub fn batch_for_step(&self, recordings: &[Recording], step: usize) -> Result<WindowBatch> {
        let (ws, _, _) = step_seeds(self.seed, step);
        sample_windows(recordings, self.train.window_seconds, self.train.batch, self.model.patch_len, ws)
    }

    pub fn train_step(&mut self, recordings: &[Recording]) -> Result<StepMetrics> {
        let batch = self.batch_for_step(recordings, self.step)?;
        self.step_on_batch(&batch)
    }

    /// One optimizer update on `batch`.
    pub fn step_on_batch(&mut self, batch: &WindowBatch) -> Result<StepMetrics> {
        let step = self.step;
        let (_, mask_seed, sig_seed) = step_seeds(self.seed, step);
        let n = batch.samples / self.model.patch_len;
        let mask = sample_mask(n, &self.train.mask, mask_seed)?;
        let diverged = |message: String| LayaError::Diverged {
            step,
            message,
            last_good: "none".into(),
        };

        let g = Graph::<F>::new();
        let bound = Bound::new(&g, &self.params, true);
        let model = Laya::new(&bound, &self.params, &self.model, true);
        let x = Tensor::from_vec(
            vec![batch.batch, batch.channels, batch.samples],
            batch.x.iter().map(|&v| F::from_f64_lossy(v as f64)).collect(),
        )?;
        let x = g.constant(x);
        let weights = ObjectiveWeights {
            sigreg: &self.sigreg,
            sigreg_seed: sig_seed,
            query_weight: self.train.query_loss_weight,
        };
        let obj = objective(&model, x, &batch.coords, &mask, &weights).map_err(|e| match e {
            LayaError::NonFinite { op } => diverged(format!("non-finite value in {op}")),
            other => other,
        })?;
        let mut grads_all = g.backward(obj.total).map_err(|e| diverged(e.to_string()))?;
        let mut grads: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (name, &v) in bound.vars() {
            let shape = self.params.params[name].value.shape().to_vec();
            let gr = grads_all.take(v).unwrap_or_else(|| Tensor::zeros(shape));
            grads.insert(name.clone(), gr);
        }
        let grad_norm = clip_grad_norm(&mut grads, self.train.grad_clip);
        let lr = self.lr(step);
        adamw_update(&mut self.params, &grads, &mut self.opt, &self.train.adam, lr, self.train.weight_decay)?;

        let mom = F::from_f64_lossy(self.model.bn_momentum);
        let keep = F::one() - mom;
        for st in &obj.bn_stats {
            let rm = self.params.buffers.get_mut(&format!("{}.running_mean", st.name)).expect("bn buffer");
            for (r, &b) in rm.data_mut().iter_mut().zip(&st.mean) {
                *r = mom * *r + keep * b;
            }
            let rv = self.params.buffers.get_mut(&format!("{}.running_var", st.name)).expect("bn buffer");
            for (r, &b) in rv.data_mut().iter_mut().zip(&st.var) {
                *r = mom * *r + keep * b;
            }
        }

        let scalar = |v| g.scalar(v).to_f64_lossy();
        let metrics = StepMetrics {
            step,
            loss_total: scalar(obj.total),
            loss_mse: scalar(obj.mse),
            loss_sigreg: scalar(obj.sigreg),
            loss_query: scalar(obj.query),
            lr,
            grad_norm,
            embedding_std: batch_std(&g.value(obj.p_cls)),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `self.train.steps`, appending JSON lines to
    /// `out/metrics.jsonl` and writing checkpoints under
    /// `out/checkpoints` when `out` is given.
    pub fn run(
        &mut self,
        recordings: &[Recording],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        self.run_until(recordings, self.train.steps, out, &mut on_step)
    }

    pub fn run_until(
        &mut self,
        recordings: &[Recording],
        until: usize,
        out: Option<&Path>,
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| LayaError::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| LayaError::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut last_good: Option<PathBuf> = out.and_then(|d| latest_checkpoint(&d.join("checkpoints")).ok());
        let mut history = Vec::new();
        let until = until.min(self.train.steps);
        while self.step < until {
            let m = self.train_step(recordings).map_err(|e| match e {
                LayaError::Diverged { step, message, .. } => LayaError::Diverged {
                    step,
                    message,
                    last_good: last_good
                        .as_ref()
                        .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
                },
                other => other,
            })?;
            if let Some((f, path)) = log.as_mut() {
                let line = serde_json::to_string(&m)?;
                writeln!(f, "{line}").map_err(|e| LayaError::io(path.as_path(), e))?;
            }
            on_step(&m);
            history.push(m);
            if let Some(dir) = out {
                let every = self.train.checkpoint_every;
                let done = self.step == self.train.steps;
                if done || (every > 0 && self.step % every == 0) {
                    last_good = Some(self.save_checkpoint(&dir.join("checkpoints"))?);
                }
            }
        }
        Ok(history)
    }
}
