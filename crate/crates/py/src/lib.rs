//! Python module `laya`: synthetic data, metrics, the regularizer,
//! masking and short pretraining runs backed by `laya-core`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use laya_core::config::RunConfig;
use laya_core::data::{preprocess_with, synthesize_dataset};
use laya_core::masking::{sample_mask, MaskConfig};
use laya_core::probe::compute_metrics;
use laya_core::sigreg::{sigreg_value, SigRegConfig};
use laya_core::train::{objective_grad_check, GradCheckSetup, Trainer};
use laya_core::viz::{pca_rgb, state_shift_score};
use laya_core::LayaError;

fn to_py(e: LayaError) -> PyErr {
    match e {
        LayaError::Config { .. } | LayaError::InvalidArgument(_) | LayaError::Shape { .. } | LayaError::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Flattens equal-length rows into `(data, rows, cols)`.
fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize, usize)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok((rows.concat(), rows.len(), d))
}

fn parse_config(config_json: Option<&str>) -> PyResult<RunConfig> {
    let cfg = match config_json {
        Some(text) => RunConfig::from_json(text, std::path::Path::new("<python>")).map_err(to_py)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

#[pymodule]
mod laya {
    use super::*;

    /// Default run configuration as JSON.
    #[pyfunction]
    fn default_config() -> PyResult<String> {
        RunConfig::default().to_json().map_err(to_py)
    }

    /// Synthesizes and preprocesses a dataset; one dict per recording.
    #[pyfunction]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn synthesize<'py>(py: Python<'py>, config_json: Option<&str>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = parse_config(config_json)?;
        let raw = synthesize_dataset(&cfg.data, seed).map_err(to_py)?;
        raw.iter()
            .map(|r| {
                let r = preprocess_with(r, &cfg.preprocess).map_err(to_py)?;
                let d = PyDict::new(py);
                d.set_item("subject_id", &r.subject_id)?;
                d.set_item("sample_rate", r.sample_rate)?;
                d.set_item("channels", r.channels)?;
                d.set_item("signal", r.signal.clone())?;
                d.set_item("state_labels", r.state_labels.clone())?;
                Ok(d)
            })
            .collect()
    }

    /// Regularizer value on a batch of embeddings.
    #[pyfunction]
    #[pyo3(signature = (embeddings, seed=0, n_projections=64, scale_by_batch=true))]
    fn sigreg(embeddings: Vec<Vec<f64>>, seed: u64, n_projections: usize, scale_by_batch: bool) -> PyResult<f64> {
        let (data, b, d) = flatten(&embeddings)?;
        let cfg = SigRegConfig {
            n_projections,
            scale_by_batch,
            ..SigRegConfig::default()
        };
        cfg.validate().map_err(to_py)?;
        sigreg_value(&data, b, d, &cfg, seed).map_err(to_py)
    }

    /// Sorted masked patch indices.
    #[pyfunction]
    #[pyo3(signature = (n, ratio=0.6, block_min=5, block_max=10, seed=0))]
    fn mask(n: usize, ratio: f64, block_min: usize, block_max: usize, seed: u64) -> PyResult<Vec<usize>> {
        let cfg = MaskConfig {
            ratio,
            block_min,
            block_max,
        };
        Ok(sample_mask(n, &cfg, seed).map_err(to_py)?.masked)
    }

    /// Balanced accuracy, accuracy, F1 scores, kappa and confusion.
    #[pyfunction]
    fn metrics<'py>(py: Python<'py>, pred: Vec<u32>, truth: Vec<u32>) -> PyResult<Bound<'py, PyDict>> {
        let r = compute_metrics(&pred, &truth).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("balanced_accuracy", r.balanced_accuracy)?;
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("f1_macro", r.f1_macro)?;
        d.set_item("f1_weighted", r.f1_weighted)?;
        d.set_item("cohens_kappa", r.cohens_kappa)?;
        d.set_item("confusion", r.confusion)?;
        Ok(d)
    }

    /// Per-row RGB colors in [0, 1] from the top principal components.
    #[pyfunction]
    fn pca_colors(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<[f64; 3]>> {
        let (data, n, d) = flatten(&embeddings)?;
        pca_rgb(&data, n, d).map_err(to_py)
    }

    /// Between-state share of embedding variance.
    #[pyfunction]
    fn state_shift(embeddings: Vec<Vec<f64>>, labels: Vec<u32>) -> PyResult<f64> {
        let (data, n, d) = flatten(&embeddings)?;
        state_shift_score(&data, n, d, &labels).map_err(to_py)
    }

    /// Maximum relative gradient error of the tiny objective.
    #[pyfunction]
    #[pyo3(signature = (seed=0))]
    fn grad_check(py: Python<'_>, seed: u64) -> PyResult<f64> {
        let setup = GradCheckSetup::tiny(seed);
        let report = py.detach(|| objective_grad_check(&setup)).map_err(to_py)?;
        Ok(report.max_relative_error)
    }

    /// Runs pretraining in memory and returns per-step total losses.
    #[pyfunction]
    #[pyo3(signature = (config_json=None, seed=None))]
    fn pretrain(py: Python<'_>, config_json: Option<&str>, seed: Option<u64>) -> PyResult<Vec<f64>> {
        let mut cfg = parse_config(config_json)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        py.detach(|| -> laya_core::Result<Vec<f64>> {
            let recs = synthesize_dataset(&cfg.data, cfg.seed)?
                .iter()
                .map(|r| preprocess_with(r, &cfg.preprocess))
                .collect::<laya_core::Result<Vec<_>>>()?;
            let mut t = Trainer::<f32>::new(cfg.model.clone(), cfg.train.clone(), cfg.sigreg.clone(), cfg.seed)?;
            Ok(t.run(&recs, None, |_| {})?.iter().map(|m| m.loss_total).collect())
        })
        .map_err(to_py)
    }
}
