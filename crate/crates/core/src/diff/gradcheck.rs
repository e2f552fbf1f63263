//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{LayaError, Result};

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, flat entry) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares analytic gradients of `loss_fn` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, reporting
/// `max |analytic − numeric| / max(1, |numeric|)`.
///
/// `loss_fn` receives a fresh graph and one leaf per parameter and must
/// return a scalar; it has to be deterministic.
pub fn grad_check<L>(params: &[Tensor<f64>], epsilon: f64, loss_fn: L) -> Result<GradCheckReport>
where
    L: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = loss_fn(&g, &vars)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(LayaError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    drop(grads);
    drop(g);

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[pi].data()[ei] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (pi, ei);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
