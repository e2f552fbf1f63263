//! The masked latent prediction objective for one batch.

use crate::diff::{Graph, Real, Var};
use crate::error::Result;
use crate::masking::MaskSpec;
use crate::model::{mse, query_specialization_loss, BnStats, Laya};
use crate::sigreg::{sigreg_loss, SigRegConfig};

/// Every intermediate of one objective evaluation.
pub struct Objective<F> {
    pub total: Var,
    pub mse: Var,
    pub sigreg: Var,
    pub query: Var,
    /// Full-pass embeddings `[B, N, D]`.
    pub z: Var,
    pub z_cls: Var,
    pub affinity: Var,
    /// Projected stop-gradient targets `[B, N, D_proj]`.
    pub targets: Var,
    pub p_cls: Var,
    pub p_ctx: Var,
    pub t_hat: Var,
    /// Targets at the masked positions.
    pub t_masked: Var,
    pub bn_stats: Vec<BnStats<F>>,
}

pub struct ObjectiveWeights<'a> {
    pub sigreg: &'a SigRegConfig,
    pub sigreg_seed: u64,
    pub query_weight: f64,
}

/// Runs the pretraining forward pass in order: full-pass encode, pool,
/// project stop-gradient targets, project the summary, context-pass
/// encode, project context, predict, then combine the losses.
pub fn objective<F: Real>(
    model: &Laya<'_, '_, F>,
    x: Var,
    coords: &[[f64; 3]],
    mask: &MaskSpec,
    weights: &ObjectiveWeights<'_>,
) -> Result<Objective<F>> {
    objective_with_targets(model, None, x, coords, mask, weights)
}

/// As [`objective`], but when `frozen` is given the target embeddings
/// come from that (constant-parameter) copy of the encoder instead of a
/// stop-gradient on the full pass. At equal parameter values both give
/// the same loss and gradients; the frozen form is differentiable end to
/// end, which finite differences need.
pub fn objective_with_targets<F: Real>(
    model: &Laya<'_, '_, F>,
    frozen: Option<&Laya<'_, '_, F>>,
    x: Var,
    coords: &[[f64; 3]],
    mask: &MaskSpec,
    weights: &ObjectiveWeights<'_>,
) -> Result<Objective<F>> {
    let g: &Graph<F> = model.g;
    let (z, z_cls, mixed) = model.embed(x, coords)?;
    let target_in = match frozen {
        Some(f) => f.embed(x, coords)?.0,
        None => g.stop_gradient(z),
    };
    let targets = model.project(target_in, true)?;
    let p_cls = model.project(z_cls, false)?;
    let z_ctx = model.encode_context(mixed.s, mask)?;
    let p_ctx = model.project(z_ctx, false)?;
    let t_hat = model.predict(p_ctx, mask)?;
    let t_masked = g.index_select(targets, 1, &mask.masked)?;
    let l_mse = mse(g, t_hat, t_masked)?;
    let l_sig = sigreg_loss(g, p_cls, weights.sigreg, weights.sigreg_seed)?;
    let l_query = query_specialization_loss(g, mixed.affinity)?;
    let lambda = F::from_f64_lossy(weights.sigreg.lambda);
    let wq = F::from_f64_lossy(weights.query_weight);
    let total = g.add(g.add(l_mse, g.scale(l_sig, lambda)?)?, g.scale(l_query, wq)?)?;
    Ok(Objective {
        total,
        mse: l_mse,
        sigreg: l_sig,
        query: l_query,
        z,
        z_cls,
        affinity: mixed.affinity,
        targets,
        p_cls,
        p_ctx,
        t_hat,
        t_masked,
        bn_stats: model.take_stats(),
    })
}
