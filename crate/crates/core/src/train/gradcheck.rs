//! Finite-difference check of the complete pretraining objective on a
//! tiny 64-bit configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::objective::{objective_with_targets, ObjectiveWeights};
use crate::data::{derive_seed, standard_coords};
use crate::diff::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::masking::{sample_mask, MaskConfig};
use crate::model::{init_params, Bound, Laya, ModelConfig};
use crate::sigreg::SigRegConfig;

#[derive(Debug, Clone)]
pub struct GradCheckSetup {
    pub model: ModelConfig,
    pub sigreg: SigRegConfig,
    pub mask: MaskConfig,
    pub channels: usize,
    pub patches: usize,
    pub batch: usize,
    pub query_weight: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl GradCheckSetup {
    /// 4 channels, 16 patches, D = 16, D_proj = 8, 4 queries, batch 8.
    pub fn tiny(seed: u64) -> Self {
        GradCheckSetup {
            model: ModelConfig {
                embed_dim: 8,
                n_queries: 4,
                mixer_heads: 2,
                model_dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                proj_hidden: Some(32),
                proj_dim: 8,
                predictor_depth: 1,
                predictor_heads: 2,
                ..ModelConfig::default()
            },
            sigreg: SigRegConfig {
                n_projections: 8,
                ..SigRegConfig::default()
            },
            mask: MaskConfig {
                ratio: 0.5,
                block_min: 2,
                block_max: 4,
            },
            channels: 4,
            patches: 16,
            batch: 8,
            query_weight: 1.0,
            epsilon: 1e-5,
            seed,
        }
    }
}

/// Maximum relative error between analytic and central-difference
/// gradients of the total loss with respect to every parameter.
pub fn objective_grad_check(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let store = init_params::<f64>(&setup.model, derive_seed(setup.seed, 1))?;
    let t = setup.patches * setup.model.patch_len;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, 2));
    let x: Vec<f64> = (0..setup.batch * setup.channels * t)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let x = Tensor::from_vec(vec![setup.batch, setup.channels, t], x)?;
    let coords = standard_coords(setup.channels);
    let mask = sample_mask(setup.patches, &setup.mask, derive_seed(setup.seed, 3))?;
    let weights = ObjectiveWeights {
        sigreg: &setup.sigreg,
        sigreg_seed: derive_seed(setup.seed, 4),
        query_weight: setup.query_weight,
    };
    let params: Vec<Tensor<f64>> = store.params.values().map(|p| p.value.clone()).collect();
    grad_check(&params, setup.epsilon, |g: &Graph<f64>, vars: &[Var]| {
        let live = Bound::from_vars(g, &store, vars)?;
        let frozen = Bound::new(g, &store, false);
        let model = Laya::new(&live, &store, &setup.model, true);
        let target = Laya::new(&frozen, &store, &setup.model, true);
        let xv = g.constant(x.clone());
        Ok(objective_with_targets(&model, Some(&target), xv, &coords, &mask, &weights)?.total)
    })
}
