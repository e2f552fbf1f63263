use serde::{Deserialize, Serialize};

use crate::error::{LayaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_len: usize,
    /// Per-channel patch embedding width (E).
    pub embed_dim: usize,
    pub n_queries: usize,
    pub mixer_heads: usize,
    /// Encoder width (D).
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Projector hidden width; `None` means `4 * model_dim`.
    pub proj_hidden: Option<usize>,
    /// Projection / predictor width (D_proj).
    pub proj_dim: usize,
    pub predictor_depth: usize,
    pub predictor_heads: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    /// Batch-norm statistics over batch x positions (true) or per
    /// position over the batch only (false).
    pub bn_over_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_len: 25,
            embed_dim: 32,
            n_queries: 16,
            mixer_heads: 4,
            model_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            proj_hidden: None,
            proj_dim: 32,
            predictor_depth: 2,
            predictor_heads: 2,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            bn_momentum: 0.9,
            bn_over_positions: true,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.proj_hidden.unwrap_or(4 * self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("model.{f}");
        let nonzero = [
            ("patch_len", self.patch_len),
            ("embed_dim", self.embed_dim),
            ("n_queries", self.n_queries),
            ("mixer_heads", self.mixer_heads),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("proj_dim", self.proj_dim),
            ("predictor_heads", self.predictor_heads),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(LayaError::config(field(name), "must be positive"));
            }
        }
        if self.embed_dim % 2 != 0 {
            return Err(LayaError::config(field("embed_dim"), "must be even"));
        }
        if self.embed_dim % self.mixer_heads != 0 {
            return Err(LayaError::config(field("mixer_heads"), "must divide embed_dim"));
        }
        let even_heads = [
            ("heads", self.model_dim, self.heads),
            ("predictor_heads", self.proj_dim, self.predictor_heads),
        ];
        for (name, dim, h) in even_heads {
            if dim % h != 0 || (dim / h) % 2 != 0 {
                return Err(LayaError::config(
                    field(name),
                    format!("must divide {dim} into even head widths"),
                ));
            }
        }
        if self.proj_dim >= self.model_dim {
            return Err(LayaError::config(field("proj_dim"), "must be smaller than model_dim"));
        }
        if self.hidden() == 0 {
            return Err(LayaError::config(field("proj_hidden"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(LayaError::config(field("bn_momentum"), "must lie in [0, 1)"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(LayaError::config(field("norm_eps"), "must be positive"));
        }
        Ok(())
    }
}
