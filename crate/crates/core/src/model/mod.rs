//! Patch embedder, channel mixer, RoPE transformer encoder, batch-norm
//! projector and predictor, wired into the masked latent objective.

mod config;
pub mod mixer;
mod params;

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use mixer::{fourier_coord_features, fourier_raw_features, query_specialization_loss};
pub use params::{Bound, Param, ParamStore};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{LayaError, Result};
use crate::masking::MaskSpec;

const INIT_STD: f64 = 0.02;

fn c<F: Real>(v: f64) -> F {
    F::from_f64_lossy(v)
}

fn add_linear<F: Real>(s: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) {
    s.trunc_normal(rng, &format!("{name}.weight"), &[i, o], INIT_STD);
    s.zeros(&format!("{name}.bias"), &[o]);
}

fn add_norm<F: Real>(s: &mut ParamStore<F>, name: &str, d: usize) {
    s.ones(&format!("{name}.gamma"), &[d]);
    s.zeros(&format!("{name}.beta"), &[d]);
}

fn add_block<F: Real>(s: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, d: usize, ratio: usize) {
    add_norm(s, &format!("{name}.norm1"), d);
    add_linear(s, rng, &format!("{name}.attn.qkv"), d, 3 * d);
    add_linear(s, rng, &format!("{name}.attn.out"), d, d);
    add_norm(s, &format!("{name}.norm2"), d);
    add_linear(s, rng, &format!("{name}.mlp.fc1"), d, ratio * d);
    add_linear(s, rng, &format!("{name}.mlp.fc2"), ratio * d, d);
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (e, d, dp, h) = (cfg.embed_dim, cfg.model_dim, cfg.proj_dim, cfg.hidden());

    s.uniform(&mut rng, "patch.weight", &[e, cfg.patch_len], (1.0 / cfg.patch_len as f64).sqrt());
    s.zeros("patch.bias", &[e]);

    s.trunc_normal(&mut rng, "mixer.queries", &[cfg.n_queries, e], INIT_STD);
    for w in ["wq", "wk", "wv"] {
        s.trunc_normal(&mut rng, &format!("mixer.{w}"), &[e, e], INIT_STD);
    }
    add_linear(&mut s, &mut rng, "mixer.out", cfg.n_queries * e, d);

    for i in 0..cfg.depth {
        add_block(&mut s, &mut rng, &format!("encoder.blocks.{i}"), d, cfg.mlp_ratio);
    }
    add_norm(&mut s, "encoder.norm", d);

    add_linear(&mut s, &mut rng, "projector.fc1", d, h);
    add_norm(&mut s, "projector.bn1", h);
    add_linear(&mut s, &mut rng, "projector.fc2", h, h);
    add_norm(&mut s, "projector.bn2", h);
    add_linear(&mut s, &mut rng, "projector.fc3", h, dp);
    for bn in ["bn1", "bn2"] {
        s.buffers.insert(format!("projector.{bn}.running_mean"), Tensor::zeros(vec![h]));
        s.buffers.insert(format!("projector.{bn}.running_var"), Tensor::ones(vec![h]));
    }

    let token: Vec<f64> = {
        use rand::Rng;
        (0..dp)
            .map(|_| loop {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                if z.abs() <= 2.0 {
                    break z * INIT_STD;
                }
            })
            .collect()
    };
    s.insert("predictor.mask_token", Tensor::from_f64(vec![dp], &token)?, false);
    for i in 0..cfg.predictor_depth {
        add_block(&mut s, &mut rng, &format!("predictor.blocks.{i}"), dp, cfg.mlp_ratio);
    }
    Ok(s)
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<F> {
    pub name: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Outputs of the mixer on a batch.
pub struct Mixed {
    /// Brain-state sequence `[B, N, D]`.
    pub s: Var,
    /// Head- and patch-averaged affinity `[B, Nq, C]`.
    pub affinity: Var,
}

/// One forward context: a graph, bound parameters, and the mode.
pub struct Laya<'a, 'g, F: Real> {
    pub g: &'g Graph<F>,
    pub p: &'a Bound<'g, F>,
    pub store: &'a ParamStore<F>,
    pub cfg: &'a ModelConfig,
    pub training: bool,
    stats: RefCell<Vec<BnStats<F>>>,
}

impl<'a, 'g, F: Real> Laya<'a, 'g, F> {
    pub fn new(p: &'a Bound<'g, F>, store: &'a ParamStore<F>, cfg: &'a ModelConfig, training: bool) -> Self {
        Laya {
            g: p.graph,
            p,
            store,
            cfg,
            training,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Batch-norm statistics recorded so far (training mode only).
    pub fn take_stats(&self) -> Vec<BnStats<F>> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    fn v(&self, name: &str) -> Result<Var> {
        self.p.var(name)
    }

    /// `x @ W + b` over the last axis of any-rank `x`.
    pub fn linear(&self, name: &str, x: Var) -> Result<Var> {
        let g = self.g;
        let w = self.v(&format!("{name}.weight"))?;
        let b = self.v(&format!("{name}.bias"))?;
        let y = self.matmul_last(x, w)?;
        g.add(y, b)
    }

    fn matmul_last(&self, x: Var, w: Var) -> Result<Var> {
        let g = self.g;
        let shape = g.shape(x);
        let wshape = g.shape(w);
        let (din, dout) = (wshape[0], wshape[1]);
        if shape.last() != Some(&din) {
            return Err(LayaError::shape("linear", format!("input {shape:?} vs weight {wshape:?}")));
        }
        let rows = shape.iter().product::<usize>() / din;
        let y = g.matmul(g.reshape(x, &[rows, din])?, w)?;
        let mut out = shape.clone();
        *out.last_mut().unwrap() = dout;
        g.reshape(y, &out)
    }

    fn norm(&self, name: &str, x: Var) -> Result<Var> {
        let gm = self.v(&format!("{name}.gamma"))?;
        let bt = self.v(&format!("{name}.beta"))?;
        self.g.layer_norm(x, gm, bt, c(self.cfg.norm_eps))
    }

    /// `x: [B, C, T]` to `[B, C, N, E]` with one kernel bank for all channels.
    pub fn patch_embed(&self, x: Var) -> Result<Var> {
        let shape = self.g.shape(x);
        let p = self.cfg.patch_len;
        if shape.len() != 3 || shape[2] % p != 0 || shape[2] == 0 {
            return Err(LayaError::shape(
                "patch_embed",
                format!("input {shape:?} length must be a positive multiple of patch length {p}"),
            ));
        }
        self.g.conv1d_shared(x, self.v("patch.weight")?, self.v("patch.bias")?, p)
    }

    /// Cross-attention of learned queries over coordinate-augmented
    /// channel embeddings at every patch.
    pub fn mix(&self, patches: Var, coords: &[[f64; 3]]) -> Result<Mixed> {
        let g = self.g;
        let shape = g.shape(patches);
        let (b, ch, n, e) = (shape[0], shape[1], shape[2], shape[3]);
        if coords.len() != ch {
            return Err(LayaError::shape(
                "mix_channels",
                format!("{} coordinate rows for {} channels", coords.len(), ch),
            ));
        }
        let (nq, heads) = (self.cfg.n_queries, self.cfg.mixer_heads);
        let dh = e / heads;
        let feats = fourier_coord_features(coords, e);
        let feats = g.constant(Tensor::from_f64(vec![ch, e], &feats)?);
        let h = g.add(g.permute(patches, &[0, 2, 1, 3])?, feats)?;

        let split = |t: Var| -> Result<Var> {
            let t = g.reshape(t, &[b, n, ch, heads, dh])?;
            g.permute(t, &[0, 1, 3, 2, 4])
        };
        let k = split(self.matmul_last(h, self.v("mixer.wk")?)?)?;
        let v = split(self.matmul_last(h, self.v("mixer.wv")?)?)?;
        let q = g.matmul(self.v("mixer.queries")?, self.v("mixer.wq")?)?;
        let q = g.permute(g.reshape(q, &[nq, heads, dh])?, &[1, 0, 2])?;

        let logits = g.scale(g.matmul_nt(q, k)?, c(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(logits, -1)?; // [B, N, H, Nq, C]
        let out = g.matmul(attn, v)?; // [B, N, H, Nq, dh]
        let out = g.reshape(g.permute(out, &[0, 1, 3, 2, 4])?, &[b, n, nq * e])?;
        let s = self.linear("mixer.out", out)?;
        let affinity = g.mean_axis(g.mean_axis(attn, 2, false)?, 1, false)?;
        Ok(Mixed { s, affinity })
    }

    fn attention(&self, name: &str, x: Var, positions: &[usize], heads: usize) -> Result<Var> {
        let g = self.g;
        let shape = g.shape(x);
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let qkv = self.linear(&format!("{name}.qkv"), x)?;
        let qkv = g.permute(g.reshape(qkv, &[b, l, 3, heads, dh])?, &[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var> { g.reshape(g.narrow(qkv, 0, i, 1)?, &[b, heads, l, dh]) };
        let base = self.cfg.rope_base;
        let q = g.rope(part(0)?, positions, base)?;
        let k = g.rope(part(1)?, positions, base)?;
        let v = part(2)?;
        let logits = g.scale(g.matmul_nt(q, k)?, c(1.0 / (dh as f64).sqrt()))?;
        let out = g.matmul(g.softmax(logits, -1)?, v)?;
        let out = g.reshape(g.permute(out, &[0, 2, 1, 3])?, &[b, l, d])?;
        self.linear(&format!("{name}.out"), out)
    }

    /// Pre-norm transformer block.
    fn block(&self, name: &str, x: Var, positions: &[usize], heads: usize) -> Result<Var> {
        let g = self.g;
        let a = self.attention(&format!("{name}.attn"), self.norm(&format!("{name}.norm1"), x)?, positions, heads)?;
        let x = g.add(x, a)?;
        let h = self.linear(&format!("{name}.mlp.fc1"), self.norm(&format!("{name}.norm2"), x)?)?;
        let h = self.linear(&format!("{name}.mlp.fc2"), g.gelu(h)?)?;
        g.add(x, h)
    }

    /// Encoder over the tokens of `s: [B, L, D]` sitting at `positions`
    /// (original patch indices, used only for the rotary angles).
    pub fn encode_at(&self, s: Var, positions: &[usize]) -> Result<Var> {
        let mut x = s;
        for i in 0..self.cfg.depth {
            x = self.block(&format!("encoder.blocks.{i}"), x, positions, self.cfg.heads)?;
        }
        self.norm("encoder.norm", x)
    }

    /// Full pass over every patch.
    pub fn encode_full(&self, s: Var) -> Result<Var> {
        let n = self.g.shape(s)[1];
        self.encode_at(s, &(0..n).collect::<Vec<_>>())
    }

    /// Context pass: masked patches are dropped, survivors keep their
    /// original indices.
    pub fn encode_context(&self, s: Var, mask: &MaskSpec) -> Result<Var> {
        let n = self.g.shape(s)[1];
        if mask.n != n {
            return Err(LayaError::shape("encode", format!("mask over {} patches, sequence has {}", mask.n, n)));
        }
        let ctx = mask.context();
        if ctx.is_empty() {
            return Err(LayaError::InvalidArgument("mask covers every position".into()));
        }
        let gathered = self.g.index_select(s, 1, &ctx)?;
        self.encode_at(gathered, &ctx)
    }

    fn batch_norm(&self, name: &str, x: Var, record: bool) -> Result<Var> {
        let g = self.g;
        let shape = g.shape(x);
        let d = *shape.last().unwrap();
        let gm = self.v(&format!("{name}.gamma"))?;
        let bt = self.v(&format!("{name}.beta"))?;
        let eps: F = c(self.cfg.norm_eps);
        if !self.training {
            let rm = self.store.buffer(&format!("{name}.running_mean"))?;
            let rv = self.store.buffer(&format!("{name}.running_var"))?;
            let inv: Vec<F> = rv.data().iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let rm = g.constant(rm.clone());
            let inv = g.constant(Tensor::from_vec(vec![d], inv)?);
            let y = g.mul(g.sub(x, rm)?, inv)?;
            return g.add(g.mul(y, gm)?, bt);
        }
        let rows = shape.iter().product::<usize>() / d;
        let batch = shape[0];
        if batch < 2 {
            return Err(LayaError::InvalidArgument(format!(
                "batch norm `{name}` needs a batch of at least 2 in training mode, got {batch}"
            )));
        }
        let (y, mean, var) = if self.cfg.bn_over_positions || shape.len() == 2 {
            let (y, mean, var) = g.batch_norm(g.reshape(x, &[rows, d])?, gm, bt, eps)?;
            (g.reshape(y, &shape)?, mean, var)
        } else {
            // statistics per (position, feature) over the batch
            let width = rows / batch * d;
            let ones = g.constant(Tensor::ones(vec![width]));
            let zeros = g.constant(Tensor::zeros(vec![width]));
            let (y, m, v) = g.batch_norm(g.reshape(x, &[batch, width])?, ones, zeros, eps)?;
            let y = g.add(g.mul(g.reshape(y, &shape)?, gm)?, bt)?;
            let positions = width / d;
            let avg = |s: &[F]| -> Vec<F> {
                (0..d)
                    .map(|j| {
                        (0..positions).map(|p| s[p * d + j]).fold(F::zero(), |a, b| a + b)
                            / F::from_usize(positions).unwrap()
                    })
                    .collect()
            };
            (y, avg(&m), avg(&v))
        };
        if record {
            self.stats.borrow_mut().push(BnStats {
                name: name.to_string(),
                mean,
                var,
            });
        }
        Ok(y)
    }

    /// Linear, BN, GELU, Linear, BN, GELU, Linear over the last axis.
    /// `record` keeps this call's batch statistics for the running
    /// averages.
    pub fn project(&self, h: Var, record: bool) -> Result<Var> {
        let g = self.g;
        let x = self.linear("projector.fc1", h)?;
        let x = g.gelu(self.batch_norm("projector.bn1", x, record)?)?;
        let x = self.linear("projector.fc2", x)?;
        let x = g.gelu(self.batch_norm("projector.bn2", x, record)?)?;
        self.linear("projector.fc3", x)
    }

    /// Predicts `[B, |m|, D_proj]` at the masked positions from the
    /// projected context `p_ctx: [B, N_ctx, D_proj]`.
    pub fn predict(&self, p_ctx: Var, mask: &MaskSpec) -> Result<Var> {
        let g = self.g;
        if mask.is_empty() {
            return Err(LayaError::InvalidArgument("predictor needs a non-empty mask".into()));
        }
        let shape = g.shape(p_ctx);
        let (b, nctx, dp) = (shape[0], shape[1], shape[2]);
        let m = mask.len();
        let tokens = g.add(g.constant(Tensor::zeros(vec![b, m, dp])), self.v("predictor.mask_token")?)?;
        let mut x = g.concat(&[p_ctx, tokens], 1)?;
        let mut positions = mask.context();
        if positions.len() != nctx {
            return Err(LayaError::shape("predict", format!("{} context tokens for a mask leaving {}", nctx, positions.len())));
        }
        positions.extend_from_slice(&mask.masked);
        for i in 0..self.cfg.predictor_depth {
            x = self.block(&format!("predictor.blocks.{i}"), x, &positions, self.cfg.predictor_heads)?;
        }
        g.narrow(x, 1, nctx, m)
    }

    /// Patch embed, mix and full-pass encode; returns `(Z, z_cls, mixed)`.
    pub fn embed(&self, x: Var, coords: &[[f64; 3]]) -> Result<(Var, Var, Mixed)> {
        let mixed = self.mix(self.patch_embed(x)?, coords)?;
        let z = self.encode_full(mixed.s)?;
        let z_cls = self.g.mean_axis(z, 1, false)?;
        Ok((z, z_cls, mixed))
    }
}

/// Mean squared error over all elements.
pub fn mse<F: Real>(g: &Graph<F>, pred: Var, target: Var) -> Result<Var> {
    g.mean_all(g.square(g.sub(pred, target)?)?)
}
