//! Sketched isotropic Gaussian regularization: an Epps-Pulley
//! characteristic-function statistic averaged over random 1D
//! projections of a batch of embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{LayaError, Result};

pub const MIN_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigRegConfig {
    pub n_projections: usize,
    pub lambda: f64,
    pub test_points: usize,
    /// Half-width of the symmetric quadrature interval.
    pub t_max: f64,
    /// Multiply the statistic by the batch size, as the classical
    /// Epps-Pulley test statistic does.
    pub scale_by_batch: bool,
}

impl Default for SigRegConfig {
    fn default() -> Self {
        SigRegConfig {
            n_projections: 64,
            lambda: 0.05,
            test_points: 17,
            t_max: 4.0,
            scale_by_batch: true,
        }
    }
}

impl SigRegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(LayaError::config("sigreg.lambda", "must be >= 0"));
        }
        if self.n_projections == 0 {
            return Err(LayaError::config("sigreg.n_projections", "must be >= 1"));
        }
        if self.test_points < 2 {
            return Err(LayaError::config("sigreg.test_points", "must be >= 2"));
        }
        if !(self.t_max > 0.0) {
            return Err(LayaError::config("sigreg.t_max", "must be positive"));
        }
        Ok(())
    }
}

/// Trapezoid nodes on `[-t_max, t_max]` and weights folded with
/// `exp(-t^2 / 2)`.
pub fn quadrature(cfg: &SigRegConfig) -> (Vec<f64>, Vec<f64>) {
    let m = cfg.test_points;
    let dt = 2.0 * cfg.t_max / (m - 1) as f64;
    let t: Vec<f64> = (0..m).map(|j| -cfg.t_max + j as f64 * dt).collect();
    let w = t
        .iter()
        .enumerate()
        .map(|(j, &tj)| {
            let trap = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
            trap * dt * (-0.5 * tj * tj).exp()
        })
        .collect();
    (t, w)
}

/// `dim x n` matrix whose columns are uniform on the unit sphere.
pub fn random_projections(dim: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for col in cols.iter_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        col.iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; dim * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[i * n + j] = v;
        }
    }
    out
}

/// Differentiable statistic on `emb: [B, D]` with projections drawn
/// from `seed`.
pub fn sigreg_loss<F: Real>(g: &Graph<F>, emb: Var, cfg: &SigRegConfig, seed: u64) -> Result<Var> {
    let shape = g.shape(emb);
    if shape.len() != 2 || shape[1] == 0 {
        return Err(LayaError::shape("sigreg", format!("expected [B, D > 0], got {shape:?}")));
    }
    let (b, d) = (shape[0], shape[1]);
    if b < MIN_BATCH {
        return Err(LayaError::InvalidArgument(format!(
            "sigreg needs a batch of at least {MIN_BATCH}, got {b}"
        )));
    }
    let k = cfg.n_projections;
    let proj = g.constant(Tensor::from_f64(vec![d, k], &random_projections(d, k, seed))?);
    let (t, w) = quadrature(cfg);
    let m = t.len();

    let x = g.reshape(g.matmul(emb, proj)?, &[b * k, 1])?;
    let tx = g.matmul(x, g.constant(Tensor::from_f64(vec![1, m], &t)?))?;
    let tx = g.reshape(tx, &[b, k, m])?;
    let re = g.mean_axis(g.cos(tx)?, 0, false)?; // [K, M]
    let im = g.mean_axis(g.sin(tx)?, 0, false)?;
    let target: Vec<f64> = t.iter().map(|&v| (-0.5 * v * v).exp()).collect();
    let re = g.sub(re, g.constant(Tensor::from_f64(vec![m], &target)?))?;
    let err = g.add(g.square(re)?, g.square(im)?)?;
    let per = g.sum_axis(g.mul(err, g.constant(Tensor::from_f64(vec![m], &w)?))?, 1, false)?;
    let mut loss = g.mean_all(per)?;
    if cfg.scale_by_batch {
        loss = g.scale(loss, F::from_usize(b).unwrap())?;
    }
    Ok(loss)
}

/// Value-only evaluation on row-major `emb` (`b x d`).
pub fn sigreg_value(emb: &[f64], b: usize, d: usize, cfg: &SigRegConfig, seed: u64) -> Result<f64> {
    let g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_vec(vec![b, d], emb.to_vec())?);
    Ok(g.scalar(sigreg_loss(&g, v, cfg, seed)?))
}

/// Eigenvalues of the batch covariance of `emb` (`b x d`), descending.
pub fn covariance_spectrum(emb: &[f64], b: usize, d: usize) -> Result<Vec<f64>> {
    if b < 2 || emb.len() != b * d {
        return Err(LayaError::shape("covariance_spectrum", format!("{} values for {b} x {d}", emb.len())));
    }
    let x = nalgebra::DMatrix::from_row_slice(b, d, emb);
    let mean = x.row_mean();
    let centred = nalgebra::DMatrix::from_fn(b, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (b - 1) as f64;
    let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

/// `exp` of the entropy of the normalized spectrum; 0 for a zero spectrum.
pub fn effective_rank(eigenvalues: &[f64]) -> f64 {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = eigenvalues
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unscaled() -> SigRegConfig {
        SigRegConfig {
            scale_by_batch: false,
            ..SigRegConfig::default()
        }
    }

    #[test]
    fn effective_rank_counts_equal_directions() {
        assert!((effective_rank(&[2.0, 2.0, 2.0, 0.0]) - 3.0).abs() < 1e-12);
        assert_eq!(effective_rank(&[0.0, 0.0]), 0.0);
        let emb: Vec<f64> = (0..40).flat_map(|i| [i as f64, 0.0]).collect();
        let eig = covariance_spectrum(&emb, 40, 2).unwrap();
        assert!(eig[1].abs() < 1e-9 && (effective_rank(&eig) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn point_mass_matches_closed_form() {
        // all samples at 0: phi(t) = 1, statistic = sum w (1 - e^{-t^2/2})^2
        let cfg = unscaled();
        let (t, w) = quadrature(&cfg);
        let expect: f64 = t
            .iter()
            .zip(&w)
            .map(|(&tj, &wj)| wj * (1.0 - (-0.5 * tj * tj).exp()).powi(2))
            .sum();
        let got = sigreg_value(&vec![0.0; 16 * 4], 16, 4, &cfg, 1).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn projections_are_unit_columns() {
        let p = random_projections(5, 7, 3);
        for j in 0..7 {
            let n: f64 = (0..5).map(|i| p[i * 7 + j].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_batch_rejected() {
        assert!(sigreg_value(&[0.0; 7 * 2], 7, 2, &unscaled(), 0).is_err());
    }

    #[test]
    fn batch_scaling_multiplies_by_n() {
        let emb: Vec<f64> = (0..32 * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let a = sigreg_value(&emb, 32, 3, &unscaled(), 5).unwrap();
        let b = sigreg_value(&emb, 32, 3, &SigRegConfig::default(), 5).unwrap();
        assert!((b - 32.0 * a).abs() < 1e-10);
    }
}
