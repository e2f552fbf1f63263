//! Fixed Fourier electrode features and the query specialization loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{LayaError, Result};

const PROJECTION_SEED: u64 = 0x0F0E_1D2C;

/// Frequencies per axis for a target width `e`.
fn n_freqs(e: usize) -> usize {
    (e / 6).max(1)
}

/// Raw `sin/cos(pi * 2^k * coord)` features, `C x 6K`, laid out as
/// axis-major blocks of `[sin f0, cos f0, sin f1, cos f1, ...]`.
pub fn fourier_raw_features(coords: &[[f64; 3]], e: usize) -> (Vec<f64>, usize) {
    let k = n_freqs(e);
    let width = 6 * k;
    let mut out = Vec::with_capacity(coords.len() * width);
    for row in coords {
        for &x in row {
            for f in 0..k {
                let w = std::f64::consts::PI * (1u64 << f) as f64 * x;
                out.push(w.sin());
                out.push(w.cos());
            }
        }
    }
    (out, width)
}

/// Electrode features of width `e`. When the raw width differs from
/// `e` a fixed, seeded Gaussian projection (never trained) maps to `e`.
pub fn fourier_coord_features(coords: &[[f64; 3]], e: usize) -> Vec<f64> {
    let (raw, width) = fourier_raw_features(coords, e);
    if width == e {
        return raw;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ ((width as u64) << 32) ^ e as u64);
    let scale = 1.0 / (width as f64).sqrt();
    let proj: Vec<f64> = (0..width * e)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    let mut out = vec![0.0; coords.len() * e];
    for c in 0..coords.len() {
        for i in 0..width {
            let v = raw[c * width + i];
            for j in 0..e {
                out[c * e + j] += v * proj[i * e + j];
            }
        }
    }
    out
}

/// Gram-matrix penalty on row-normalized affinities `a: [B, Nq, C]`:
/// batch mean of the summed squared off-diagonal cosine similarities.
pub fn query_specialization_loss<F: Real>(g: &Graph<F>, a: Var) -> Result<Var> {
    let shape = g.shape(a);
    if shape.len() != 3 {
        return Err(LayaError::shape("query_loss", format!("expected [B, Nq, C], got {shape:?}")));
    }
    let (b, nq) = (shape[0], shape[1]);
    let norm = g.sqrt(g.sum_axis(g.square(a)?, -1, true)?)?;
    let unit = g.div(a, norm)?;
    let gram = g.matmul_nt(unit, unit)?;
    let mut off = vec![F::one(); nq * nq];
    for i in 0..nq {
        off[i * nq + i] = F::zero();
    }
    let off = g.constant(Tensor::from_vec(vec![nq, nq], off)?);
    let sq = g.mul(g.square(gram)?, off)?;
    g.scale(g.sum_all(sq)?, F::one() / F::from_usize(b).unwrap())
}
