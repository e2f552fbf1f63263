//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use laya_core::data::{standard_coords, WindowBatch};
use laya_core::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Hann-windowed periodogram by a direct O(n^2) DFT; returns
/// `(frequencies, power)` for bins `0..=n/2`.
pub fn periodogram(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let norm: f64 = w.iter().map(|v| v * v).sum::<f64>() * fs;
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut freqs = Vec::new();
    let mut power = Vec::new();
    for k in 0..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, (&v, &wi)) in x.iter().zip(&w).enumerate() {
            let ang = -2.0 * PI * (k * i % n) as f64 / n as f64;
            re += (v - mean) * wi * ang.cos();
            im += (v - mean) * wi * ang.sin();
        }
        freqs.push(k as f64 * fs / n as f64);
        power.push((re * re + im * im) / norm);
    }
    (freqs, power)
}

/// Welch average of half-overlapping `seg`-sample periodograms.
pub fn welch(x: &[f64], fs: f64, seg: usize) -> (Vec<f64>, Vec<f64>) {
    let mut acc: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut count = 0.0;
    let mut start = 0;
    while start + seg <= x.len() {
        let (f, p) = periodogram(&x[start..start + seg], fs);
        acc = Some(match acc {
            None => (f, p),
            Some((f0, mut p0)) => {
                p0.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                (f0, p0)
            }
        });
        count += 1.0;
        start += seg / 2;
    }
    let (f, mut p) = acc.expect("signal shorter than one segment");
    p.iter_mut().for_each(|v| *v /= count);
    (f, p)
}

pub fn band_power(freqs: &[f64], power: &[f64], lo: f64, hi: f64) -> f64 {
    freqs
        .iter()
        .zip(power)
        .filter(|(&f, _)| f >= lo && f < hi)
        .map(|(_, &p)| p)
        .sum()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

/// A small model that keeps forward passes in the millisecond range.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
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
    }
}

/// Standard-normal windows on the standard montage.
pub fn random_batch(batch: usize, channels: usize, samples: usize, seed: u64) -> WindowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WindowBatch {
        x: (0..batch * channels * samples).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect(),
        batch,
        channels,
        samples,
        coords: standard_coords(channels),
        labels: None,
        origins: (0..batch).map(|b| (b, 0)).collect(),
    }
}

pub fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Balanced accuracy, macro F1, weighted F1 and Cohen's kappa counted
/// straight from the label vectors, without a confusion matrix. Chance
/// agreement is the fraction of all `(i, j)` pairs with `truth[i] ==
/// pred[j]`.
pub fn brute_force_metrics(pred: &[u32], truth: &[u32]) -> [f64; 4] {
    let n = pred.len() as f64;
    let mut classes: Vec<u32> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let (mut recalls, mut f1s, mut weighted) = (Vec::new(), Vec::new(), 0.0);
    for &c in &classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let support = truth.iter().filter(|&&t| t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        if support > 0.0 {
            recalls.push(recall);
        }
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1s.push(f1);
        weighted += f1 * support / n;
    }
    let agree = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let mut chance_pairs = 0usize;
    for t in truth {
        chance_pairs += pred.iter().filter(|&p| p == t).count();
    }
    let chance = chance_pairs as f64 / (n * n);
    let kappa = if chance == 1.0 { 1.0 } else { (agree - chance) / (1.0 - chance) };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    [mean(&recalls), mean(&f1s), weighted, kappa]
}
