//! Inference-time noise injection at calibrated per-channel SNR and the
//! probe degradation curve built on it.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, WindowBatch};
use crate::diff::Real;
use crate::dsp::{band_limited_noise, mean_power, normalize_unit_power, shape_spectrum};
use crate::error::{LayaError, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::probe::{compute_metrics, embed_windows, LinearProbe};
use crate::viz::{plot_lines, Canvas};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    OneOverF,
    Emg,
    ChannelDropout,
    Combined,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::Gaussian,
        NoiseKind::OneOverF,
        NoiseKind::Emg,
        NoiseKind::ChannelDropout,
        NoiseKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::OneOverF => "one_over_f",
            NoiseKind::Emg => "emg",
            NoiseKind::ChannelDropout => "channel_dropout",
            NoiseKind::Combined => "combined",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = LayaError;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LayaError::InvalidArgument(format!("unknown noise kind `{s}`")))
    }
}

/// Noise family constants and the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kinds: Vec<NoiseKind>,
    pub snr_db: Vec<f64>,
    pub pink_band_hz: (f64, f64),
    pub emg_band_hz: (f64, f64),
    pub burst_min_s: f64,
    pub burst_max_s: f64,
    /// Target fraction of each window covered by EMG bursts.
    pub burst_coverage: f64,
    pub dropout_fraction: f64,
    pub combined_dropout: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            kinds: NoiseKind::ALL.to_vec(),
            snr_db: vec![30.0, 20.0, 10.0, 0.0],
            pink_band_hz: (0.5, 100.0),
            emg_band_hz: (20.0, 100.0),
            burst_min_s: 0.5,
            burst_max_s: 2.0,
            burst_coverage: 0.5,
            dropout_fraction: 0.2,
            combined_dropout: 0.1,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, f) in [
            ("noise.dropout_fraction", self.dropout_fraction),
            ("noise.combined_dropout", self.combined_dropout),
            ("noise.burst_coverage", self.burst_coverage),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(LayaError::config(field, "must be in [0, 1]"));
            }
        }
        if !(self.burst_min_s > 0.0 && self.burst_max_s >= self.burst_min_s) {
            return Err(LayaError::config("noise.burst_min_s", "need 0 < burst_min_s <= burst_max_s"));
        }
        for (field, (lo, hi)) in [("noise.pink_band_hz", self.pink_band_hz), ("noise.emg_band_hz", self.emg_band_hz)] {
            if !(lo > 0.0 && hi > lo) {
                return Err(LayaError::config(field, "need 0 < low < high"));
            }
        }
        if self.snr_db.iter().any(|v| v.is_nan()) {
            return Err(LayaError::config("noise.snr_db", "NaN in grid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Target SNR; `+inf` leaves the input untouched. Must be absent
    /// for channel dropout.
    pub snr_db: Option<f64>,
    /// Dropout fraction override for `channel_dropout`.
    pub dropout_fraction: Option<f64>,
    pub seed: u64,
}

fn rms_scale(signal: &[f32], snr_db: f64) -> f64 {
    let p = signal.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / signal.len().max(1) as f64;
    (p / 10f64.powf(snr_db / 10.0)).sqrt()
}

fn burst_envelope<R: Rng>(rng: &mut R, n: usize, fs: f64, cfg: &NoiseConfig) -> Vec<f64> {
    let mut env = vec![0.0f64; n];
    let ramp = (0.05 * fs).max(1.0);
    let mut covered = 0usize;
    let target = (cfg.burst_coverage * n as f64).ceil() as usize;
    for attempt in 0..64 {
        if attempt > 0 && covered >= target {
            break;
        }
        let len = ((rng.random_range(cfg.burst_min_s..=cfg.burst_max_s) * fs).round() as usize).clamp(1, n);
        let start = rng.random_range(0..=n - len);
        for i in 0..len {
            // raised-cosine edges
            let edge = (i as f64 + 0.5).min((len - i) as f64 - 0.5) / ramp;
            let w = if edge >= 1.0 {
                1.0
            } else {
                0.5 - 0.5 * (std::f64::consts::PI * edge.max(0.0)).cos()
            };
            let slot = &mut env[start + i];
            if *slot == 0.0 && w > 0.0 {
                covered += 1;
            }
            *slot = (*slot).max(w);
        }
    }
    env
}

/// Unit-power noise of one family for `n` samples at `fs`.
pub fn unit_noise<R: Rng>(rng: &mut R, kind: NoiseKind, n: usize, fs: f64, cfg: &NoiseConfig) -> Result<Vec<f64>> {
    let out = match kind {
        NoiseKind::Gaussian => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::OneOverF => {
            let (lo, hi) = cfg.pink_band_hz;
            let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            // power falls as 1/f, so amplitude as 1/sqrt(f)
            shape_spectrum(&white, fs, |f| if f >= lo && f <= hi { 1.0 / f.sqrt() } else { 0.0 })
        }
        NoiseKind::Emg => {
            let (lo, hi) = cfg.emg_band_hz;
            let band = band_limited_noise(rng, n, fs, lo, hi.min(fs / 2.0));
            let env = burst_envelope(rng, n, fs, cfg);
            band.iter().zip(&env).map(|(b, e)| b * e).collect()
        }
        NoiseKind::Combined => {
            let parts = [NoiseKind::Gaussian, NoiseKind::OneOverF, NoiseKind::Emg]
                .map(|k| unit_noise(rng, k, n, fs, cfg));
            let mut sum = vec![0.0; n];
            for p in parts {
                for (s, v) in sum.iter_mut().zip(p?) {
                    *s += v;
                }
            }
            sum
        }
        NoiseKind::ChannelDropout => {
            return Err(LayaError::InvalidArgument("channel dropout has no additive noise".into()))
        }
    };
    Ok(normalize_unit_power(out))
}

fn drop_channels<R: Rng>(rng: &mut R, window: &mut [f32], channels: usize, fraction: f64) {
    let t = window.len() / channels;
    let k = (fraction * channels as f64).round() as usize;
    let mut idx: Vec<usize> = (0..channels).collect();
    idx.shuffle(rng);
    for &c in &idx[..k.min(channels)] {
        window[c * t..(c + 1) * t].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Adds noise of `spec.kind` to every window of `batch`, scaled per
/// channel to the target SNR against that channel's RMS. Window `b`
/// draws from a stream seeded by `(spec.seed, b)`.
pub fn inject_noise(batch: &WindowBatch, spec: &NoiseSpec, cfg: &NoiseConfig, fs: f64) -> Result<WindowBatch> {
    let mut out = batch.clone();
    let (c, t) = (batch.channels, batch.samples);
    if spec.kind == NoiseKind::ChannelDropout {
        if spec.snr_db.is_some() {
            return Err(LayaError::InvalidArgument("snr_db does not apply to channel_dropout".into()));
        }
        let frac = spec.dropout_fraction.unwrap_or(cfg.dropout_fraction);
        if !(0.0..=1.0).contains(&frac) {
            return Err(LayaError::InvalidArgument(format!("dropout fraction {frac} outside [0, 1]")));
        }
        for b in 0..batch.batch {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, b as u64));
            drop_channels(&mut rng, &mut out.x[b * c * t..(b + 1) * c * t], c, frac);
        }
        return Ok(out);
    }
    let snr = spec
        .snr_db
        .ok_or_else(|| LayaError::InvalidArgument(format!("{} noise needs snr_db", spec.kind)))?;
    if snr.is_nan() || snr == f64::NEG_INFINITY {
        return Err(LayaError::InvalidArgument(format!("invalid snr_db {snr}")));
    }
    if snr == f64::INFINITY {
        return Ok(out);
    }
    for b in 0..batch.batch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, b as u64));
        let window = &mut out.x[b * c * t..(b + 1) * c * t];
        for ch in 0..c {
            let x = &mut window[ch * t..(ch + 1) * t];
            let noise = unit_noise(&mut rng, spec.kind, t, fs, cfg)?;
            let scale = rms_scale(x, snr);
            for (v, n) in x.iter_mut().zip(&noise) {
                *v = (*v as f64 + scale * n) as f32;
            }
        }
        if spec.kind == NoiseKind::Combined {
            drop_channels(&mut rng, window, c, cfg.combined_dropout);
        }
    }
    Ok(out)
}

/// Per-channel SNR (dB) of `noisy` against `clean`, skipping channels
/// with no signal or no added noise (e.g. dropped ones).
pub fn measured_snr_db(clean: &WindowBatch, noisy: &WindowBatch) -> Vec<f64> {
    let t = clean.samples;
    clean
        .x
        .chunks(t)
        .zip(noisy.x.chunks(t))
        .filter_map(|(a, b)| {
            if b.iter().all(|&v| v == 0.0) {
                return None;
            }
            let s: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| y as f64 - x as f64).collect();
            let (ps, pn) = (mean_power(&s), mean_power(&n));
            (ps > 0.0 && pn > 0.0).then(|| 10.0 * (ps / pn).log10())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `None` for the clean baseline.
    pub kind: Option<NoiseKind>,
    /// `None` for the clean baseline and channel dropout.
    pub snr_db: Option<f64>,
    pub balanced_accuracy: f64,
    pub retention: f64,
}

/// Fixed probe evaluated on clean and noise-injected copies of
/// labelled `windows`.
#[allow(clippy::too_many_arguments)]
pub fn degradation_curve<F: Real>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    probe: &LinearProbe,
    windows: &WindowBatch,
    sample_rate: f64,
    cfg: &NoiseConfig,
    chunk: usize,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let labels = windows
        .labels
        .as_ref()
        .ok_or_else(|| LayaError::Data("degradation curve needs labelled windows".into()))?;
    let score = |b: &WindowBatch| -> Result<f64> {
        let f = embed_windows(store, model, b, chunk)?;
        Ok(compute_metrics(&probe.predict(&f), labels)?.balanced_accuracy)
    };
    let clean = score(windows)?;
    let retention = |acc: f64| if clean > 0.0 { acc / clean } else { 0.0 };
    let mut points = vec![CurvePoint {
        kind: None,
        snr_db: None,
        balanced_accuracy: clean,
        retention: 1.0,
    }];
    for &kind in &cfg.kinds {
        let grid: Vec<Option<f64>> = if kind == NoiseKind::ChannelDropout {
            vec![None]
        } else {
            cfg.snr_db.iter().map(|&s| Some(s)).collect()
        };
        for snr_db in grid {
            let spec = NoiseSpec {
                kind,
                snr_db,
                dropout_fraction: None,
                seed: cfg.seed,
            };
            let acc = score(&inject_noise(windows, &spec, cfg, sample_rate)?)?;
            points.push(CurvePoint {
                kind: Some(kind),
                snr_db,
                balanced_accuracy: acc,
                retention: retention(acc),
            });
        }
    }
    Ok(points)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("kind,snr_db,balanced_accuracy,retention\n");
    for p in points {
        let kind = p.kind.map_or("clean", NoiseKind::name);
        let snr = match (p.kind, p.snr_db) {
            (None, _) => "inf".to_string(),
            (_, None) => "na".to_string(),
            (_, Some(s)) => format!("{s}"),
        };
        out.push_str(&format!("{kind},{snr},{:.6},{:.6}\n", p.balanced_accuracy, p.retention));
    }
    out
}

/// Retention per SNR kind over `[clean, grid...]`.
pub fn curve_plot(points: &[CurvePoint], grid: &[f64], width: usize, height: usize) -> Result<Canvas> {
    let mut series = Vec::new();
    let mut top: f64 = 1.05;
    for kind in NoiseKind::ALL.into_iter().filter(|&k| k != NoiseKind::ChannelDropout) {
        if !points.iter().any(|p| p.kind == Some(kind)) {
            continue;
        }
        let mut s = vec![1.0];
        for &g in grid {
            let v = points
                .iter()
                .find(|p| p.kind == Some(kind) && p.snr_db == Some(g))
                .map_or(f64::NAN, |p| p.retention);
            if v.is_finite() {
                top = top.max(v);
            }
            s.push(v);
        }
        series.push(s);
    }
    plot_lines(&series, (0.0, top), width, height)
}
