//! Synthetic multichannel EEG with planted latent brain states.
//!
//! Each state owns a band-power profile over delta/theta/alpha/beta for
//! every latent source. Sources are mixed into electrodes through a
//! subject-specific random matrix, and states switch via a Markov chain
//! with geometric dwell times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::montage::{standard_coords, STANDARD_CHANNELS};
use super::recording::Recording;
use crate::dsp::band_limited_noise;
use crate::error::{LayaError, Result};

/// Frequency bands (Hz) of the state profiles.
pub const BANDS: [(f64, f64); 4] = [(1.5, 4.0), (4.0, 8.0), (8.0, 12.0), (13.0, 30.0)];
pub const ALPHA_BAND: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeizureConfig {
    pub episodes: usize,
    pub min_s: f64,
    pub max_s: f64,
    /// Rhythm amplitude relative to the background RMS.
    pub amplitude: f64,
    pub frequency_hz: f64,
}

impl Default for SeizureConfig {
    fn default() -> Self {
        SeizureConfig {
            episodes: 1,
            min_s: 12.0,
            max_s: 24.0,
            amplitude: 3.0,
            frequency_hz: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_states: usize,
    pub channels: usize,
    pub duration_s: f64,
    /// Mean state dwell time in seconds.
    pub dwell_s: f64,
    pub raw_sample_rate: f64,
    pub n_sources: usize,
    pub amplitude_uv: f64,
    /// Sensor noise power relative to the mixed source power.
    pub sensor_noise: f64,
    /// Weight of the subject-specific part of the mixing matrix; the
    /// rest is a topography shared by all subjects. 1 gives fully
    /// independent subjects.
    pub mixing_spread: f64,
    /// Per-subject jitter (Hz) of band edges, alpha peak included.
    pub band_jitter_hz: f64,
    /// Shortest window the data will be cropped to.
    pub window_seconds: f64,
    /// Band-power weights per state; when absent a built-in table is
    /// used for up to 4 states and random profiles beyond that.
    pub state_profiles: Option<Vec<[f64; 4]>>,
    pub seizure: Option<SeizureConfig>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 24,
            n_states: 3,
            channels: STANDARD_CHANNELS,
            duration_s: 120.0,
            dwell_s: 20.0,
            raw_sample_rate: 256.0,
            n_sources: 6,
            amplitude_uv: 50.0,
            sensor_noise: 0.1,
            mixing_spread: 0.5,
            band_jitter_hz: 0.75,
            window_seconds: 16.0,
            state_profiles: None,
            seizure: None,
        }
    }
}

const BUILTIN_PROFILES: [[f64; 4]; 4] = [
    // alpha-dominant (relaxed)
    [0.15, 0.15, 0.55, 0.15],
    // beta-dominant (engaged)
    [0.15, 0.15, 0.10, 0.60],
    // slow-wave dominant (drowsy)
    [0.40, 0.40, 0.10, 0.10],
    // mixed theta/beta
    [0.10, 0.45, 0.10, 0.35],
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(LayaError::config("data.n_states", "need at least 2 latent states"));
        }
        if self.duration_s < self.window_seconds {
            return Err(LayaError::config(
                "data.duration_s",
                format!(
                    "{} s is shorter than one {} s window",
                    self.duration_s, self.window_seconds
                ),
            ));
        }
        if self.channels == 0 || self.channels > STANDARD_CHANNELS {
            return Err(LayaError::config(
                "data.channels",
                format!("must be in 1..={}", STANDARD_CHANNELS),
            ));
        }
        if self.n_subjects == 0 || self.n_sources == 0 {
            return Err(LayaError::config("data.n_subjects", "need subjects and sources"));
        }
        if self.raw_sample_rate < 200.0 {
            return Err(LayaError::config("data.raw_sample_rate", "must be >= 200 Hz"));
        }
        if !(0.0..=1.0).contains(&self.mixing_spread) {
            return Err(LayaError::config("data.mixing_spread", "must be in [0, 1]"));
        }
        if self.dwell_s < 1.0 {
            return Err(LayaError::config("data.dwell_s", "must be >= 1 s"));
        }
        if let Some(p) = &self.state_profiles {
            if p.len() != self.n_states {
                return Err(LayaError::config(
                    "data.state_profiles",
                    format!("{} profiles for {} states", p.len(), self.n_states),
                ));
            }
        }
        Ok(())
    }

    /// Band weights per state, normalized to sum to one.
    pub fn profiles(&self) -> Vec<[f64; 4]> {
        let raw: Vec<[f64; 4]> = match &self.state_profiles {
            Some(p) => p.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x51A7E);
                (0..self.n_states)
                    .map(|k| {
                        if k < BUILTIN_PROFILES.len() {
                            BUILTIN_PROFILES[k]
                        } else {
                            std::array::from_fn(|_| rng.random_range(0.05..1.0))
                        }
                    })
                    .collect()
            }
        };
        raw.into_iter()
            .map(|w| {
                let s: f64 = w.iter().sum();
                w.map(|v| v / s)
            })
            .collect()
    }

    /// Label used for seconds inside a seizure episode.
    pub fn seizure_label(&self) -> u32 {
        self.n_states as u32
    }
}

/// Deterministic per-stream seed derivation (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-source modulation of the state profiles, shared by all subjects
/// so that states mean the same thing everywhere.
fn source_modulation(n_sources: usize) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_50C5);
    (0..n_sources)
        .map(|_| std::array::from_fn(|_| (0.3 * rng.sample::<f64, _>(StandardNormal)).exp()))
        .collect()
}

fn shared_mixing(channels: usize, n_sources: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7090_6A);
    (0..channels)
        .map(|_| (0..n_sources).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn markov_states<R: Rng>(rng: &mut R, n_sec: usize, k: usize, dwell: f64) -> Vec<u32> {
    let p_switch = 1.0 / dwell;
    let mut states = Vec::with_capacity(n_sec);
    let mut cur = rng.random_range(0..k) as u32;
    for _ in 0..n_sec {
        states.push(cur);
        if rng.random::<f64>() < p_switch {
            let shift = rng.random_range(1..k) as u32;
            cur = (cur + shift) % k as u32;
        }
    }
    // guarantee at least one transition when there is room for it
    if n_sec >= 2 && states.iter().all(|&s| s == states[0]) {
        let other = (states[0] + 1) % k as u32;
        for s in states.iter_mut().skip(n_sec / 2) {
            *s = other;
        }
    }
    states
}

/// Piecewise-constant per-second values expanded to samples with a
/// linear crossfade of `fade` samples around each boundary.
fn smooth_envelope(per_second: &[f64], fs: f64, n: usize, fade: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|t| {
            let sec = ((t as f64 / fs) as usize).min(per_second.len() - 1);
            per_second[sec]
        })
        .collect();
    if fade < 2 {
        return raw;
    }
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + raw[i];
    }
    let half = fade / 2;
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Generates one raw recording per subject.
pub fn synthesize_dataset(config: &SynthConfig, seed: u64) -> Result<Vec<Recording>> {
    config.validate()?;
    (0..config.n_subjects)
        .map(|i| synthesize_subject(config, seed, i))
        .collect()
}

pub fn synthesize_subject(config: &SynthConfig, seed: u64, index: usize) -> Result<Recording> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let fs = config.raw_sample_rate;
    let n = (config.duration_s * fs).round() as usize;
    let n_sec = (n as f64 / fs).floor() as usize;
    let (c, ns) = (config.channels, config.n_sources);
    let profiles = config.profiles();
    let modulation = source_modulation(ns);

    let mut states = markov_states(&mut rng, n_sec, config.n_states, config.dwell_s);

    // subject-specific band edges
    let jitter: Vec<f64> = (0..BANDS.len())
        .map(|_| rng.random_range(-config.band_jitter_hz..=config.band_jitter_hz))
        .collect();

    let fade = (0.5 * fs) as usize;
    let mut sources = vec![vec![0.0; n]; ns];
    for (j, src) in sources.iter_mut().enumerate() {
        for (b, &(lo, hi)) in BANDS.iter().enumerate() {
            // the lowest edge stays put so the 0.5 Hz high-pass leaves it intact
            let lo = if b == 0 { lo } else { lo + jitter[b] };
            let hi = hi + jitter[b];
            let band = band_limited_noise(&mut rng, n, fs, lo, hi);
            let per_second: Vec<f64> = states
                .iter()
                .map(|&k| {
                    let w = profiles[k as usize][b] * modulation[j][b];
                    let norm: f64 = (0..4).map(|bb| profiles[k as usize][bb] * modulation[j][bb]).sum();
                    (w / norm).sqrt()
                })
                .collect();
            let env = smooth_envelope(&per_second, fs, n, fade);
            for t in 0..n {
                src[t] += env[t] * band[t];
            }
        }
    }

    let shared = shared_mixing(c, ns);
    let spread = config.mixing_spread;
    let keep = (1.0 - spread * spread).sqrt();
    let mixing: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            let row: Vec<f64> = (0..ns)
                .map(|j| keep * shared[ch][j] + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.into_iter().map(|v| v / norm).collect()
        })
        .collect();

    let noise_gain = config.sensor_noise.sqrt();
    let mut signal = vec![0.0f64; c * n];
    for ch in 0..c {
        let noise = band_limited_noise(&mut rng, n, fs, BANDS[0].0, 40.0);
        let out = &mut signal[ch * n..(ch + 1) * n];
        for t in 0..n {
            let mut v = 0.0;
            for j in 0..ns {
                v += mixing[ch][j] * sources[j][t];
            }
            out[t] = v + noise_gain * noise[t];
        }
    }

    let background_rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
    let mut spans = Vec::new();
    if let Some(sz) = &config.seizure {
        for _ in 0..sz.episodes {
            let len = rng.random_range(sz.min_s..=sz.max_s).min(config.duration_s * 0.5);
            let lo = 0.2 * config.duration_s;
            let hi = (0.8 * config.duration_s - len).max(lo);
            let start = rng.random_range(lo..=hi);
            spans.push((start, start + len));
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.0)).collect();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let ramp = 0.5 * fs;
        for &(s, e) in &spans {
            let (t0, t1) = ((s * fs) as usize, ((e * fs) as usize).min(n));
            for t in t0..t1 {
                let rel = (t - t0) as f64;
                let env = (rel / ramp).min(1.0).min((t1 - t) as f64 / ramp);
                let tt = t as f64 / fs;
                let w = std::f64::consts::TAU * sz.frequency_hz * tt;
                let wave = w.sin() + 0.5 * (2.0 * w + phase).sin();
                for (ch, g) in gains.iter().enumerate() {
                    signal[ch * n + t] += sz.amplitude * background_rms * g * env * wave;
                }
            }
            for (sec, state) in states.iter_mut().enumerate() {
                let mid = sec as f64 + 0.5;
                if mid >= s && mid < e {
                    *state = config.seizure_label();
                }
            }
        }
    }

    let scale = config.amplitude_uv / background_rms;
    Ok(Recording {
        signal: signal.iter().map(|&v| (v * scale) as f32).collect(),
        channels: c,
        sample_rate: fs,
        electrode_coords: standard_coords(c),
        subject_id: format!("sub-{index:03}"),
        state_labels: Some(states),
        seizure_spans: config.seizure.as_ref().map(|_| spans),
    })
}
