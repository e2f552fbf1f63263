//! Resampling, zero-phase filtering and robust scaling.

use serde::{Deserialize, Serialize};

use super::recording::Recording;
use crate::dsp::{resample_mirrored, filtfilt, quantile, Biquad, BUTTERWORTH4_Q};
use crate::error::{LayaError, Result};

pub const TARGET_RATE: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    pub notch_hz: Vec<f64>,
    pub notch_q: f64,
    /// A leading 1 s segment is trimmed while its variance stays below
    /// this fraction of the channel variance on every channel.
    pub trim_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            highpass_hz: 0.5,
            lowpass_hz: 100.0,
            notch_hz: vec![50.0, 60.0],
            notch_q: 30.0,
            trim_threshold: 1e-10,
        }
    }
}

impl PreprocessConfig {
    fn sections(&self, fs: f64) -> Vec<Biquad> {
        let mut s = Vec::new();
        for &q in &BUTTERWORTH4_Q {
            s.push(Biquad::highpass(self.highpass_hz, fs, q));
        }
        if self.lowpass_hz < fs / 2.0 {
            for &q in &BUTTERWORTH4_Q {
                s.push(Biquad::lowpass(self.lowpass_hz, fs, q));
            }
        }
        for &f in &self.notch_hz {
            if f < fs / 2.0 {
                s.push(Biquad::notch(f, fs, self.notch_q));
            }
        }
        s
    }
}

/// Band-pass plus notches, forward-backward, on one channel at `fs`.
pub fn filter_channel(config: &PreprocessConfig, x: &[f64], fs: f64) -> Vec<f64> {
    filtfilt(&config.sections(fs), x, (3.0 * fs) as usize)
}

/// `(x - median) / IQR`; `None` for a flat channel.
pub fn robust_scale(x: &[f64]) -> Option<Vec<f64>> {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let med = crate::dsp::quantile_sorted(&sorted, 0.5);
    let iqr = crate::dsp::quantile_sorted(&sorted, 0.75) - crate::dsp::quantile_sorted(&sorted, 0.25);
    if !(iqr > 0.0) {
        return None;
    }
    Some(x.iter().map(|v| (v - med) / iqr).collect())
}

fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Number of whole leading seconds whose variance is negligible on all
/// channels.
fn leading_quiet_seconds(channels: &[Vec<f64>], fs: usize, threshold: f64) -> usize {
    let n = channels.first().map_or(0, |c| c.len());
    let totals: Vec<f64> = channels.iter().map(|c| variance(c)).collect();
    let mut sec = 0;
    while (sec + 2) * fs <= n {
        let quiet = channels
            .iter()
            .zip(&totals)
            .all(|(c, &tot)| variance(&c[sec * fs..(sec + 1) * fs]) < threshold * tot);
        if !quiet {
            break;
        }
        sec += 1;
    }
    sec
}

fn flat(r: &Recording, channel: usize) -> LayaError {
    LayaError::Data(format!(
        "{}: channel {} is flat (IQR 0); recording rejected",
        r.subject_id, channel
    ))
}

/// Full pipeline: resample to 250 Hz, trim quiet lead-in, filter, scale.
pub fn preprocess(raw: &Recording) -> Result<Recording> {
    preprocess_with(raw, &PreprocessConfig::default())
}

pub fn preprocess_with(raw: &Recording, config: &PreprocessConfig) -> Result<Recording> {
    raw.validate()?;
    if raw.sample_rate < 200.0 {
        return Err(LayaError::Data(format!(
            "{}: sample rate {} Hz is below the 200 Hz minimum",
            raw.subject_id, raw.sample_rate
        )));
    }
    for c in 0..raw.channels {
        if robust_scale(&raw.channel_f64(c)).is_none() {
            return Err(flat(raw, c));
        }
    }
    let fs = TARGET_RATE;
    let n_out = (raw.samples() as f64 * fs / raw.sample_rate).round() as usize;
    let mut channels: Vec<Vec<f64>> = (0..raw.channels)
        .map(|c| resample_mirrored(&raw.channel_f64(c), n_out))
        .collect();

    let trim_s = leading_quiet_seconds(&channels, fs as usize, config.trim_threshold);
    let cut = trim_s * fs as usize;
    if cut > 0 {
        for c in channels.iter_mut() {
            c.drain(..cut);
        }
    }
    let n = n_out - cut;

    let mut signal = Vec::with_capacity(raw.channels * n);
    for (ci, c) in channels.iter().enumerate() {
        let filtered = filter_channel(config, c, fs);
        let scaled = robust_scale(&filtered).ok_or_else(|| flat(raw, ci))?;
        signal.extend(scaled.into_iter().map(|v| v as f32));
    }

    let whole = (n as f64 / fs).floor() as usize;
    let state_labels = raw.state_labels.as_ref().map(|l| {
        let mut l: Vec<u32> = l.iter().skip(trim_s).copied().collect();
        let last = l.last().copied().unwrap_or(0);
        l.resize(whole, last);
        l
    });
    let seizure_spans = raw.seizure_spans.as_ref().map(|spans| {
        let shift = trim_s as f64;
        spans
            .iter()
            .filter(|s| s.1 > shift)
            .map(|&(s, e)| ((s - shift).max(0.0), e - shift))
            .collect()
    });
    Ok(Recording {
        signal,
        channels: raw.channels,
        sample_rate: fs,
        electrode_coords: raw.electrode_coords.clone(),
        subject_id: raw.subject_id.clone(),
        state_labels,
        seizure_spans,
    })
}

/// Median of a slice.
pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::montage::standard_coords;

    fn tone(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn robust_scaling_definition() {
        // constant plus one spike: median is the constant, IQR is zero
        let mut x = vec![3.0; 100];
        x[50] = 40.0;
        assert!(robust_scale(&x).is_none());
        let x: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let y = robust_scale(&x).unwrap();
        assert!(median(&y).abs() < 1e-12);
        let iqr = quantile(&y, 0.75) - quantile(&y, 0.25);
        assert!((iqr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_channel_rejects_recording() {
        let n = 2500;
        let mut signal: Vec<f32> = tone(10.0, 250.0, n).iter().map(|&v| v as f32).collect();
        signal.extend(std::iter::repeat(1.0f32).take(n));
        let r = Recording {
            signal,
            channels: 2,
            sample_rate: 250.0,
            electrode_coords: standard_coords(2),
            subject_id: "flat".into(),
            state_labels: None,
            seizure_spans: None,
        };
        let err = preprocess(&r).unwrap_err();
        assert!(err.to_string().contains("flat"), "{err}");
    }

    #[test]
    fn quiet_lead_in_is_trimmed_with_labels() {
        let fs = 250.0;
        let n = 10 * 250;
        let mut x = tone(10.0, fs, n);
        for v in x.iter_mut().take(750) {
            *v = 0.0;
        }
        let r = Recording {
            signal: x.iter().map(|&v| v as f32).collect(),
            channels: 1,
            sample_rate: fs,
            electrode_coords: standard_coords(1),
            subject_id: "lead".into(),
            state_labels: Some((0..10).collect()),
            seizure_spans: Some(vec![(4.0, 6.0)]),
        };
        let out = preprocess(&r).unwrap();
        assert_eq!(out.samples(), 7 * 250);
        assert_eq!(out.state_labels.as_deref(), Some(&[3, 4, 5, 6, 7, 8, 9][..]));
        assert_eq!(out.seizure_spans, Some(vec![(1.0, 3.0)]));
    }

    #[test]
    fn filter_passes_10_and_55_hz() {
        let cfg = PreprocessConfig::default();
        for f in [10.0, 55.0] {
            let x = tone(f, 250.0, 5000);
            let y = filter_channel(&cfg, &x, 250.0);
            let ratio = rms(&y[500..4500]) / rms(&x[500..4500]);
            assert!(ratio > 0.7, "{f} Hz ratio {ratio}");
        }
    }
}
