use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::recording::Recording;
use crate::error::{LayaError, Result};

/// A batch of equal-length crops, row-major `batch x channels x samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub x: Vec<f32>,
    pub batch: usize,
    pub channels: usize,
    pub samples: usize,
    pub coords: Vec<[f64; 3]>,
    pub labels: Option<Vec<u32>>,
    /// `(recording index, first sample)` of each crop.
    pub origins: Vec<(usize, usize)>,
}

impl WindowBatch {
    pub fn window(&self, b: usize) -> &[f32] {
        let w = self.channels * self.samples;
        &self.x[b * w..(b + 1) * w]
    }

    /// Sub-batch with the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> WindowBatch {
        let mut x = Vec::with_capacity(rows.len() * self.channels * self.samples);
        for &r in rows {
            x.extend_from_slice(self.window(r));
        }
        WindowBatch {
            x,
            batch: rows.len(),
            channels: self.channels,
            samples: self.samples,
            coords: self.coords.clone(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
        }
    }
}

/// Samples per window, checked against the patch length.
pub fn window_samples(window_seconds: f64, sample_rate: f64, patch_len: usize) -> Result<usize> {
    let exact = window_seconds * sample_rate;
    let n = exact.round() as usize;
    if n == 0 || (exact - n as f64).abs() > 1e-9 {
        return Err(LayaError::config(
            "window_seconds",
            format!("{window_seconds} s is not a whole number of samples at {sample_rate} Hz"),
        ));
    }
    if patch_len == 0 || n % patch_len != 0 {
        return Err(LayaError::config(
            "window_seconds",
            format!("{n} samples not divisible by patch length {patch_len}"),
        ));
    }
    Ok(n)
}

/// Majority per-second label over samples `[start, start + len)`.
/// Ties go to the smaller label.
pub fn majority_label(r: &Recording, start: usize, len: usize) -> Option<u32> {
    let labels = r.state_labels.as_ref()?;
    let fs = r.sample_rate;
    let mut counts = std::collections::BTreeMap::new();
    let (mut t, end) = (start, start + len);
    while t < end {
        let sec = (t as f64 / fs).floor() as usize;
        let sec_end = (((sec + 1) as f64 * fs).ceil() as usize).clamp(t + 1, end);
        let label = labels[sec.min(labels.len() - 1)];
        *counts.entry(label).or_insert(0usize) += sec_end - t;
        t = sec_end;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(u32, usize)>, (l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l)
}

fn check_compatible(recordings: &[Recording], n: usize) -> Result<()> {
    let first = recordings
        .first()
        .ok_or_else(|| LayaError::Data("no recordings to window".into()))?;
    for r in recordings {
        if r.channels != first.channels || r.electrode_coords != first.electrode_coords {
            return Err(LayaError::Data(format!(
                "{}: montage differs from {}",
                r.subject_id, first.subject_id
            )));
        }
        if r.samples() < n {
            return Err(LayaError::Data(format!(
                "{}: {} samples is shorter than the {} sample window",
                r.subject_id,
                r.samples(),
                n
            )));
        }
    }
    Ok(())
}

fn gather(recordings: &[Recording], origins: Vec<(usize, usize)>, n: usize) -> WindowBatch {
    let c = recordings[0].channels;
    let mut x = Vec::with_capacity(origins.len() * c * n);
    for &(ri, off) in &origins {
        let r = &recordings[ri];
        for ch in 0..c {
            x.extend_from_slice(&r.channel(ch)[off..off + n]);
        }
    }
    let labels = if recordings.iter().all(|r| r.state_labels.is_some()) {
        Some(
            origins
                .iter()
                .map(|&(ri, off)| majority_label(&recordings[ri], off, n).unwrap_or(0))
                .collect(),
        )
    } else {
        None
    };
    WindowBatch {
        x,
        batch: origins.len(),
        channels: c,
        samples: n,
        coords: recordings[0].electrode_coords.clone(),
        labels,
        origins,
    }
}

/// Uniform random crops: a recording is picked uniformly, then an offset
/// uniformly in `[0, samples - n]`.
pub fn sample_windows(
    recordings: &[Recording],
    window_seconds: f64,
    batch: usize,
    patch_len: usize,
    seed: u64,
) -> Result<WindowBatch> {
    let fs = recordings.first().map_or(250.0, |r| r.sample_rate);
    let n = window_samples(window_seconds, fs, patch_len)?;
    check_compatible(recordings, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins = (0..batch)
        .map(|_| {
            let ri = rng.random_range(0..recordings.len());
            let off = rng.random_range(0..=recordings[ri].samples() - n);
            (ri, off)
        })
        .collect();
    Ok(gather(recordings, origins, n))
}

/// Non-overlapping consecutive windows covering each recording from the
/// start; used by evaluation so every window is seen exactly once.
pub fn tile_windows(
    recordings: &[Recording],
    window_seconds: f64,
    hop_seconds: f64,
    patch_len: usize,
) -> Result<WindowBatch> {
    let fs = recordings.first().map_or(250.0, |r| r.sample_rate);
    let n = window_samples(window_seconds, fs, patch_len)?;
    let hop = (hop_seconds * fs).round() as usize;
    if hop == 0 {
        return Err(LayaError::config("hop_seconds", "must be positive"));
    }
    check_compatible(recordings, n)?;
    let mut origins = Vec::new();
    for (ri, r) in recordings.iter().enumerate() {
        let mut off = 0;
        while off + n <= r.samples() {
            origins.push((ri, off));
            off += hop;
        }
    }
    Ok(gather(recordings, origins, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::montage::standard_coords;

    fn rec(seconds: usize, labels: Vec<u32>) -> Recording {
        let n = seconds * 250;
        Recording {
            signal: (0..2 * n).map(|i| i as f32).collect(),
            channels: 2,
            sample_rate: 250.0,
            electrode_coords: standard_coords(2),
            subject_id: "w".into(),
            state_labels: Some(labels),
            seizure_spans: None,
        }
    }

    #[test]
    fn window_shape_and_bounds() {
        let recs = vec![rec(20, vec![0; 20]), rec(30, vec![1; 30])];
        let b = sample_windows(&recs, 16.0, 64, 25, 9).unwrap();
        assert_eq!(b.samples, 4000);
        assert_eq!(b.x.len(), 64 * 2 * 4000);
        for (k, &(ri, off)) in b.origins.iter().enumerate() {
            assert!(off <= recs[ri].samples() - 4000);
            assert_eq!(b.window(k)[0], recs[ri].channel(0)[off]);
            assert_eq!(b.labels.as_ref().unwrap()[k], ri as u32);
        }
    }

    #[test]
    fn reproducible_with_seed() {
        let recs = vec![rec(20, vec![0; 20])];
        let a = sample_windows(&recs, 4.0, 8, 25, 1).unwrap();
        let b = sample_windows(&recs, 4.0, 8, 25, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn majority_label_counts_samples() {
        let r = rec(4, vec![0, 1, 1, 2]);
        assert_eq!(majority_label(&r, 0, 500), Some(0));
        assert_eq!(majority_label(&r, 125, 500), Some(1));
        assert_eq!(majority_label(&r, 500, 500), Some(1));
    }

    #[test]
    fn errors() {
        let recs = vec![rec(10, vec![0; 10])];
        assert!(sample_windows(&recs, 16.0, 4, 25, 0).is_err());
        assert!(sample_windows(&recs, 4.01, 4, 25, 0).is_err());
    }

    #[test]
    fn tiling_covers_whole_windows() {
        let recs = vec![rec(10, vec![0; 10])];
        let b = tile_windows(&recs, 4.0, 4.0, 25).unwrap();
        assert_eq!(b.origins, vec![(0, 0), (0, 1000)]);
    }
}
