use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::container::{Manifest, TensorEntry};
use crate::diff::DType;
use crate::error::{LayaError, Result};

/// One multichannel EEG segment, row-major `channels x samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub signal: Vec<f32>,
    pub channels: usize,
    pub sample_rate: f64,
    pub electrode_coords: Vec<[f64; 3]>,
    pub subject_id: String,
    /// One label per whole second.
    pub state_labels: Option<Vec<u32>>,
    /// `(start_s, end_s)` of planted seizure episodes.
    pub seizure_spans: Option<Vec<(f64, f64)>>,
}

impl Recording {
    pub fn samples(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.signal.len() / self.channels
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples() as f64 / self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.samples();
        &self.signal[c * n..(c + 1) * n]
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.channel(c).iter().map(|&v| v as f64).collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.signal.len() % self.channels != 0 {
            return Err(LayaError::Data(format!(
                "{}: signal length {} not divisible by {} channels",
                self.subject_id,
                self.signal.len(),
                self.channels
            )));
        }
        if self.electrode_coords.len() != self.channels {
            return Err(LayaError::Data(format!(
                "{}: {} coordinate rows for {} channels",
                self.subject_id,
                self.electrode_coords.len(),
                self.channels
            )));
        }
        if let Some(labels) = &self.state_labels {
            let expect = (self.samples() as f64 / self.sample_rate).floor() as usize;
            if labels.len() != expect {
                return Err(LayaError::Data(format!(
                    "{}: {} state labels for {} whole seconds",
                    self.subject_id,
                    labels.len(),
                    expect
                )));
            }
        }
        Ok(())
    }

    /// Per-sample label (label of the containing second).
    pub fn label_at_sample(&self, t: usize) -> Option<u32> {
        let labels = self.state_labels.as_ref()?;
        let sec = (t as f64 / self.sample_rate).floor() as usize;
        labels.get(sec.min(labels.len().saturating_sub(1))).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordingMeta {
    subject_id: String,
    sample_rate: f64,
    channels: usize,
    samples: usize,
    electrode_coords: Vec<[f64; 3]>,
    #[serde(default)]
    state_labels: Option<Vec<u32>>,
    #[serde(default)]
    seizure_spans: Option<Vec<(f64, f64)>>,
    tensors: Vec<TensorEntry>,
}

const META: &str = "meta.json";
const BLOB: &str = "signal.bin";

/// Writes `meta.json` + `signal.bin` (little-endian f32) into `dir`.
pub fn write_recording(r: &Recording, dir: &Path) -> Result<()> {
    r.validate()?;
    fs::create_dir_all(dir).map_err(|e| LayaError::io(dir, e))?;
    let meta = RecordingMeta {
        subject_id: r.subject_id.clone(),
        sample_rate: r.sample_rate,
        channels: r.channels,
        samples: r.samples(),
        electrode_coords: r.electrode_coords.clone(),
        state_labels: r.state_labels.clone(),
        seizure_spans: r.seizure_spans.clone(),
        tensors: vec![TensorEntry {
            name: "signal".into(),
            shape: vec![r.channels, r.samples()],
            dtype: DType::F32,
            byte_offset: 0,
        }],
    };
    let mut blob = Vec::with_capacity(r.signal.len() * 4);
    for v in &r.signal {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, blob).map_err(|e| LayaError::io(&blob_path, e))?;
    let meta_path = dir.join(META);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| LayaError::io(&meta_path, e))?;
    Ok(())
}

pub fn read_recording(dir: &Path) -> Result<Recording> {
    let meta_path = dir.join(META);
    let text = fs::read(&meta_path).map_err(|e| LayaError::io(&meta_path, e))?;
    let meta: RecordingMeta = serde_json::from_slice(&text).map_err(|e| LayaError::Format {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let bad = |message: String| LayaError::Format {
        path: meta_path.clone(),
        message,
    };
    let entry = meta
        .tensors
        .iter()
        .find(|t| t.name == "signal")
        .ok_or_else(|| bad("no `signal` tensor entry".into()))?;
    if entry.shape != [meta.channels, meta.samples] || entry.dtype != DType::F32 {
        return Err(bad(format!(
            "signal entry {:?}/{:?} disagrees with {} channels x {} samples f32",
            entry.shape, entry.dtype, meta.channels, meta.samples
        )));
    }
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| LayaError::io(&blob_path, e))?;
    let manifest = Manifest {
        tensors: vec![entry.clone()],
    };
    if blob.len() != manifest.blob_len() {
        return Err(LayaError::Format {
            path: blob_path,
            message: format!(
                "blob has {} bytes, manifest needs {} ({} channels x {} samples)",
                blob.len(),
                manifest.blob_len(),
                meta.channels,
                meta.samples
            ),
        });
    }
    let signal: Vec<f32> = blob[entry.byte_offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let r = Recording {
        signal,
        channels: meta.channels,
        sample_rate: meta.sample_rate,
        electrode_coords: meta.electrode_coords,
        subject_id: meta.subject_id,
        state_labels: meta.state_labels,
        seizure_spans: meta.seizure_spans,
    };
    r.validate().map_err(|e| bad(e.to_string()))?;
    Ok(r)
}

/// Writes each recording to `dir/rec_XXXX`.
pub fn write_dataset(recordings: &[Recording], dir: &Path) -> Result<Vec<PathBuf>> {
    recordings
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let sub = dir.join(format!("rec_{i:04}"));
            write_recording(r, &sub)?;
            Ok(sub)
        })
        .collect()
}

/// Reads every subdirectory of `dir` that holds a `meta.json`, in name
/// order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Recording>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LayaError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META).is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(LayaError::Data(format!("no recordings under {}", dir.display())));
    }
    subdirs.iter().map(|p| read_recording(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Recording {
        Recording {
            signal: (0..2 * 500).map(|i| (i as f32 * 0.37).sin() * 3.0).collect(),
            channels: 2,
            sample_rate: 250.0,
            electrode_coords: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            subject_id: "s01".into(),
            state_labels: Some(vec![0, 1]),
            seizure_spans: Some(vec![(0.5, 1.0)]),
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        write_recording(&r, dir.path()).unwrap();
        assert_eq!(read_recording(dir.path()).unwrap(), r);
    }

    #[test]
    fn missing_blob_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write_recording(&sample(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(BLOB)).unwrap();
        let err = read_recording(dir.path()).unwrap_err();
        assert!(err.to_string().contains("signal.bin"), "{err}");
    }

    #[test]
    fn channel_count_mismatch_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write_recording(&sample(), dir.path()).unwrap();
        let path = dir.path().join(META);
        let mut meta: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        meta["channels"] = 3.into();
        meta["tensors"][0]["shape"] = serde_json::json!([3, 500]);
        meta["electrode_coords"] = serde_json::json!([[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        fs::write(&path, serde_json::to_vec(&meta).unwrap()).unwrap();
        let err = read_recording(dir.path()).unwrap_err();
        assert!(matches!(err, LayaError::Format { .. }), "{err}");
    }

    #[test]
    fn malformed_manifest_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write_recording(&sample(), dir.path()).unwrap();
        fs::write(dir.path().join(META), b"{ not json").unwrap();
        assert!(matches!(read_recording(dir.path()), Err(LayaError::Format { .. })));
    }
}
