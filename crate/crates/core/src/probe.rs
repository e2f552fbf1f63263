//! Frozen-encoder features, a multinomial logistic probe and the
//! classification metric suite.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tile_windows, Recording, WindowBatch};
use crate::diff::{Graph, Real, Tensor};
use crate::error::{LayaError, Result};
use crate::model::{Bound, Laya, ModelConfig, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Subject fractions for train / validation / test.
    pub split: [f64; 3],
    pub window_seconds: f64,
    /// Windows embedded per forward pass.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-3,
            epochs: 1000,
            lr: 0.5,
            split: [0.70, 0.15, 0.15],
            window_seconds: 16.0,
            chunk: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) {
            return Err(LayaError::config("probe.l2", "must be >= 0"));
        }
        if !(self.lr > 0.0) || self.epochs == 0 {
            return Err(LayaError::config("probe.lr", "lr and epochs must be positive"));
        }
        if self.split.iter().any(|&f| !(f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(LayaError::config("probe.split", "fractions must be >= 0 and sum to 1"));
        }
        if self.chunk == 0 {
            return Err(LayaError::config("probe.chunk", "must be positive"));
        }
        Ok(())
    }
}

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub data: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
}

impl Features {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Features {
            data,
            rows: rows.len(),
            dim: self.dim,
        }
    }
}

fn batch_tensor<F: Real>(batch: &WindowBatch, rows: std::ops::Range<usize>) -> Result<Tensor<F>> {
    let w = batch.channels * batch.samples;
    let data = batch.x[rows.start * w..rows.end * w]
        .iter()
        .map(|&v| F::from_f64_lossy(v as f64))
        .collect();
    Tensor::from_vec(vec![rows.len(), batch.channels, batch.samples], data)
}

/// Eval-mode full-pass embeddings, chunked. Returns `(Z rows, z_cls)`
/// where `Z` has `windows * N` rows in window-major order.
pub fn embed_batch<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    chunk: usize,
    keep_patches: bool,
) -> Result<(Option<Features>, Features)> {
    let d = cfg.model_dim;
    let mut cls = Vec::with_capacity(batch.batch * d);
    let mut patches = Vec::new();
    let mut start = 0;
    while start < batch.batch {
        let end = (start + chunk.max(1)).min(batch.batch);
        let g = Graph::<F>::new();
        let bound = Bound::new(&g, store, false);
        let model = Laya::new(&bound, store, cfg, false);
        let x = g.constant(batch_tensor::<F>(batch, start..end)?);
        let (z, z_cls, _) = model.embed(x, &batch.coords)?;
        cls.extend(g.value(z_cls).to_f64_vec());
        if keep_patches {
            patches.extend(g.value(z).to_f64_vec());
        }
        start = end;
    }
    let n = batch.samples / cfg.patch_len;
    let z = keep_patches.then(|| Features {
        rows: batch.batch * n,
        dim: d,
        data: patches,
    });
    Ok((
        z,
        Features {
            data: cls,
            rows: batch.batch,
            dim: d,
        },
    ))
}

/// Summary embeddings `z_cls`, one row per window.
pub fn embed_windows<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    chunk: usize,
) -> Result<Features> {
    Ok(embed_batch(store, cfg, batch, chunk, false)?.1)
}

/// Eval-mode projected summaries `p_cls`, the embeddings the
/// regularizer sees during training.
pub fn projected_summaries<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    chunk: usize,
) -> Result<Features> {
    let mut data = Vec::with_capacity(batch.batch * cfg.proj_dim);
    for_chunks(store, cfg, batch, chunk, |model, x| {
        let (_, z_cls, _) = model.embed(x, &batch.coords)?;
        data.extend(model.g.value(model.project(z_cls, false)?).to_f64_vec());
        Ok(())
    })?;
    Ok(Features {
        data,
        rows: batch.batch,
        dim: cfg.proj_dim,
    })
}

/// Query-channel affinity averaged over the windows of `batch`,
/// row-major `channels x queries`.
pub fn mean_affinity<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    chunk: usize,
) -> Result<Vec<f64>> {
    let (c, q) = (batch.channels, cfg.n_queries);
    let mut acc = vec![0.0; c * q];
    for_chunks(store, cfg, batch, chunk, |model, x| {
        let mixed = model.mix(model.patch_embed(x)?, &batch.coords)?;
        let a = model.g.value(mixed.affinity).to_f64_vec();
        for w in a.chunks(q * c) {
            for (k, row) in w.chunks(c).enumerate() {
                for (ch, v) in row.iter().enumerate() {
                    acc[ch * q + k] += v / batch.batch as f64;
                }
            }
        }
        Ok(())
    })?;
    Ok(acc)
}

fn for_chunks<F: Real>(
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    chunk: usize,
    mut f: impl FnMut(&Laya<'_, '_, F>, crate::diff::Var) -> Result<()>,
) -> Result<()> {
    let mut start = 0;
    while start < batch.batch {
        let end = (start + chunk.max(1)).min(batch.batch);
        let g = Graph::<F>::new();
        let bound = Bound::new(&g, store, false);
        let model = Laya::new(&bound, store, cfg, false);
        f(&model, g.constant(batch_tensor::<F>(batch, start..end)?))?;
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Features) -> Self {
        let (n, d) = (x.rows as f64, x.dim);
        let mut mean = vec![0.0; d];
        for i in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..x.rows {
            for j in 0..d {
                var[j] += (x.row(i)[j] - mean[j]).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = v.sqrt();
                // near-constant columns carry no signal; keep them at zero
                if s > 1e-12 * (1.0 + m.abs()) {
                    s
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Features) -> Features {
        let mut data = x.data.clone();
        for row in data.chunks_mut(x.dim) {
            for j in 0..x.dim {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        Features {
            data,
            rows: x.rows,
            dim: x.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// `(dim + 1) x classes`, bias row last.
    pub weights: Vec<f64>,
    pub standardizer: Standardizer,
}

fn softmax_row(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logits.iter_mut().for_each(|v| *v /= sum);
}

impl LinearProbe {
    fn logits(&self, row: &[f64], out: &mut [f64]) {
        let k = self.classes;
        out.copy_from_slice(&self.weights[self.dim * k..(self.dim + 1) * k]);
        for (j, &x) in row.iter().enumerate() {
            if x != 0.0 {
                for c in 0..k {
                    out[c] += x * self.weights[j * k + c];
                }
            }
        }
    }

    /// Class probabilities for raw (unstandardized) features.
    pub fn predict_proba(&self, x: &Features) -> Vec<f64> {
        let xs = self.standardizer.apply(x);
        let k = self.classes;
        let mut out = vec![0.0; x.rows * k];
        for i in 0..x.rows {
            let row = &mut out[i * k..(i + 1) * k];
            self.logits(xs.row(i), row);
            softmax_row(row);
        }
        out
    }

    pub fn predict(&self, x: &Features) -> Vec<u32> {
        let k = self.classes;
        self.predict_proba(x)
            .chunks(k)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Multinomial logistic regression by full-batch gradient descent
/// from zero weights, on train-standardized features; L2 on weights
/// only.
pub fn fit_linear_probe(x: &Features, labels: &[u32], cfg: &ProbeConfig) -> Result<LinearProbe> {
    if x.rows != labels.len() || x.rows == 0 {
        return Err(LayaError::InvalidArgument(format!(
            "{} feature rows for {} labels",
            x.rows,
            labels.len()
        )));
    }
    let distinct: BTreeSet<u32> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(LayaError::InvalidArgument("probe needs at least 2 classes".into()));
    }
    let k = *distinct.iter().next_back().unwrap() as usize + 1;
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x);
    let d = x.dim;
    let mut probe = LinearProbe {
        classes: k,
        dim: d,
        weights: vec![0.0; (d + 1) * k],
        standardizer,
    };
    let n = x.rows as f64;
    let mut grad = vec![0.0; (d + 1) * k];
    let mut p = vec![0.0; k];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..x.rows {
            let row = xs.row(i);
            probe.logits(row, &mut p);
            softmax_row(&mut p);
            p[labels[i] as usize] -= 1.0;
            for (j, &xv) in row.iter().enumerate() {
                for c in 0..k {
                    grad[j * k + c] += xv * p[c] / n;
                }
            }
            for c in 0..k {
                grad[d * k + c] += p[c] / n;
            }
        }
        for (i, w) in probe.weights.iter_mut().enumerate() {
            let reg = if i < d * k { cfg.l2 * *w } else { 0.0 };
            *w -= cfg.lr * (grad[i] + reg);
        }
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub cohens_kappa: f64,
    /// `confusion[truth][pred]` counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Metrics from a confusion matrix over `max(label) + 1` classes.
/// Balanced accuracy averages recall over classes present in `truth`;
/// macro F1 averages over classes present in either vector.
pub fn compute_metrics(pred: &[u32], truth: &[u32]) -> Result<ProbeResult> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(LayaError::InvalidArgument(format!(
            "metrics need equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let k = pred.iter().chain(truth).copied().max().unwrap() as usize + 1;
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t as usize][p as usize] += 1;
    }
    let n = pred.len() as f64;
    let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();

    let (mut recall_sum, mut present) = (0.0, 0usize);
    let (mut f1_sum, mut f1_classes, mut f1_weighted) = (0.0, 0usize, 0.0);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        if support[c] > 0 {
            recall_sum += tp / support[c] as f64;
            present += 1;
        }
        if support[c] + predicted[c] > 0 {
            let f1 = 2.0 * tp / (support[c] + predicted[c]) as f64;
            f1_sum += f1;
            f1_classes += 1;
            f1_weighted += f1 * support[c] as f64 / n;
        }
    }
    let p_o = correct as f64 / n;
    let p_e: f64 = (0..k)
        .map(|c| (support[c] as f64 / n) * (predicted[c] as f64 / n))
        .sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        if p_o == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(ProbeResult {
        balanced_accuracy: recall_sum / present as f64,
        accuracy: p_o,
        f1_macro: f1_sum / f1_classes as f64,
        f1_weighted,
        cohens_kappa: kappa,
        confusion,
    })
}

/// Subject-level split into (train, validation, test) id lists, shuffled
/// by `seed`. Each non-empty fraction gets at least one subject when
/// there are enough subjects.
pub fn split_subjects(subjects: &[String], fractions: [f64; 3], seed: u64) -> [Vec<String>; 3] {
    let mut ids: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let mut counts = [0usize; 3];
    counts[1] = (fractions[1] * n as f64).round() as usize;
    counts[2] = (fractions[2] * n as f64).round() as usize;
    for i in 1..3 {
        if fractions[i] > 0.0 && counts[i] == 0 && n >= 3 {
            counts[i] = 1;
        }
    }
    counts[0] = n.saturating_sub(counts[1] + counts[2]);
    let test = ids.split_off(n - counts[2].min(n));
    let val = ids.split_off(ids.len() - counts[1].min(ids.len()));
    [ids, val, test]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// One majority label per window.
    State,
    /// One label per second from the mean of that second's patches.
    Second,
}

/// Features with labels and the recording each row came from.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub features: Features,
    pub labels: Vec<u32>,
    pub recording: Vec<usize>,
}

impl LabeledFeatures {
    pub fn select(&self, rows: &[usize]) -> LabeledFeatures {
        LabeledFeatures {
            features: self.features.select(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            recording: rows.iter().map(|&r| self.recording[r]).collect(),
        }
    }
}

/// Means of consecutive groups of `group` patch rows.
pub fn pool_patches(z: &Features, group: usize) -> Result<Features> {
    if group == 0 || z.rows % group != 0 {
        return Err(LayaError::InvalidArgument(format!(
            "{} patch rows do not split into groups of {group}",
            z.rows
        )));
    }
    let rows = z.rows / group;
    let mut data = vec![0.0; rows * z.dim];
    for r in 0..z.rows {
        let out = &mut data[(r / group) * z.dim..(r / group + 1) * z.dim];
        for (o, v) in out.iter_mut().zip(z.row(r)) {
            *o += v / group as f64;
        }
    }
    Ok(Features { data, rows, dim: z.dim })
}

/// Tiles labelled recordings into non-overlapping windows and embeds
/// them for `task`.
pub fn labeled_features<F: Real>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    recordings: &[Recording],
    task: ProbeTask,
    cfg: &ProbeConfig,
) -> Result<LabeledFeatures> {
    if recordings.iter().any(|r| r.state_labels.is_none()) {
        return Err(LayaError::Data("probing needs state labels on every recording".into()));
    }
    let batch = tile_windows(recordings, cfg.window_seconds, cfg.window_seconds, model.patch_len)?;
    let recording: Vec<usize> = batch.origins.iter().map(|o| o.0).collect();
    match task {
        ProbeTask::State => Ok(LabeledFeatures {
            features: embed_windows(store, model, &batch, cfg.chunk)?,
            labels: batch.labels.clone().expect("labels checked"),
            recording,
        }),
        ProbeTask::Second => {
            let fs = recordings[0].sample_rate;
            let per_second = fs / model.patch_len as f64;
            if (per_second - per_second.round()).abs() > 1e-9 || cfg.window_seconds.fract() != 0.0 {
                return Err(LayaError::config(
                    "probe.window_seconds",
                    "per-second probing needs whole seconds of whole patches",
                ));
            }
            let (z, _) = embed_batch(store, model, &batch, cfg.chunk, true)?;
            let features = pool_patches(&z.expect("patches kept"), per_second.round() as usize)?;
            let secs = cfg.window_seconds as usize;
            let mut labels = Vec::with_capacity(features.rows);
            let mut rows_rec = Vec::with_capacity(features.rows);
            for &(ri, off) in &batch.origins {
                let r = &recordings[ri];
                for s in 0..secs {
                    let t = off + (s as f64 * fs).round() as usize;
                    labels.push(r.label_at_sample(t).expect("labels checked"));
                    rows_rec.push(ri);
                }
            }
            Ok(LabeledFeatures {
                features,
                labels,
                recording: rows_rec,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub val: ProbeResult,
    pub test: ProbeResult,
}

/// Subject-disjoint split, probe fit on train, metrics on validation
/// and test.
pub fn run_probe(
    data: &LabeledFeatures,
    recordings: &[Recording],
    task: ProbeTask,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(LinearProbe, ProbeReport)> {
    let subjects: Vec<String> = recordings.iter().map(|r| r.subject_id.clone()).collect();
    let [train, val, test] = split_subjects(&subjects, cfg.split, seed);
    if train.is_empty() || test.is_empty() {
        return Err(LayaError::Data(format!(
            "{} subjects are too few for a train/test split",
            train.len() + val.len() + test.len()
        )));
    }
    let rows_of = |ids: &[String]| -> Vec<usize> {
        (0..data.labels.len())
            .filter(|&i| ids.contains(&recordings[data.recording[i]].subject_id))
            .collect()
    };
    let tr = data.select(&rows_of(&train));
    let probe = fit_linear_probe(&tr.features, &tr.labels, cfg)?;
    let score = |ids: &[String]| -> Result<ProbeResult> {
        let part = data.select(&rows_of(ids));
        compute_metrics(&probe.predict(&part.features), &part.labels)
    };
    let test_result = score(&test)?;
    let report = ProbeReport {
        task,
        val: if val.is_empty() { test_result.clone() } else { score(&val)? },
        test: test_result,
        train_subjects: train,
        val_subjects: val,
        test_subjects: test,
    };
    Ok((probe, report))
}

/// `truth,pred` counts as CSV with a header row of predicted classes.
pub fn confusion_csv(result: &ProbeResult) -> String {
    let k = result.confusion.len();
    let mut out = String::from("truth");
    for c in 0..k {
        out.push_str(&format!(",pred_{c}"));
    }
    out.push('\n');
    for (t, row) in result.confusion.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
