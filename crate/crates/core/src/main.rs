use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use laya_core::config::RunConfig;
use laya_core::data::{
    channel_names, preprocess_with, read_dataset, read_recording, sample_windows, synthesize_dataset, tile_windows,
    write_dataset, Recording, SeizureConfig, TARGET_RATE,
};
use laya_core::diff::{DType, Real};
use laya_core::model::{init_params, ModelConfig, ParamStore};
use laya_core::probe::{
    confusion_csv, labeled_features, mean_affinity, projected_summaries, run_probe, LinearProbe, ProbeReport, ProbeTask,
};
use laya_core::robustness::{curve_csv, curve_plot, degradation_curve, NoiseKind};
use laya_core::sigreg::{covariance_spectrum, effective_rank, sigreg_value};
use laya_core::train::{init_seed, latest_checkpoint, load_model, objective_grad_check, read_state, GradCheckSetup, Trainer};
use laya_core::viz::{pca_rgb, recording_patches, render_timeline, state_shift_score};
use laya_core::LayaError;

const GRAD_TOLERANCE: f64 = 1e-4;

/// Masked latent prediction pretraining and evaluation for EEG.
#[derive(Parser)]
#[command(name = "laya", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stochastic component; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (receives config.resolved.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multichannel dataset with planted states.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        /// Seconds per recording.
        #[arg(long)]
        duration: Option<f64>,
        /// Plant seizure-like episodes.
        #[arg(long)]
        seizure: bool,
        /// Keep the raw sample rate instead of preprocessing.
        #[arg(long)]
        raw: bool,
    },
    /// Pretrain an encoder; writes metrics.jsonl and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        dtype: Option<DTypeArg>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fit a linear probe on frozen embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "state")]
        task: TaskArg,
        /// Probe a freshly initialized encoder instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
    },
    /// Probe accuracy under injected noise.
    NoiseEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// probe.json written by `probe`.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated noise kinds.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        /// Comma-separated SNR levels in dB.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        snr: Option<Vec<f64>>,
    },
    /// Render a recording with per-patch embedding colors; `--out` may
    /// name the PNG directly.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Recording directory.
        #[arg(long)]
        recording: PathBuf,
        /// Also print the state-shift score.
        #[arg(long)]
        score: bool,
    },
    /// Query-channel affinity as a channels x queries CSV.
    ExportAffinity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Regularizer value and embedding spectrum for a checkpoint.
    DiagnoseSigreg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Finite-difference check of the training objective's gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "tiny")]
        size: SizeArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    State,
    Second,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    Tiny,
}

/// Bad flags, configs or inputs; mapped to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Usage>()
            || matches!(
                e.downcast_ref::<LayaError>(),
                Some(LayaError::Config { .. } | LayaError::Format { .. })
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}

/// Config file (when given) with the seed override applied.
fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("config file not found: {}", path.display())));
            }
            RunConfig::load(path).map_err(|e| match e {
                LayaError::Io { .. } => usage(format!("cannot read config {}: {e}", path.display())),
                other => other.into(),
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Validates, then writes config.resolved.json into the output directory.
fn finish_config(cfg: &RunConfig, common: &Common, name: &str) -> Result<PathBuf> {
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    cfg.write_resolved(&out)?;
    Ok(out)
}

fn load_data(path: Option<&Path>, cfg: &RunConfig) -> Result<Vec<Recording>> {
    let raw = match path {
        Some(p) => {
            if !p.is_dir() {
                return Err(usage(format!("data directory not found: {}", p.display())));
            }
            read_dataset(p)?
        }
        None => synthesize_dataset(&cfg.data, cfg.seed)?,
    };
    raw.iter()
        .map(|r| {
            if r.sample_rate == TARGET_RATE {
                Ok(r.clone())
            } else {
                Ok(preprocess_with(r, &cfg.preprocess)?)
            }
        })
        .collect()
}

/// The model config of `ckpt`, or of the run config when absent.
fn model_config(ckpt: Option<&Path>, cfg: &RunConfig) -> Result<(ModelConfig, DType)> {
    match ckpt {
        Some(p) => {
            let dir = latest_checkpoint(p).with_context(|| format!("no checkpoint at {}", p.display()))?;
            let state = read_state(&dir)?;
            Ok((state.model, state.dtype))
        }
        None => Ok((cfg.model.clone(), cfg.train.dtype)),
    }
}

fn load_store<F: Real>(ckpt: Option<&Path>, model: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    match ckpt {
        Some(p) => Ok(load_model::<F>(p)?.1),
        None => Ok(init_params::<F>(model, init_seed(seed))?),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

macro_rules! by_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::SynthData {
            common,
            subjects,
            duration,
            seizure,
            raw,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = subjects {
                cfg.data.n_subjects = n;
            }
            if let Some(d) = duration {
                cfg.data.duration_s = d;
            }
            if seizure && cfg.data.seizure.is_none() {
                cfg.data.seizure = Some(SeizureConfig::default());
            }
            let out = finish_config(&cfg, &common, "synth-data")?;
            let mut recs = synthesize_dataset(&cfg.data, cfg.seed)?;
            if !raw {
                recs = recs
                    .iter()
                    .map(|r| preprocess_with(r, &cfg.preprocess))
                    .collect::<laya_core::Result<_>>()?;
            }
            let dirs = write_dataset(&recs, &out)?;
            println!("wrote {} recordings to {}", dirs.len(), out.display());
        }
        Command::Pretrain {
            common,
            data,
            steps,
            lr,
            batch,
            lambda,
            dtype,
            resume,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = steps {
                cfg.train.steps = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch {
                cfg.train.batch = v;
            }
            if let Some(v) = lambda {
                cfg.sigreg.lambda = v;
            }
            if let Some(d) = dtype {
                cfg.train.dtype = match d {
                    DTypeArg::F32 => DType::F32,
                    DTypeArg::F64 => DType::F64,
                };
            }
            let out = finish_config(&cfg, &common, "pretrain")?;
            let recs = load_data(data.as_deref(), &cfg)?;
            by_dtype!(cfg.train.dtype, pretrain(&cfg, &recs, &out, resume))?;
        }
        Command::Probe {
            common,
            ckpt,
            data,
            task,
            random_init,
        } => {
            let mut cfg = base_config(&common)?;
            let ckpt = match (ckpt, random_init) {
                (Some(_), true) => return Err(usage("--ckpt and --random-init are exclusive")),
                (None, false) => return Err(usage("probe needs --ckpt or --random-init")),
                (c, _) => c,
            };
            let (model, dtype) = model_config(ckpt.as_deref(), &cfg)?;
            cfg.model = model;
            let out = finish_config(&cfg, &common, "probe")?;
            let recs = load_data(data.as_deref(), &cfg)?;
            let task = match task {
                TaskArg::State => ProbeTask::State,
                TaskArg::Second => ProbeTask::Second,
            };
            by_dtype!(dtype, probe(&cfg, ckpt.as_deref(), &recs, task, &out))?;
        }
        Command::NoiseEval {
            common,
            ckpt,
            probe,
            data,
            kinds,
            snr,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(k) = kinds {
                cfg.noise.kinds = k
                    .iter()
                    .map(|s| s.trim().parse::<NoiseKind>().map_err(|e| usage(e.to_string())))
                    .collect::<Result<_>>()?;
            }
            if let Some(s) = snr {
                cfg.noise.snr_db = s;
            }
            cfg.noise.seed = cfg.seed;
            let saved = read_probe(&probe)?;
            let (model, dtype) = model_config(ckpt.as_deref(), &cfg)?;
            if ckpt.is_none() && saved.random_init_seed.is_none() {
                return Err(usage("probe was fit on a checkpoint; pass --ckpt"));
            }
            cfg.model = model;
            cfg.probe.window_seconds = saved.window_seconds;
            let out = finish_config(&cfg, &common, "noise-eval")?;
            let recs = load_data(data.as_deref(), &cfg)?;
            by_dtype!(dtype, noise_eval(&cfg, ckpt.as_deref(), &saved, &recs, &out))?;
        }
        Command::Visualize {
            common,
            ckpt,
            recording,
            score,
        } => {
            let mut common = common;
            // `--out fig.png` names the image; its directory holds the run files
            let image = match &common.out {
                Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) => {
                    let img = p.clone();
                    common.out = Some(img.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
                    Some(img)
                }
                _ => None,
            };
            let mut cfg = base_config(&common)?;
            let (model, dtype) = model_config(Some(&ckpt), &cfg)?;
            cfg.model = model;
            let out = finish_config(&cfg, &common, "visualize")?;
            if !recording.is_dir() {
                return Err(usage(format!("recording directory not found: {}", recording.display())));
            }
            let rec = read_recording(&recording)?;
            let rec = if rec.sample_rate == TARGET_RATE {
                rec
            } else {
                preprocess_with(&rec, &cfg.preprocess)?
            };
            let image = image.unwrap_or_else(|| out.join("fig.png"));
            by_dtype!(dtype, visualize(&cfg, &ckpt, &rec, &image, score))?;
        }
        Command::ExportAffinity { common, ckpt, data } => {
            let mut cfg = base_config(&common)?;
            let (model, dtype) = model_config(Some(&ckpt), &cfg)?;
            cfg.model = model;
            let out = finish_config(&cfg, &common, "export-affinity")?;
            let recs = load_data(data.as_deref(), &cfg)?;
            by_dtype!(dtype, export_affinity(&cfg, &ckpt, &recs, &out))?;
        }
        Command::DiagnoseSigreg {
            common,
            ckpt,
            data,
            batch,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(b) = batch {
                cfg.train.batch = b;
            }
            let (model, dtype) = model_config(Some(&ckpt), &cfg)?;
            cfg.model = model;
            let out = finish_config(&cfg, &common, "diagnose-sigreg")?;
            let recs = load_data(data.as_deref(), &cfg)?;
            by_dtype!(dtype, diagnose(&cfg, &ckpt, &recs, &out))?;
        }
        Command::GradCheck { common, size } => {
            let cfg = base_config(&common)?;
            let out = finish_config(&cfg, &common, "grad-check")?;
            let setup = match size {
                SizeArg::Tiny => GradCheckSetup::tiny(cfg.seed),
            };
            let report = objective_grad_check(&setup)?;
            write_text(&out.join("grad_check.json"), &serde_json::to_string_pretty(&report)?)?;
            println!(
                "max relative error {:.3e} over {} entries (tolerance {GRAD_TOLERANCE:e})",
                report.max_relative_error, report.entries_checked
            );
            if !(report.max_relative_error < GRAD_TOLERANCE) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn pretrain<F: Real>(cfg: &RunConfig, recs: &[Recording], out: &Path, resume: bool) -> Result<()> {
    let ckpts = out.join("checkpoints");
    let mut trainer = if resume {
        let t = Trainer::<F>::resume(&ckpts).with_context(|| format!("resuming from {}", ckpts.display()))?;
        if t.model != cfg.model || t.sigreg != cfg.sigreg || t.seed != cfg.seed {
            return Err(usage("resumed checkpoint disagrees with the resolved config"));
        }
        let mut t = t;
        t.train = cfg.train.clone();
        t
    } else {
        Trainer::<F>::new(cfg.model.clone(), cfg.train.clone(), cfg.sigreg.clone(), cfg.seed)?
    };
    let every = (cfg.train.steps / 20).max(1);
    let history = trainer.run(recs, Some(out), |m| {
        if m.step % every == 0 || m.step + 1 == cfg.train.steps {
            eprintln!(
                "step {:>6} loss {:.5} mse {:.5} sigreg {:.5} query {:.4} std {:.4}",
                m.step, m.loss_total, m.loss_mse, m.loss_sigreg, m.loss_query, m.embedding_std
            );
        }
    })?;
    println!(
        "trained {} steps; checkpoint {}",
        history.len(),
        latest_checkpoint(&ckpts)?.display()
    );
    Ok(())
}

/// What `noise-eval` needs from a fitted probe.
#[derive(Serialize, Deserialize)]
struct SavedProbe {
    task: ProbeTask,
    window_seconds: f64,
    test_subjects: Vec<String>,
    /// Seed of the random encoder the probe was fit on, if any.
    random_init_seed: Option<u64>,
    probe: LinearProbe,
}

fn read_probe(path: &Path) -> Result<SavedProbe> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read probe {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("malformed probe {}: {e}", path.display())))
}

fn probe<F: Real>(cfg: &RunConfig, ckpt: Option<&Path>, recs: &[Recording], task: ProbeTask, out: &Path) -> Result<()> {
    let store = load_store::<F>(ckpt, &cfg.model, cfg.seed)?;
    let feats = labeled_features(&store, &cfg.model, recs, task, &cfg.probe)?;
    let (fitted, report) = run_probe(&feats, recs, task, &cfg.probe, cfg.seed)?;
    let saved = SavedProbe {
        task,
        window_seconds: cfg.probe.window_seconds,
        test_subjects: report.test_subjects.clone(),
        random_init_seed: ckpt.is_none().then_some(cfg.seed),
        probe: fitted,
    };
    write_text(&out.join("probe.json"), &serde_json::to_string_pretty(&saved)?)?;
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&out.join("confusion.csv"), &confusion_csv(&report.test))?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &ProbeReport) {
    println!(
        "test balanced accuracy {:.4} (val {:.4}); accuracy {:.4}, macro F1 {:.4}, kappa {:.4}",
        r.test.balanced_accuracy, r.val.balanced_accuracy, r.test.accuracy, r.test.f1_macro, r.test.cohens_kappa
    );
}

fn noise_eval<F: Real>(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    saved: &SavedProbe,
    recs: &[Recording],
    out: &Path,
) -> Result<()> {
    if saved.task != ProbeTask::State {
        return Err(usage("noise-eval supports probes fit with --task state"));
    }
    let seed = saved.random_init_seed.unwrap_or(cfg.seed);
    let store = load_store::<F>(ckpt, &cfg.model, seed)?;
    let test: Vec<Recording> = recs
        .iter()
        .filter(|r| saved.test_subjects.contains(&r.subject_id))
        .cloned()
        .collect();
    if test.is_empty() {
        bail!("none of the probe's test subjects are in the data");
    }
    let windows = tile_windows(&test, saved.window_seconds, saved.window_seconds, cfg.model.patch_len)?;
    let points = degradation_curve(
        &store,
        &cfg.model,
        &saved.probe,
        &windows,
        test[0].sample_rate,
        &cfg.noise,
        cfg.probe.chunk,
    )?;
    write_text(&out.join("curve.csv"), &curve_csv(&points))?;
    curve_plot(&points, &cfg.noise.snr_db, 640, 400)?.save_png(&out.join("curve.png"))?;
    print!("{}", curve_csv(&points));
    Ok(())
}

fn visualize<F: Real>(cfg: &RunConfig, ckpt: &Path, rec: &Recording, image: &Path, score: bool) -> Result<()> {
    let store = load_store::<F>(Some(ckpt), &cfg.model, cfg.seed)?;
    let (z, labels) = recording_patches(&store, &cfg.model, rec, cfg.viz.window_seconds, cfg.probe.chunk)?;
    let used = z.rows * cfg.model.patch_len;
    let n = rec.samples();
    let mut shown = rec.clone();
    shown.signal = (0..rec.channels)
        .flat_map(|c| rec.signal[c * n..c * n + used].iter().copied())
        .collect();
    shown.state_labels = rec
        .state_labels
        .as_ref()
        .map(|l| l[..(used as f64 / rec.sample_rate).floor() as usize].to_vec());
    let colors = pca_rgb(&z.data, z.rows, z.dim)?;
    let spans = rec.seizure_spans.clone().unwrap_or_default();
    let canvas = render_timeline(&shown, cfg.model.patch_len, &colors, &spans, &cfg.viz.style())?;
    if let Some(parent) = image.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    canvas.save_png(image)?;
    println!("wrote {}", image.display());
    if score {
        let labels = labels.ok_or_else(|| usage("--score needs a recording with state labels"))?;
        println!("state shift score {:.4}", state_shift_score(&z.data, z.rows, z.dim, &labels)?);
    }
    Ok(())
}

fn export_affinity<F: Real>(cfg: &RunConfig, ckpt: &Path, recs: &[Recording], out: &Path) -> Result<()> {
    let store = load_store::<F>(Some(ckpt), &cfg.model, cfg.seed)?;
    let batch = sample_windows(recs, cfg.train.window_seconds, cfg.train.batch, cfg.model.patch_len, cfg.seed)?;
    let a = mean_affinity(&store, &cfg.model, &batch, cfg.probe.chunk)?;
    let q = cfg.model.n_queries;
    let names = channel_names(batch.channels);
    let mut csv = String::from("channel");
    for k in 0..q {
        csv.push_str(&format!(",q{k}"));
    }
    csv.push('\n');
    for (c, row) in a.chunks(q).enumerate() {
        csv.push_str(names.get(c).copied().unwrap_or("?"));
        for v in row {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
    }
    let path = out.join("affinity.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SigregDiagnosis {
    batch: usize,
    sigreg: f64,
    top_eigenvalues: Vec<f64>,
    effective_rank: f64,
    dim: usize,
}

fn diagnose<F: Real>(cfg: &RunConfig, ckpt: &Path, recs: &[Recording], out: &Path) -> Result<()> {
    let store = load_store::<F>(Some(ckpt), &cfg.model, cfg.seed)?;
    let batch = sample_windows(recs, cfg.train.window_seconds, cfg.train.batch, cfg.model.patch_len, cfg.seed)?;
    let p = projected_summaries(&store, &cfg.model, &batch, cfg.probe.chunk)?;
    let eig = covariance_spectrum(&p.data, p.rows, p.dim)?;
    let report = SigregDiagnosis {
        batch: p.rows,
        sigreg: sigreg_value(&p.data, p.rows, p.dim, &cfg.sigreg, cfg.seed)?,
        top_eigenvalues: eig.iter().take(5).copied().collect(),
        effective_rank: effective_rank(&eig),
        dim: p.dim,
    };
    write_text(&out.join("sigreg.json"), &serde_json::to_string_pretty(&report)?)?;
    println!("sigreg {:.6} on {} embeddings of dim {}", report.sigreg, report.batch, report.dim);
    println!("top eigenvalues {:?}", report.top_eigenvalues);
    println!("effective rank {:.3}", report.effective_rank);
    Ok(())
}
