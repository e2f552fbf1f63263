mod common;

use common::{loglog_slope, random_batch, rms, tiny_model, welch};
use laya_core::data::{preprocess, sample_windows, synthesize_dataset, SynthConfig, WindowBatch};
use laya_core::model::init_params;
use laya_core::probe::{compute_metrics, embed_windows, fit_linear_probe, ProbeConfig};
use laya_core::robustness::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FS: f64 = 250.0;

fn spec(kind: NoiseKind, snr_db: Option<f64>, seed: u64) -> NoiseSpec {
    NoiseSpec {
        kind,
        snr_db,
        dropout_fraction: None,
        seed,
    }
}

fn eeg_windows(batch: usize) -> WindowBatch {
    let cfg = SynthConfig {
        n_subjects: 3,
        channels: 6,
        duration_s: 30.0,
        window_seconds: 4.0,
        ..SynthConfig::default()
    };
    let recs: Vec<_> = synthesize_dataset(&cfg, 1).unwrap().iter().map(|r| preprocess(r).unwrap()).collect();
    sample_windows(&recs, 4.0, batch, 25, 2).unwrap()
}

#[test]
fn injected_snr_is_calibrated_for_every_additive_kind() {
    let clean = eeg_windows(100);
    let cfg = NoiseConfig::default();
    for kind in [NoiseKind::Gaussian, NoiseKind::OneOverF, NoiseKind::Emg, NoiseKind::Combined] {
        for snr in [30.0, 20.0, 10.0, 0.0] {
            let noisy = inject_noise(&clean, &spec(kind, Some(snr), 3), &cfg, FS).unwrap();
            let measured = measured_snr_db(&clean, &noisy);
            assert!(!measured.is_empty());
            for m in measured {
                assert!((m - snr).abs() <= 0.5, "{kind} at {snr} dB measured {m:.3}");
            }
        }
    }
}

#[test]
fn unit_rms_channel_gets_the_expected_noise_rms() {
    let mut clean = random_batch(1, 1, 10_000, 4);
    let r = rms(&clean.x.iter().map(|&v| v as f64).collect::<Vec<_>>()) as f32;
    clean.x.iter_mut().for_each(|v| *v /= r);
    for (snr, expect) in [(0.0, 1.0), (20.0, 0.1)] {
        let noisy = inject_noise(&clean, &spec(NoiseKind::Gaussian, Some(snr), 5), &NoiseConfig::default(), FS).unwrap();
        let added: Vec<f64> = noisy.x.iter().zip(&clean.x).map(|(a, b)| (a - b) as f64).collect();
        let got = rms(&added);
        assert!((got / expect - 1.0).abs() < 0.01, "{snr} dB: noise rms {got}");
    }
}

#[test]
fn pink_noise_has_unit_log_log_slope() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = unit_noise(&mut rng, NoiseKind::OneOverF, 250 * 120, FS, &NoiseConfig::default()).unwrap();
    let (f, p) = welch(&x, FS, 1000);
    let (lf, lp): (Vec<f64>, Vec<f64>) = f
        .iter()
        .zip(&p)
        .filter(|(&f, _)| (1.0..=50.0).contains(&f))
        .map(|(&f, &p)| (f, p))
        .unzip();
    let slope = loglog_slope(&lf, &lp);
    assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
}

#[test]
fn injection_is_seeded_per_window_and_infinite_snr_is_identity() {
    let clean = eeg_windows(6);
    let cfg = NoiseConfig::default();
    let s = spec(NoiseKind::Combined, Some(10.0), 7);
    let a = inject_noise(&clean, &s, &cfg, FS).unwrap();
    assert_eq!(a, inject_noise(&clean, &s, &cfg, FS).unwrap());
    assert_ne!(a, inject_noise(&clean, &spec(NoiseKind::Combined, Some(10.0), 8), &cfg, FS).unwrap());
    // window b only depends on (seed, b)
    let mut head = clean.clone();
    let w = clean.channels * clean.samples;
    head.x.truncate(2 * w);
    head.batch = 2;
    head.origins.truncate(2);
    head.labels = head.labels.map(|l| l[..2].to_vec());
    assert_eq!(inject_noise(&head, &s, &cfg, FS).unwrap().x, a.x[..2 * w].to_vec());
    assert_eq!(inject_noise(&clean, &spec(NoiseKind::Emg, Some(f64::INFINITY), 1), &cfg, FS).unwrap(), clean);
    assert!(inject_noise(&clean, &spec(NoiseKind::ChannelDropout, Some(3.0), 1), &cfg, FS).is_err());
    assert!(inject_noise(&clean, &spec(NoiseKind::Gaussian, None, 1), &cfg, FS).is_err());
}

#[test]
fn clean_curve_point_reproduces_direct_evaluation_and_full_dropout_is_chance() {
    let cfg = tiny_model();
    let store = init_params::<f64>(&cfg, 9).unwrap();
    let windows = eeg_windows(60);
    let labels = windows.labels.clone().unwrap();
    let feats = embed_windows(&store, &cfg, &windows, 16).unwrap();
    let probe = fit_linear_probe(&feats, &labels, &ProbeConfig::default()).unwrap();
    let direct = compute_metrics(&probe.predict(&feats), &labels).unwrap().balanced_accuracy;

    let noise = NoiseConfig {
        kinds: vec![NoiseKind::Gaussian],
        snr_db: vec![f64::INFINITY, 10.0],
        ..NoiseConfig::default()
    };
    let curve = degradation_curve(&store, &cfg, &probe, &windows, FS, &noise, 16).unwrap();
    assert_eq!(curve[0].balanced_accuracy, direct);
    assert_eq!(curve[1].balanced_accuracy, direct);
    assert_eq!(curve[1].retention, 1.0);

    let dropped = inject_noise(
        &windows,
        &NoiseSpec {
            kind: NoiseKind::ChannelDropout,
            snr_db: None,
            dropout_fraction: Some(1.0),
            seed: 0,
        },
        &noise,
        FS,
    )
    .unwrap();
    assert!(dropped.x.iter().all(|&v| v == 0.0));
    let f = embed_windows(&store, &cfg, &dropped, 16).unwrap();
    let bal = compute_metrics(&probe.predict(&f), &labels).unwrap().balanced_accuracy;
    let classes = {
        let mut l = labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    assert!((bal - 1.0 / classes as f64).abs() <= 0.1, "dropout accuracy {bal}");
}
