mod common;

use common::gaussian_rows;
use laya_core::data::{standard_coords, Recording};
use laya_core::viz::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

/// Skewed rank-3 data in `d` dimensions plus faint isotropic noise.
fn rank3(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let latent: Vec<f64> = gaussian_rows(n, 3, seed).iter().map(|v| v.exp()).collect();
    let a = DMatrix::from_row_slice(n, 3, &latent);
    let b = DMatrix::from_row_slice(3, d, &gaussian_rows(3, d, seed + 1));
    let noise = DMatrix::from_row_slice(n, d, &gaussian_rows(n, d, seed + 2)) * 1e-3;
    to_rows(&(a * b + noise))
}

#[test]
fn three_components_explain_rank_three_data() {
    let (n, d) = (400, 12);
    let p = pca(&rank3(n, d, 1), n, d).unwrap();
    let total: f64 = p.eigenvalues.iter().sum();
    let top: f64 = p.eigenvalues[..3].iter().sum();
    assert!(top / total >= 0.99, "explained {}", top / total);
    assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn colors_survive_orthogonal_rotation() {
    let (n, d) = (300, 8);
    let z = rank3(n, d, 4);
    let q = DMatrix::from_row_slice(d, d, &gaussian_rows(d, d, 5)).qr().q();
    let rotated = to_rows(&(DMatrix::from_row_slice(n, d, &z) * q));
    let a = pca_rgb(&z, n, d).unwrap();
    let b = pca_rgb(&rotated, n, d).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for k in 0..3 {
            assert!((x[k] - y[k]).abs() < 1e-6, "{x:?} vs {y:?}");
        }
    }
    assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn shift_score_extremes() {
    let (n, d) = (10_000, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels: Vec<u32> = (0..n).map(|i| (i * 3 / n) as u32).collect();
    let separated: Vec<f64> = labels.iter().flat_map(|&l| vec![l as f64; d]).collect();
    assert!((state_shift_score(&separated, n, d, &labels).unwrap() - 1.0).abs() < 1e-12);

    // structured embeddings scored against shuffled labels
    let structured: Vec<f64> = gaussian_rows(n, d, 7)
        .chunks(d)
        .zip(&labels)
        .flat_map(|(row, &l)| row.iter().map(move |v| v + 2.0 * l as f64).collect::<Vec<_>>())
        .collect();
    assert!(state_shift_score(&structured, n, d, &labels).unwrap() > 0.5);
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut rng);
    assert!(state_shift_score(&structured, n, d, &shuffled).unwrap() < 0.1);

    let random = gaussian_rows(n, d, 8);
    assert!(state_shift_score(&random, n, d, &labels).unwrap() < 0.1);
    assert!(state_shift_score(&random, n, d, &vec![0; n]).is_err());
}

fn recording(seconds: usize) -> Recording {
    let n = 250 * seconds;
    let signal: Vec<f32> = (0..3 * n).map(|i| ((i as f32) * 0.05).sin()).collect();
    Recording {
        signal,
        channels: 3,
        sample_rate: 250.0,
        electrode_coords: standard_coords(3),
        subject_id: "sub-000".into(),
        state_labels: None,
        seizure_spans: None,
    }
}

#[test]
fn timeline_has_configured_size_one_segment_per_patch_and_stable_bytes() {
    let rec = recording(8);
    let n = rec.samples() / 25;
    let colors: Vec<[f64; 3]> = (0..n).map(|i| if i % 2 == 0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] }).collect();
    let style = TimelineStyle {
        width: 640,
        height: 200,
        strip_height: 30,
        max_channels: 3,
    };
    let spans = [(2.0, 3.5)];
    let canvas = render_timeline(&rec, 25, &colors, &spans, &style).unwrap();
    assert_eq!((canvas.width, canvas.height), (640, 200));
    let y = style.height - style.strip_height / 2;
    let runs = 1 + (1..canvas.width).filter(|&x| canvas.pixel(x, y) != canvas.pixel(x - 1, y)).count();
    assert_eq!(runs, n);
    assert_eq!(strip_segments(640, n).len(), n);

    let bytes = canvas.encode_png().unwrap();
    assert_eq!(bytes, render_timeline(&rec, 25, &colors, &spans, &style).unwrap().encode_png().unwrap());
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    assert_eq!((info.width, info.height), (640, 200));

    assert!(render_timeline(&rec, 25, &colors[1..], &spans, &style).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn score_is_a_fraction(seed in any::<u64>(), n in 8usize..200, d in 1usize..6) {
        let z = gaussian_rows(n, d, seed);
        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let s = state_shift_score(&z, n, d, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
