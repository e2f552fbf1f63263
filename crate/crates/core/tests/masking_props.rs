use laya_core::masking::{sample_mask, MaskConfig};
use proptest::prelude::*;

fn config(ratio: f64, block_min: usize, block_max: usize) -> MaskConfig {
    MaskConfig {
        ratio,
        block_min,
        block_max,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masks_respect_coverage_and_run_lengths(
        n in 20usize..400,
        ratio in 0.1f64..0.8,
        block_min in 1usize..6,
        extra in 0usize..6,
        seed in any::<u64>(),
    ) {
        let cfg = config(ratio, block_min, block_min + extra);
        let Ok(m) = sample_mask(n, &cfg, seed) else {
            // rejection must only happen when a full cover is possible
            prop_assert!((ratio * n as f64).ceil() as usize + cfg.block_max > n);
            return Ok(());
        };
        let frac = m.len() as f64 / n as f64;
        prop_assert!(frac >= ratio - 1e-12);
        prop_assert!(frac <= ratio + cfg.block_max as f64 / n as f64 + 1e-12);
        prop_assert!(m.len() < n);
        prop_assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
        let mut union = Vec::new();
        for (i, &(s, l)) in m.blocks.iter().enumerate() {
            prop_assert!(l >= cfg.block_min);
            if i > 0 {
                let (ps, pl) = m.blocks[i - 1];
                prop_assert!(ps + pl < s, "runs touch or overlap");
            }
            union.extend(s..s + l);
        }
        prop_assert_eq!(&union, &m.masked);
        prop_assert_eq!(m, sample_mask(n, &cfg, seed).unwrap());
    }
}

#[test]
fn interior_masking_probability_is_flat() {
    let n = 160;
    let mut hits = vec![0usize; n];
    let draws = 10_000;
    for seed in 0..draws {
        for i in sample_mask(n, &MaskConfig::default(), seed).unwrap().masked {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate().take(n - 10).skip(10) {
        let p = h as f64 / draws as f64;
        assert!((p - 0.6).abs() <= 0.12, "index {i} masked with probability {p}");
    }
}

#[test]
fn unsatisfiable_ratios_are_rejected() {
    assert!(sample_mask(10, &config(0.95, 1, 1), 0).is_err());
    assert!(sample_mask(4, &MaskConfig::default(), 0).is_err());
    assert!(sample_mask(50, &config(1.0, 5, 10), 0).is_err());
    assert!(sample_mask(50, &config(0.5, 6, 5), 0).is_err());
}
