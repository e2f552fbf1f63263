//! Contiguous temporal block masks over the patch sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LayaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
    pub block_min: usize,
    pub block_max: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio: 0.6,
            block_min: 5,
            block_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub n: usize,
    /// Sorted masked patch indices.
    pub masked: Vec<usize>,
    /// Maximal masked runs as `(start, len)`.
    pub blocks: Vec<(usize, usize)>,
}

impl MaskSpec {
    /// Builds a spec from an index set; runs are recomputed.
    pub fn from_indices(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&i| i >= n) {
            return Err(LayaError::InvalidArgument(format!("mask index out of range for N={n}")));
        }
        let blocks = runs(&masked);
        Ok(MaskSpec { n, masked, blocks })
    }

    pub fn empty(n: usize) -> Self {
        MaskSpec {
            n,
            masked: Vec::new(),
            blocks: Vec::new(),
        }
    }

    /// Unmasked indices in order.
    pub fn context(&self) -> Vec<usize> {
        let mut is_masked = vec![false; self.n];
        for &i in &self.masked {
            is_masked[i] = true;
        }
        (0..self.n).filter(|&i| !is_masked[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

fn runs(sorted: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &i in sorted {
        match out.last_mut() {
            Some((s, l)) if *s + *l == i => *l += 1,
            _ => out.push((i, 1)),
        }
    }
    out
}

/// Draws blocks with uniform length in `[block_min, block_max]` and
/// uniform start until at least `ceil(ratio * n)` patches are covered.
/// Overlapping blocks merge, so runs may exceed `block_max`.
pub fn sample_mask(n: usize, config: &MaskConfig, seed: u64) -> Result<MaskSpec> {
    let MaskConfig {
        ratio,
        block_min,
        block_max,
    } = *config;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(LayaError::config("mask.ratio", "must lie in (0, 1)"));
    }
    if block_min == 0 || block_min > block_max {
        return Err(LayaError::config("mask.block_min", "need 1 <= block_min <= block_max"));
    }
    if n < block_max {
        return Err(LayaError::config(
            "mask.block_max",
            format!("sequence of {n} patches is shorter than block_max {block_max}"),
        ));
    }
    let target = (ratio * n as f64).ceil() as usize;
    // the last block may overshoot by up to block_max - 1
    if target + block_max - 1 >= n {
        return Err(LayaError::config(
            "mask.ratio",
            format!("ratio {ratio} with blocks up to {block_max} can cover all {n} patches"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut covered = vec![false; n];
    let mut count = 0;
    while count < target {
        let len = rng.random_range(block_min..=block_max);
        let start = rng.random_range(0..=n - len);
        for c in &mut covered[start..start + len] {
            if !*c {
                *c = true;
                count += 1;
            }
        }
    }
    let masked: Vec<usize> = (0..n).filter(|&i| covered[i]).collect();
    let blocks = runs(&masked);
    Ok(MaskSpec { n, masked, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_bounds_at_160() {
        for seed in 0..500 {
            let m = sample_mask(160, &MaskConfig::default(), seed).unwrap();
            assert!((96..=105).contains(&m.len()), "{}", m.len());
            assert!(m.blocks.iter().all(|&(_, l)| l >= 5));
            let total: usize = m.blocks.iter().map(|b| b.1).sum();
            assert_eq!(total, m.len());
            assert_eq!(m.context().len(), 160 - m.len());
        }
    }

    #[test]
    fn deterministic() {
        let c = MaskConfig::default();
        assert_eq!(sample_mask(160, &c, 4).unwrap(), sample_mask(160, &c, 4).unwrap());
    }

    #[test]
    fn rejects_unsatisfiable() {
        let c = MaskConfig {
            ratio: 0.99,
            ..MaskConfig::default()
        };
        assert!(sample_mask(160, &c, 0).is_err());
        assert!(sample_mask(8, &MaskConfig::default(), 0).is_err());
    }

    #[test]
    fn from_indices_builds_runs() {
        let m = MaskSpec::from_indices(10, vec![7, 2, 3, 8, 9]).unwrap();
        assert_eq!(m.blocks, vec![(2, 2), (7, 3)]);
        assert_eq!(m.context(), vec![0, 1, 4, 5, 6]);
    }
}
