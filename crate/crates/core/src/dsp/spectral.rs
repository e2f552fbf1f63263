//! FFT helpers: band-limited noise synthesis, spectral shaping and
//! Fourier resampling.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn forward(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

fn inverse_real(mut spec: Vec<Complex64>) -> Vec<f64> {
    let n = spec.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|c| c.re / n as f64).collect()
}

/// Filters `x` by a real, even gain function of frequency (Hz).
pub fn shape_spectrum(x: &[f64], fs: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut spec = forward(x);
    for (k, c) in spec.iter_mut().enumerate() {
        let bin = if k <= n / 2 { k } else { n - k };
        *c *= gain(bin as f64 * fs / n as f64);
    }
    inverse_real(spec)
}

/// Gaussian noise restricted to `[lo, hi]` Hz, normalized to unit
/// variance.
pub fn band_limited_noise<R: Rng>(rng: &mut R, n: usize, fs: f64, lo: f64, hi: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let band = shape_spectrum(&white, fs, |f| if f >= lo && f <= hi { 1.0 } else { 0.0 });
    normalize_unit_power(band)
}

pub fn normalize_unit_power(mut x: Vec<f64>) -> Vec<f64> {
    let p = mean_power(&x);
    if p > 0.0 {
        let s = 1.0 / p.sqrt();
        x.iter_mut().for_each(|v| *v *= s);
    }
    x
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Band-limited (Fourier) resampling of `x` to `n_out` samples.
pub fn fft_resample(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len();
    if n == n_out || n == 0 {
        return x.to_vec();
    }
    let spec = forward(x);
    let mut out = vec![Complex64::new(0.0, 0.0); n_out];
    let keep = n.min(n_out);
    let half = keep / 2;
    for k in 0..half {
        out[k] = spec[k];
        if k > 0 {
            out[n_out - k] = spec[n - k];
        }
    }
    if keep % 2 == 0 {
        // split the shared Nyquist bin
        let nyq = if n < n_out {
            spec[half] * 0.5
        } else {
            (spec[half] + spec[n - half]) * 0.5
        };
        if n < n_out {
            out[half] = nyq;
            out[n_out - half] = nyq;
        } else {
            out[half] = Complex64::new(nyq.re, 0.0);
        }
    } else {
        out[half] = spec[half];
        out[n_out - half] = spec[n - half];
    }
    let scale = n_out as f64 / n as f64;
    inverse_real(out).into_iter().map(|v| v * scale).collect()
}

/// Fourier resampling of the mirror-extended signal, which avoids the
/// wrap-around discontinuity of treating `x` as periodic.
pub fn resample_mirrored(x: &[f64], n_out: usize) -> Vec<f64> {
    if x.len() == n_out || x.is_empty() {
        return x.to_vec();
    }
    let mut ext = x.to_vec();
    ext.extend(x.iter().rev());
    let mut out = fft_resample(&ext, 2 * n_out);
    out.truncate(n_out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resample_preserves_low_frequency_sine() {
        let fs_in = 256.0;
        let n = 2560;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs_in).sin())
            .collect();
        let y = fft_resample(&x, 2500);
        for (i, &v) in y.iter().enumerate() {
            let expect = (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 250.0).sin();
            assert!((v - expect).abs() < 1e-9, "sample {i}: {v} vs {expect}");
        }
    }

    #[test]
    fn band_noise_has_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = band_limited_noise(&mut rng, 1000, 250.0, 8.0, 12.0);
        assert!((mean_power(&x) - 1.0).abs() < 1e-12);
    }
}
