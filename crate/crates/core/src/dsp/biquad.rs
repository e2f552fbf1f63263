//! Second-order IIR sections (RBJ cookbook designs) and zero-phase
//! forward-backward filtering.

use std::f64::consts::PI;

/// Q factors of the two sections of a 4th-order Butterworth response.
pub const BUTTERWORTH4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_7];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn normalized(b0: f64, b1: f64, b2: f64, a0: f64, a1: f64, a2: f64) -> Self {
        Biquad {
            b0: b0 / a0,
            b1: b1 / a0,
            b2: b2 / a0,
            a1: a1 / a0,
            a2: a2 / a0,
        }
    }

    pub fn lowpass(cutoff: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / fs;
        let (cw, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(
            (1.0 - cw) / 2.0,
            1.0 - cw,
            (1.0 - cw) / 2.0,
            1.0 + alpha,
            -2.0 * cw,
            1.0 - alpha,
        )
    }

    pub fn highpass(cutoff: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / fs;
        let (cw, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(
            (1.0 + cw) / 2.0,
            -(1.0 + cw),
            (1.0 + cw) / 2.0,
            1.0 + alpha,
            -2.0 * cw,
            1.0 - alpha,
        )
    }

    pub fn notch(center: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * center / fs;
        let (cw, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(1.0, -2.0 * cw, 1.0, 1.0 + alpha, -2.0 * cw, 1.0 - alpha)
    }

    /// Direct form II transposed, in place, zero initial state.
    pub fn apply(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b0 * input + z1;
            z1 = self.b1 * input - self.a1 * out + z2;
            z2 = self.b2 * input - self.a2 * out;
            *v = out;
        }
    }

    /// Magnitude response at `freq`.
    pub fn gain(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b0 + self.b1 * c1 + self.b2 * c2;
        let ni = -(self.b1 * s1 + self.b2 * s2);
        let dr = 1.0 + self.a1 * c1 + self.a2 * c2;
        let di = -(self.a1 * s1 + self.a2 * s2);
        ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
    }
}

/// Zero-phase filtering: the cascade is run forward and then backward
/// over a mirror-padded copy of `x`. Mirroring keeps the local level of
/// the padding equal to the signal's, so the high-pass sees no step.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = pad.min(n - 1);
    let mut buf = Vec::with_capacity(n + 2 * pad);
    buf.extend(x[1..=pad].iter().rev());
    buf.extend_from_slice(x);
    buf.extend(x[n - 1 - pad..n - 1].iter().rev());
    for s in sections {
        s.apply(&mut buf);
    }
    buf.reverse();
    for s in sections {
        s.apply(&mut buf);
    }
    buf.reverse();
    buf[pad..pad + n].to_vec()
}
