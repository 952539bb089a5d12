//! Shared DSP primitives.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window `w[n] = 0.5 (1 - cos(2 pi n / N))`. Shifted copies at
/// hop `N/2` sum to exactly one.
pub fn periodic_hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Forward/inverse complex FFT pair of one size.
#[derive(Clone)]
pub struct FftPair {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPair").field("len", &self.len).finish()
    }
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward_real(&self, x: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.len);
        for (o, &v) in out.iter_mut().zip(x) {
            *o = Complex64::new(v, 0.0);
        }
        self.forward.process(out);
    }

    /// Unnormalised inverse transform in place.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }

    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.len];
        self.forward_real(x, &mut out);
        out
    }
}

/// Rotates the non-negative-frequency half of a real signal's spectrum by
/// `exp(j 2 pi k shift / L)` and rebuilds the conjugate-symmetric other half.
/// The Nyquist bin keeps the real part of its rotated value. The result is
/// the circular signal advanced by `shift` samples: `y[n] = x(n + shift)`.
pub fn advance_spectrum(spectrum: &[Complex64], shift: f64, fft: &FftPair) -> Vec<f64> {
    let len = spectrum.len();
    let mut buf = vec![Complex64::default(); len];
    buf[0] = spectrum[0];
    let half = len / 2;
    for k in 1..=half {
        let rotated = spectrum[k] * Complex64::from_polar(1.0, 2.0 * PI * k as f64 * shift / len as f64);
        if len % 2 == 0 && k == half {
            buf[k] = Complex64::new(rotated.re, 0.0);
        } else {
            buf[k] = rotated;
            buf[len - k] = rotated.conj();
        }
    }
    fft.inverse(&mut buf);
    let scale = 1.0 / len as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Circular fractional advance of a whole signal.
pub fn fractional_advance(x: &[f64], shift: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let fft = FftPair::new(x.len());
    advance_spectrum(&fft.spectrum(x), shift, &fft)
}

/// Removes the Nyquist component of an even-length real sequence, making
/// every fractional circular shift exactly invertible.
pub fn remove_nyquist(x: &mut [f64]) {
    let len = x.len();
    if len < 2 || len % 2 != 0 {
        return;
    }
    // The Nyquist bin is sum_n x[n] (-1)^n; subtract its projection.
    let nyq: f64 = x.iter().enumerate().map(|(n, v)| if n % 2 == 0 { *v } else { -*v }).sum();
    let c = nyq / len as f64;
    for (n, v) in x.iter_mut().enumerate() {
        *v -= if n % 2 == 0 { c } else { -c };
    }
}

/// Blackman-windowed sinc interpolation of a periodic sequence at a
/// fractional index. `half_width` taps on each side.
pub fn sinc_interpolate_periodic(x: &[f64], pos: f64, half_width: usize) -> f64 {
    let len = x.len() as i64;
    let base = pos.floor();
    let frac = pos - base;
    if frac == 0.0 {
        return x[(base as i64).rem_euclid(len) as usize];
    }
    let hw = half_width as i64;
    let mut acc = 0.0;
    for k in (1 - hw)..=hw {
        let offset = k as f64 - frac;
        let arg = PI * offset;
        let sinc = arg.sin() / arg;
        let r = offset / half_width as f64;
        let win = 0.42 + 0.5 * (PI * r).cos() + 0.08 * (2.0 * PI * r).cos();
        let idx = (base as i64 + k).rem_euclid(len) as usize;
        acc += x[idx] * sinc * win;
    }
    acc
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_is_cola_at_half_hop() {
        let w = periodic_hann(256);
        assert_eq!(w[0], 0.0);
        for n in 0..128 {
            assert!((w[n] + w[n + 128] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn integer_advance_is_rotation() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = fractional_advance(&x, 3.0);
        // Nyquist handling makes integer shifts exact: (-1)^(n+3) rotation is real.
        for n in 0..16 {
            assert!((y[n] - x[(n + 3) % 16]).abs() < 1e-12, "{n}");
        }
    }

    #[test]
    fn advance_round_trip_without_nyquist() {
        let mut x: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        remove_nyquist(&mut x);
        let y = fractional_advance(&fractional_advance(&x, 0.37), -0.37);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinc_interp_hits_samples_and_tracks_tone() {
        let x: Vec<f64> = (0..512).map(|i| (2.0 * PI * 5.0 * i as f64 / 512.0).sin()).collect();
        assert_eq!(sinc_interpolate_periodic(&x, 7.0, 32), x[7]);
        let v = sinc_interpolate_periodic(&x, 7.3, 32);
        let want = (2.0 * PI * 5.0 * 7.3 / 512.0).sin();
        assert!((v - want).abs() < 1e-4, "{v} vs {want}");
    }
}
