//! FFT helpers and Welch spectral estimates shared by the estimators and
//! the evaluation metrics.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Welch averaging segments when none is given.
pub const DEFAULT_WELCH_SEGMENTS: usize = 8;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::<f64>::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    buf
}

/// Inverse FFT including the `1/n` factor; returns the real part.
pub fn ifft_real(spectrum: &[Complex64]) -> Vec<f64> {
    let mut buf = spectrum.to_vec();
    FftPlanner::<f64>::new()
        .plan_fft_inverse(buf.len())
        .process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Hann-windowed full-length spectrum, scaled so that `|X_k|^2` averages
/// to the mean-square of the input.
pub fn windowed_spectrum(x: &[f64]) -> Vec<Complex64> {
    let w = hann(x.len());
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xw: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b / norm).collect();
    fft_real(&xw)
}

/// Frequency in Hz of full-FFT bin `k` (folded, always non-negative).
pub fn bin_frequency(k: usize, n: usize, sample_rate_hz: f64) -> f64 {
    let k = if k <= n / 2 { k } else { n - k };
    k as f64 * sample_rate_hz / n as f64
}

/// One-sided power spectral density on a uniform frequency grid (Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub frequencies_hz: Vec<f64>,
    pub density: Vec<f64>,
}

impl Psd {
    /// Linear interpolation at `freq_hz`, clamped to the grid ends.
    pub fn at(&self, freq_hz: f64) -> f64 {
        let f = &self.frequencies_hz;
        if f.is_empty() {
            return 0.0;
        }
        if freq_hz <= f[0] {
            return self.density[0];
        }
        let last = f.len() - 1;
        if freq_hz >= f[last] {
            return self.density[last];
        }
        let df = f[1] - f[0];
        let pos = (freq_hz - f[0]) / df;
        let i = (pos.floor() as usize).min(last - 1);
        let frac = pos - i as f64;
        self.density[i] * (1.0 - frac) + self.density[i + 1] * frac
    }

    /// Median density over bins with frequency strictly above `freq_hz`.
    pub fn median_above(&self, freq_hz: f64) -> Option<f64> {
        let mut v: Vec<f64> = self
            .frequencies_hz
            .iter()
            .zip(&self.density)
            .filter(|(f, _)| **f > freq_hz)
            .map(|(_, d)| *d)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        })
    }
}

/// Segment length giving `n_segments` Hann segments at 50% overlap.
pub fn welch_segment_len(n: usize, n_segments: usize) -> usize {
    (2 * n / (n_segments + 1)).max(1)
}

/// Welch cross and auto spectra of two equal-length sequences.
#[derive(Debug, Clone)]
pub struct WelchSpectra {
    pub frequencies_hz: Vec<f64>,
    pub sxx: Vec<f64>,
    pub syy: Vec<f64>,
    pub sxy: Vec<Complex64>,
    pub segments: usize,
}

/// Averaged one-sided Welch spectra, Hann window, 50% overlap,
/// density scaling. Segments are not detrended.
pub fn welch_cross(
    x: &[f64],
    y: &[f64],
    sample_rate_hz: f64,
    nperseg: usize,
) -> Result<WelchSpectra> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if nperseg < 2 || nperseg > x.len() {
        return Err(Error::TooShort {
            needed: nperseg.max(2),
            got: x.len(),
        });
    }
    let step = (nperseg / 2).max(1);
    let w = hann(nperseg);
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let n_bins = nperseg / 2 + 1;
    let mut sxx = vec![0.0; n_bins];
    let mut syy = vec![0.0; n_bins];
    let mut sxy = vec![Complex64::default(); n_bins];
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nperseg);
    let mut segments = 0;
    let mut start = 0;
    let mut bx = vec![Complex64::default(); nperseg];
    let mut by = vec![Complex64::default(); nperseg];
    while start + nperseg <= x.len() {
        for i in 0..nperseg {
            bx[i] = Complex64::new(x[start + i] * w[i], 0.0);
            by[i] = Complex64::new(y[start + i] * w[i], 0.0);
        }
        fft.process(&mut bx);
        fft.process(&mut by);
        for k in 0..n_bins {
            sxx[k] += bx[k].norm_sqr();
            syy[k] += by[k].norm_sqr();
            sxy[k] += bx[k].conj() * by[k];
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (sample_rate_hz * wss * segments as f64);
    for k in 0..n_bins {
        // One-sided: double everything but DC and (even-length) Nyquist.
        let one_sided = if k == 0 || (nperseg % 2 == 0 && k == n_bins - 1) {
            1.0
        } else {
            2.0
        };
        sxx[k] *= scale * one_sided;
        syy[k] *= scale * one_sided;
        sxy[k] *= scale * one_sided;
    }
    let frequencies_hz = (0..n_bins)
        .map(|k| k as f64 * sample_rate_hz / nperseg as f64)
        .collect();
    Ok(WelchSpectra {
        frequencies_hz,
        sxx,
        syy,
        sxy,
        segments,
    })
}

/// Welch PSD with `n_segments` half-overlapping Hann segments.
pub fn welch_psd(x: &[f64], sample_rate_hz: f64, n_segments: usize) -> Result<Psd> {
    let nperseg = welch_segment_len(x.len(), n_segments);
    let s = welch_cross(x, x, sample_rate_hz, nperseg)?;
    Ok(Psd {
        frequencies_hz: s.frequencies_hz,
        density: s.sxx,
    })
}
