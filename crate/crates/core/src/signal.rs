//! Sampled signals, FIR filters and the basic operations on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of taps of the coupling filter unless overridden.
pub const DEFAULT_TAPS: usize = 64;

/// A uniformly sampled, real-valued waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate_hz: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        check_rate(sample_rate_hz)?;
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn nyquist_hz(&self) -> f64 {
        0.5 * self.sample_rate_hz
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    /// Samples `[start, start + len)` as a new signal at the same rate.
    pub fn slice(&self, start: usize, len: usize) -> Result<Signal> {
        if start + len > self.len() {
            return Err(Error::TooShort {
                needed: start + len,
                got: self.len(),
            });
        }
        Signal::new(self.samples[start..start + len].to_vec(), self.sample_rate_hz)
    }

    /// Builds a signal with the same rate, skipping validation of the rate.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Result<Signal> {
        Signal::new(samples, self.sample_rate_hz)
    }
}

/// Finite impulse response filter; the coupling signal lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    coefficients: Vec<f64>,
    sample_rate_hz: f64,
}

impl FirFilter {
    pub fn new(coefficients: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidParameter("filter needs at least one tap".into()));
        }
        check_rate(sample_rate_hz)?;
        if let Some(i) = coefficients.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            coefficients,
            sample_rate_hz,
        })
    }

    /// Unit impulse `[1, 0, ..., 0]`.
    pub fn delta(n_taps: usize, sample_rate_hz: f64) -> Result<Self> {
        let mut taps = vec![0.0; n_taps.max(1)];
        taps[0] = 1.0;
        Self::new(taps, sample_rate_hz)
    }

    pub fn zeros(n_taps: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(vec![0.0; n_taps.max(1)], sample_rate_hz)
    }

    pub fn taps(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn into_taps(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn energy(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.energy().sqrt()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "sample rate must be positive, got {rate}"
        )))
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    (m, var.sqrt())
}

/// Standardizes to zero mean and unit (population) standard deviation.
pub fn z_score(signal: &Signal) -> Result<Signal> {
    let x = signal.samples();
    if x.len() < 2 {
        return Err(Error::ZeroVariance);
    }
    let (m, sd) = mean_std(x);
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if sd <= 1e-14 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
        return Err(Error::ZeroVariance);
    }
    signal.with_samples(x.iter().map(|v| (v - m) / sd).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Output has the input length; the filter is causal with zero history.
    Same,
    /// Output has length `len(x) + len(h) - 1`.
    Full,
}

/// Direct-form linear convolution, `y[n] = sum_k h[k] x[n-k]`, full length.
pub fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        for (yn, &xn) in y[k..k + x.len()].iter_mut().zip(x) {
            *yn += hk * xn;
        }
    }
    y
}

/// Same result as [`convolve_direct`], computed with zero-padded FFTs.
pub fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let mut xa: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    xa.resize(n, Complex64::default());
    let mut ha: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    ha.resize(n, Complex64::default());
    fwd.process(&mut xa);
    fwd.process(&mut ha);
    for (a, b) in xa.iter_mut().zip(&ha) {
        *a *= b;
    }
    inv.process(&mut xa);
    let scale = 1.0 / n as f64;
    xa[..out_len].iter().map(|c| c.re * scale).collect()
}

// Direct form skips zero taps, so sparse filters stay exact and cheap.
fn prefer_fft(x_len: usize, h: &[f64]) -> bool {
    let nnz = h.iter().filter(|v| **v != 0.0).count();
    nnz > 32 && x_len.saturating_mul(nnz) > 1 << 16
}

/// Causal convolution truncated to the input length.
pub fn causal_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = if prefer_fft(x.len(), h) {
        convolve_fft(x, h)
    } else {
        convolve_direct(x, h)
    };
    y.truncate(x.len());
    y
}

pub fn convolve(signal: &Signal, filter: &FirFilter, mode: ConvMode) -> Result<Signal> {
    if signal.sample_rate_hz() != filter.sample_rate_hz() {
        return Err(Error::SampleRateMismatch(
            signal.sample_rate_hz(),
            filter.sample_rate_hz(),
        ));
    }
    let y = match mode {
        ConvMode::Same => causal_convolve(signal.samples(), filter.taps()),
        ConvMode::Full => {
            if prefer_fft(signal.len(), filter.taps()) {
                convolve_fft(signal.samples(), filter.taps())
            } else {
                convolve_direct(signal.samples(), filter.taps())
            }
        }
    };
    signal.with_samples(y)
}

/// Splits into fixed-length windows.
///
/// Signals shorter than one window are cyclically padded to exactly one
/// window. Longer signals yield `floor((len - window) / stride) + 1` windows.
pub fn segment(signal: &Signal, window_s: f64, stride_s: f64) -> Result<Vec<Signal>> {
    if !(window_s > 0.0) || !(stride_s > 0.0) {
        return Err(Error::InvalidParameter(
            "window and stride must be positive".into(),
        ));
    }
    let fs = signal.sample_rate_hz();
    let window = ((window_s * fs).round() as usize).max(1);
    let stride = ((stride_s * fs).round() as usize).max(1);
    let x = signal.samples();
    if x.len() < window {
        let padded: Vec<f64> = x.iter().copied().cycle().take(window).collect();
        return Ok(vec![signal.with_samples(padded)?]);
    }
    let count = (x.len() - window) / stride + 1;
    (0..count)
        .map(|i| signal.with_samples(x[i * stride..i * stride + window].to_vec()))
        .collect()
}

/// Adds `noise` scaled so that `10 log10(P_clean / P_scaled_noise) = snr_db`.
///
/// The noise is read circularly from a seed-chosen offset, so clips shorter
/// than the clean signal are tiled.
pub fn mix_at_snr(clean: &Signal, noise: &Signal, snr_db: f64, seed: u64) -> Result<Signal> {
    let scaled = scaled_noise(clean, noise, snr_db, seed)?;
    clean.with_samples(
        clean
            .samples()
            .iter()
            .zip(&scaled)
            .map(|(c, n)| c + n)
            .collect(),
    )
}

/// The noise component that [`mix_at_snr`] adds to `clean`.
pub fn scaled_noise(clean: &Signal, noise: &Signal, snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if clean.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(Error::SampleRateMismatch(
            clean.sample_rate_hz(),
            noise.sample_rate_hz(),
        ));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter("snr_db must be finite".into()));
    }
    let n = clean.len();
    let src = noise.samples();
    let offset = ChaCha8Rng::seed_from_u64(seed).gen_range(0..src.len());
    let tiled: Vec<f64> = (0..n).map(|i| src[(offset + i) % src.len()]).collect();
    let p_noise = mean_square(&tiled);
    if p_noise == 0.0 {
        return Err(Error::SilentNoise);
    }
    let gain = (clean.power() / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(tiled.into_iter().map(|v| gain * v).collect())
}

/// Signal-to-noise ratio in dB of two components.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (mean_square(clean) / mean_square(noise)).log10()
}

/// Band-limited resampling by Hann-windowed sinc interpolation.
pub fn resample(signal: &Signal, target_rate_hz: f64) -> Result<Signal> {
    check_rate(target_rate_hz)?;
    let fs = signal.sample_rate_hz();
    if (target_rate_hz - fs).abs() < 1e-12 * fs {
        return Ok(signal.clone());
    }
    const HALF_ZEROS: f64 = 16.0;
    let x = signal.samples();
    let ratio = target_rate_hz / fs;
    // Cutoff relative to the input rate; below the lower of the two Nyquists.
    let cutoff = ratio.min(1.0);
    let half_width = HALF_ZEROS / cutoff;
    let out_len = ((x.len() as f64) * ratio).round().max(1.0) as usize;
    let out: Vec<f64> = (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            (lo..=hi)
                .map(|n| {
                    let d = t - n as f64;
                    let w = 0.5 + 0.5 * (std::f64::consts::PI * d / half_width).cos();
                    x[n] * cutoff * sinc(cutoff * d) * w
                })
                .sum()
        })
        .collect();
    Signal::new(out, target_rate_hz)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}
