//! Filter-space error metrics, spectral coherence and the two-window
//! consistency protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{FirFilter, Signal};
use crate::spectral::{welch_cross, welch_segment_len, DEFAULT_WELCH_SEGMENTS};

/// Band edges (Hz) separating the low, mid and high coherence bands.
pub const LOW_BAND_EDGE_HZ: f64 = 10.0;
pub const HIGH_BAND_EDGE_HZ: f64 = 100.0;

fn same_len(a: &FirFilter, b: &FirFilter) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Mean squared tap difference.
pub fn filter_mse(a: &FirFilter, b: &FirFilter) -> Result<f64> {
    same_len(a, b)?;
    let s: f64 = a
        .taps()
        .iter()
        .zip(b.taps())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Pearson correlation with population moments.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let (ma, sa) = crate::signal::mean_std(a);
    let (mb, sb) = crate::signal::mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

pub fn filter_pcc(a: &FirFilter, b: &FirFilter) -> Result<f64> {
    same_len(a, b)?;
    pearson(a.taps(), b.taps())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMeans {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub frequencies_hz: Vec<f64>,
    pub msc: Vec<f64>,
    pub band_means: BandMeans,
}

/// Which band a frequency belongs to: low `< 10`, mid `[10, 100]`, high `> 100`.
pub fn band_of(freq_hz: f64) -> usize {
    if freq_hz < LOW_BAND_EDGE_HZ {
        0
    } else if freq_hz <= HIGH_BAND_EDGE_HZ {
        1
    } else {
        2
    }
}

/// Magnitude-squared coherence from Welch spectra with `n_segments`
/// half-overlapping Hann segments. Bins where either side has no power
/// report zero coherence.
pub fn coherence(x: &Signal, y: &Signal, n_segments: usize) -> Result<CoherenceReport> {
    if x.sample_rate_hz() != y.sample_rate_hz() {
        return Err(Error::SampleRateMismatch(
            x.sample_rate_hz(),
            y.sample_rate_hz(),
        ));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let nperseg = welch_segment_len(x.len(), n_segments.max(1));
    if x.len() < 4 * nperseg || nperseg < 8 {
        return Err(Error::TooShort {
            needed: 4 * nperseg.max(8),
            got: x.len(),
        });
    }
    let s = welch_cross(x.samples(), y.samples(), x.sample_rate_hz(), nperseg)?;
    let scale = s.sxx.iter().chain(&s.syy).cloned().fold(0.0, f64::max);
    let tiny = 1e-20 * scale;
    let msc: Vec<f64> = (0..s.sxx.len())
        .map(|k| {
            let d = s.sxx[k] * s.syy[k];
            if s.sxx[k] <= tiny || s.syy[k] <= tiny {
                0.0
            } else {
                (s.sxy[k].norm_sqr() / d).clamp(0.0, 1.0)
            }
        })
        .collect();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (f, m) in s.frequencies_hz.iter().zip(&msc) {
        let b = band_of(*f);
        sums[b] += m;
        counts[b] += 1;
    }
    let avg = |b: usize| {
        if counts[b] == 0 {
            f64::NAN
        } else {
            sums[b] / counts[b] as f64
        }
    };
    Ok(CoherenceReport {
        frequencies_hz: s.frequencies_hz,
        msc,
        band_means: BandMeans {
            low: avg(0),
            mid: avg(1),
            high: avg(2),
        },
    })
}

/// Coherence between `conv(ecg, h_ref)` and `conv(ecg, h_est)` with the
/// default segment count.
pub fn filter_coherence(ecg: &Signal, h_ref: &FirFilter, h_est: &FirFilter) -> Result<CoherenceReport> {
    let a = crate::signal::causal_convolve(ecg.samples(), h_ref.taps());
    let b = crate::signal::causal_convolve(ecg.samples(), h_est.taps());
    coherence(
        &Signal::new(a, ecg.sample_rate_hz())?,
        &Signal::new(b, ecg.sample_rate_hz())?,
        DEFAULT_WELCH_SEGMENTS,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub ref_mse: f64,
    pub ref_pcc: f64,
    pub mutual_mse: f64,
    pub mutual_pcc: f64,
}

pub fn consistency_eval(
    h_ref: &FirFilter,
    h_a: &FirFilter,
    h_b: &FirFilter,
) -> Result<ConsistencyReport> {
    same_len(h_ref, h_a)?;
    same_len(h_ref, h_b)?;
    Ok(ConsistencyReport {
        ref_mse: 0.5 * (filter_mse(h_a, h_ref)? + filter_mse(h_b, h_ref)?),
        ref_pcc: 0.5 * (filter_pcc(h_a, h_ref)? + filter_pcc(h_b, h_ref)?),
        mutual_mse: filter_mse(h_a, h_b)?,
        mutual_pcc: filter_pcc(h_a, h_b)?,
    })
}
