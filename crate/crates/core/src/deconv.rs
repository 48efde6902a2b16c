//! Deconvolution baselines: spectral division (plain, Tikhonov, Wiener) and
//! L1-regularized least squares by iterative shrinkage.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{FirFilter, Signal, DEFAULT_TAPS};
use crate::spectral::{
    bin_frequency, ifft_real, welch_psd, windowed_spectrum, Psd, DEFAULT_WELCH_SEGMENTS,
};

/// Bins whose excitation magnitude falls below this fraction of the peak
/// are divided by the floor instead.
pub const SPECTRAL_FLOOR: f64 = 1e-12;

/// Lower edge of the band used to estimate the noise floor for Wiener.
pub const NOISE_BAND_HZ: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeconvMethod {
    Naive,
    Tikhonov,
    Wiener,
    #[serde(alias = "sparsity")]
    Sparse,
}

impl DeconvMethod {
    pub const ALL: [DeconvMethod; 4] = [
        DeconvMethod::Naive,
        DeconvMethod::Tikhonov,
        DeconvMethod::Wiener,
        DeconvMethod::Sparse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DeconvMethod::Naive => "naive",
            DeconvMethod::Tikhonov => "tikhonov",
            DeconvMethod::Wiener => "wiener",
            DeconvMethod::Sparse => "sparse",
        }
    }
}

impl std::str::FromStr for DeconvMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(DeconvMethod::Naive),
            "tikhonov" => Ok(DeconvMethod::Tikhonov),
            "wiener" => Ok(DeconvMethod::Wiener),
            "sparse" | "sparsity" => Ok(DeconvMethod::Sparse),
            _ => Err(Error::InvalidParameter(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeconvConfig {
    pub method: DeconvMethod,
    pub lambda: f64,
    pub gamma: f64,
    /// Noise PSD for Wiener; estimated from the PCG when absent.
    pub noise_psd: Option<Psd>,
    pub n_taps: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        DeconvConfig {
            method: DeconvMethod::Naive,
            lambda: 0.01,
            gamma: 0.1,
            noise_psd: None,
            n_taps: DEFAULT_TAPS,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

impl DeconvConfig {
    pub fn with_method(method: DeconvMethod) -> Self {
        DeconvConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_taps == 0 {
            return Err(Error::InvalidParameter("n_taps must be >= 1".into()));
        }
        match self.method {
            DeconvMethod::Tikhonov if !(self.lambda > 0.0) => Err(Error::InvalidParameter(
                format!("lambda must be > 0, got {}", self.lambda),
            )),
            DeconvMethod::Sparse if !(self.gamma >= 0.0) => Err(Error::InvalidParameter(
                format!("gamma must be >= 0, got {}", self.gamma),
            )),
            _ => Ok(()),
        }
    }
}

fn check_pair(ecg: &Signal, pcg: &Signal, n_taps: usize) -> Result<()> {
    if ecg.sample_rate_hz() != pcg.sample_rate_hz() {
        return Err(Error::SampleRateMismatch(
            ecg.sample_rate_hz(),
            pcg.sample_rate_hz(),
        ));
    }
    if ecg.len() != pcg.len() {
        return Err(Error::LengthMismatch(ecg.len(), pcg.len()));
    }
    if ecg.len() < n_taps {
        return Err(Error::TooShort {
            needed: n_taps,
            got: ecg.len(),
        });
    }
    Ok(())
}

struct Spectra {
    x: Vec<Complex64>,
    y: Vec<Complex64>,
}

fn spectra(ecg: &Signal, pcg: &Signal, n_taps: usize) -> Result<Spectra> {
    check_pair(ecg, pcg, n_taps)?;
    let x = windowed_spectrum(ecg.samples());
    if x.iter().all(|c| c.norm() == 0.0) {
        return Err(Error::DegenerateExcitation);
    }
    Ok(Spectra {
        x,
        y: windowed_spectrum(pcg.samples()),
    })
}

fn truncate(h_spec: &[Complex64], n_taps: usize, fs: f64) -> Result<FirFilter> {
    let mut h = ifft_real(h_spec);
    h.truncate(n_taps);
    FirFilter::new(h, fs)
}

/// `H = conj(X) Y / (|X|^2 + reg(k))` on the full-length grid.
fn regularized_division(
    s: &Spectra,
    n_taps: usize,
    fs: f64,
    reg: impl Fn(usize) -> f64,
) -> Result<FirFilter> {
    let h: Vec<Complex64> = s
        .x
        .iter()
        .zip(&s.y)
        .enumerate()
        .map(|(k, (x, y))| x.conj() * y / (x.norm_sqr() + reg(k)))
        .collect();
    truncate(&h, n_taps, fs)
}

/// Plain spectral division `H = Y / X` with a floor guard on `|X|`.
pub fn deconv_naive(ecg: &Signal, pcg: &Signal, cfg: &DeconvConfig) -> Result<FirFilter> {
    let s = spectra(ecg, pcg, cfg.n_taps)?;
    let peak = s.x.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let floor = SPECTRAL_FLOOR * peak;
    let h: Vec<Complex64> = s
        .x
        .iter()
        .zip(&s.y)
        .map(|(x, y)| {
            let mag = x.norm();
            let d = if mag >= floor {
                *x
            } else if mag > 0.0 {
                x * (floor / mag)
            } else {
                Complex64::new(floor, 0.0)
            };
            y / d
        })
        .collect();
    truncate(&h, cfg.n_taps, ecg.sample_rate_hz())
}

pub fn deconv_tikhonov(ecg: &Signal, pcg: &Signal, cfg: &DeconvConfig) -> Result<FirFilter> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be > 0, got {}",
            cfg.lambda
        )));
    }
    let s = spectra(ecg, pcg, cfg.n_taps)?;
    regularized_division(&s, cfg.n_taps, ecg.sample_rate_hz(), |_| cfg.lambda)
}

/// Default Wiener noise model: a flat floor at the median PCG density above
/// [`NOISE_BAND_HZ`] (above three quarters of Nyquist for low sample rates).
pub fn estimate_noise_psd(pcg: &Signal) -> Result<Psd> {
    let psd = welch_psd(pcg.samples(), pcg.sample_rate_hz(), DEFAULT_WELCH_SEGMENTS)?;
    let edge = NOISE_BAND_HZ.min(0.75 * pcg.nyquist_hz());
    let level = psd.median_above(edge).unwrap_or(0.0);
    Ok(Psd {
        density: vec![level; psd.frequencies_hz.len()],
        frequencies_hz: psd.frequencies_hz,
    })
}

/// `H = conj(X) Y / (|X|^2 + N/S)` with `S = max(P_pcg - N, 0.1 P_pcg)`.
pub fn deconv_wiener(ecg: &Signal, pcg: &Signal, cfg: &DeconvConfig) -> Result<FirFilter> {
    let s = spectra(ecg, pcg, cfg.n_taps)?;
    let fs = ecg.sample_rate_hz();
    let n = ecg.len();
    let p_pcg = welch_psd(pcg.samples(), fs, DEFAULT_WELCH_SEGMENTS)?;
    let noise = match &cfg.noise_psd {
        Some(p) => p.clone(),
        None => estimate_noise_psd(pcg)?,
    };
    let ratio: Vec<f64> = (0..n)
        .map(|k| {
            let f = bin_frequency(k, n, fs);
            let nk = noise.at(f).max(0.0);
            let py = p_pcg.at(f);
            let sk = (py - nk).max(0.1 * py);
            if nk == 0.0 {
                0.0
            } else if sk > 0.0 {
                nk / sk
            } else {
                f64::MAX
            }
        })
        .collect();
    regularized_division(&s, cfg.n_taps, fs, |k| ratio[k])
}

/// Result of the iterative shrinkage solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFit {
    pub filter: FirFilter,
    pub iterations: usize,
    /// False when `max_iter` was reached with relative change above `100 tol`.
    pub converged: bool,
    pub objective_history: Vec<f64>,
}

/// Minimizes `||conv(ecg, h) - pcg||^2 + gamma ||h||_1` by ISTA.
///
/// The normal equations are formed once (`G = A^T A`, `c = A^T y`), so each
/// iteration costs `O(n_taps^2)`. The step is `1 / L` with `L = 2 ||A||^2`
/// the Lipschitz constant of the smooth part's gradient.
pub fn deconv_sparse_fit(ecg: &Signal, pcg: &Signal, cfg: &DeconvConfig) -> Result<SparseFit> {
    check_pair(ecg, pcg, cfg.n_taps)?;
    if !(cfg.gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be >= 0, got {}",
            cfg.gamma
        )));
    }
    let x = ecg.samples();
    let y = pcg.samples();
    let nt = cfg.n_taps;
    let n = x.len();
    // G[l][m] = sum_i x[i-l] x[i-m], c[l] = sum_i y[i] x[i-l].
    let mut g = vec![0.0; nt * nt];
    for l in 0..nt {
        for m in l..nt {
            let s: f64 = (m..n).map(|i| x[i - l] * x[i - m]).sum();
            g[l * nt + m] = s;
            g[m * nt + l] = s;
        }
    }
    let c: Vec<f64> = (0..nt)
        .map(|l| (l..n).map(|i| y[i] * x[i - l]).sum())
        .collect();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let gram = |h: &[f64], out: &mut [f64]| {
        for l in 0..nt {
            out[l] = g[l * nt..(l + 1) * nt]
                .iter()
                .zip(h)
                .map(|(a, b)| a * b)
                .sum();
        }
    };
    let lipschitz = 2.0 * power_iteration(nt, &gram) * 1.01;
    if lipschitz == 0.0 {
        return Err(Error::DegenerateExcitation);
    }
    let step = 1.0 / lipschitz;
    let objective = |h: &[f64], gh: &[f64]| -> f64 {
        let quad: f64 = h.iter().zip(gh).map(|(a, b)| a * b).sum();
        let lin: f64 = h.iter().zip(&c).map(|(a, b)| a * b).sum();
        let l1: f64 = h.iter().map(|v| v.abs()).sum();
        (quad - 2.0 * lin + yy).max(0.0) + cfg.gamma * l1
    };
    let mut h = vec![0.0; nt];
    let mut gh = vec![0.0; nt];
    let mut prev = objective(&h, &gh);
    let mut history = vec![prev];
    let mut rel = f64::INFINITY;
    let mut iterations = 0;
    let thresh = cfg.gamma * step;
    while iterations < cfg.max_iter {
        for l in 0..nt {
            let z = h[l] - step * 2.0 * (gh[l] - c[l]);
            h[l] = z.signum() * (z.abs() - thresh).max(0.0);
        }
        gram(&h, &mut gh);
        let obj = objective(&h, &gh);
        history.push(obj);
        iterations += 1;
        rel = (prev - obj).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = obj;
        if rel < cfg.tol {
            break;
        }
    }
    let converged = iterations < cfg.max_iter || rel <= 100.0 * cfg.tol;
    Ok(SparseFit {
        filter: FirFilter::new(h, ecg.sample_rate_hz())?,
        iterations,
        converged,
        objective_history: history,
    })
}

pub fn deconv_sparse(ecg: &Signal, pcg: &Signal, cfg: &DeconvConfig) -> Result<FirFilter> {
    deconv_sparse_fit(ecg, pcg, cfg).map(|f| f.filter)
}

/// Largest eigenvalue of a symmetric positive semidefinite operator.
fn power_iteration(n: usize, op: &impl Fn(&[f64], &mut [f64])) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        op(&v, &mut w);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        std::mem::swap(&mut v, &mut w);
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Runs the estimator selected by `cfg.method`.
pub fn estimate(ecg: &Signal, pcg: &Signal, cfg: &DeconvConfig) -> Result<FirFilter> {
    cfg.validate()?;
    match cfg.method {
        DeconvMethod::Naive => deconv_naive(ecg, pcg, cfg),
        DeconvMethod::Tikhonov => deconv_tikhonov(ecg, pcg, cfg),
        DeconvMethod::Wiener => deconv_wiener(ecg, pcg, cfg),
        DeconvMethod::Sparse => deconv_sparse(ecg, pcg, cfg),
    }
}
