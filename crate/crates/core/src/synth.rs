//! Synthetic ECG/PCG pairs with a known coupling filter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{
    causal_convolve, mix_at_snr, scaled_noise, z_score, FirFilter, Signal, DEFAULT_TAPS,
};
use crate::spectral::{fft_real, ifft_real};

// Independent random streams derived from one seed.
const STREAM_ECG: u64 = 1;
const STREAM_FILTER: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_MIX: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterFamily {
    DampedSinusoid,
    TwoBurst,
    RandomSmooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    HospitalLike,
}

impl std::str::FromStr for FilterFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "damped_sinusoid" => Ok(FilterFamily::DampedSinusoid),
            "two_burst" => Ok(FilterFamily::TwoBurst),
            "random_smooth" => Ok(FilterFamily::RandomSmooth),
            _ => Err(Error::InvalidParameter(format!("unknown filter family {s:?}"))),
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "hospital_like" | "hospital" => Ok(NoiseKind::HospitalLike),
            _ => Err(Error::InvalidParameter(format!("unknown noise kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::HospitalLike => "hospital_like",
        })
    }
}

/// Gaussian-shaped spectral notch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Notch {
    pub center_hz: f64,
    pub width_hz: f64,
    pub depth_db: f64,
}

impl std::str::FromStr for Notch {
    type Err = Error;
    /// Parses `center:width:depth`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidParameter(format!("bad notch {s:?}")))?;
        match v.as_slice() {
            [c, w, d] => Ok(Notch {
                center_hz: *c,
                width_hz: *w,
                depth_db: *d,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "notch must be center:width:depth, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub heart_rate_bpm: f64,
    pub qrs_width_ms: f64,
    pub filter_family: FilterFamily,
    pub spectral_notch: Option<Notch>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration_s: 10.0,
            sample_rate_hz: 2000.0,
            heart_rate_bpm: 60.0,
            qrs_width_ms: 8.0,
            filter_family: FilterFamily::DampedSinusoid,
            spectral_notch: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return bad(format!("sample_rate_hz must be positive, got {}", self.sample_rate_hz));
        }
        if !(30.0..=220.0).contains(&self.heart_rate_bpm) {
            return bad(format!("heart_rate_bpm must be in [30, 220], got {}", self.heart_rate_bpm));
        }
        if !(self.qrs_width_ms > 0.0) {
            return bad(format!("qrs_width_ms must be positive, got {}", self.qrs_width_ms));
        }
        if self.n_samples() < DEFAULT_TAPS {
            return bad("duration too short for the filter length".into());
        }
        if let Some(n) = &self.spectral_notch {
            if !(n.center_hz > 0.0 && n.center_hz < self.sample_rate_hz / 2.0) {
                return Err(Error::InvalidCutoff {
                    cutoff_hz: n.center_hz,
                    nyquist_hz: self.sample_rate_hz / 2.0,
                });
            }
            if !(n.width_hz > 0.0) || !(n.depth_db >= 0.0) {
                return bad(format!("notch width must be > 0 and depth >= 0, got {n:?}"));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub ecg: Signal,
    pub pcg_clean: Signal,
    pub pcg_noisy: Option<Signal>,
    /// The scaled noise added to `pcg_clean`, kept for oracle experiments.
    pub noise: Option<Signal>,
    pub h_true: FirFilter,
    pub spec: SynthSpec,
}

/// Quasi-periodic train of Gaussian QRS-like pulses, z-scored.
pub fn gen_ecg(spec: &SynthSpec) -> Result<Signal> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let n = spec.n_samples();
    let mut rng = spec.rng(STREAM_ECG);
    let rr = 60.0 / spec.heart_rate_bpm;
    // Treat the QRS width as the +-3 sigma span of the pulse.
    let sigma = spec.qrs_width_ms / 1000.0 / 6.0;
    let reach = (6.0 * sigma * fs).ceil() as i64 + 1;
    let mut x = vec![0.0; n];
    let mut beat = rng.gen_range(0.0..0.5) * rr;
    let end = spec.duration_s + 6.0 * sigma;
    while beat < end {
        let amp = 1.0 + rng.gen_range(-0.05..0.05);
        let centre = (beat * fs).round() as i64;
        for k in (centre - reach).max(0)..(centre + reach).min(n as i64) {
            let dt = k as f64 / fs - beat;
            x[k as usize] += amp * (-0.5 * (dt / sigma).powi(2)).exp();
        }
        beat += rr * (1.0 + rng.gen_range(-0.05..0.05));
    }
    if let Some(notch) = &spec.spectral_notch {
        x = apply_notch(&x, fs, notch);
    }
    z_score(&Signal::new(x, fs)?)
}

/// Multiplies the spectrum by a Gaussian dip reaching `-depth_db` at the
/// centre and roughly `-6 dB` at `centre +- width/2`.
pub fn apply_notch(x: &[f64], sample_rate_hz: f64, notch: &Notch) -> Vec<f64> {
    let n = x.len();
    let mut spec = fft_real(x);
    let floor = 10f64.powf(-notch.depth_db / 20.0);
    let half = notch.width_hz / 2.0;
    for (k, c) in spec.iter_mut().enumerate() {
        let f = crate::spectral::bin_frequency(k, n, sample_rate_hz);
        let g = 1.0 - (1.0 - floor) * (-0.5 * ((f - notch.center_hz) / half).powi(2)).exp();
        *c *= g;
    }
    ifft_real(&spec)
}

/// `h[k] = exp(-k / tau) * sin(2 pi f k / fs)`, not normalized.
pub fn damped_sinusoid(n_taps: usize, tau: f64, freq_hz: f64, sample_rate_hz: f64) -> Vec<f64> {
    (0..n_taps)
        .map(|k| {
            let k = k as f64;
            let env = if tau.is_infinite() { 1.0 } else { (-k / tau).exp() };
            env * (2.0 * std::f64::consts::PI * freq_hz * k / sample_rate_hz).sin()
        })
        .collect()
}

fn unit_energy(mut h: Vec<f64>) -> Vec<f64> {
    let e = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if e > 0.0 {
        h.iter_mut().for_each(|v| *v /= e);
    }
    h
}

/// Ground-truth coupling filter, 64 taps with unit energy.
pub fn gen_true_filter(spec: &SynthSpec) -> Result<FirFilter> {
    spec.validate()?;
    let fs = spec.sample_rate_hz;
    let n = DEFAULT_TAPS;
    let mut rng = spec.rng(STREAM_FILTER);
    // Characteristic frequencies are kept well inside the band for low rates.
    let f_hi = 150.0f64.min(0.2 * fs);
    let f_lo = 60.0f64.min(0.5 * f_hi);
    let taps = match spec.filter_family {
        FilterFamily::DampedSinusoid => {
            let f = rng.gen_range(f_lo..f_hi);
            let tau = rng.gen_range(8.0..20.0);
            damped_sinusoid(n, tau, f, fs)
        }
        FilterFamily::TwoBurst => {
            let mut h = vec![0.0; n];
            let bursts = [
                (rng.gen_range(2..8), 1.0),
                (rng.gen_range(28..40), rng.gen_range(0.5..0.8)),
            ];
            for (delay, amp) in bursts {
                let f = rng.gen_range(f_lo..f_hi);
                let tau = rng.gen_range(4.0..8.0);
                let b = damped_sinusoid(n - delay, tau, f, fs);
                for (k, v) in b.into_iter().enumerate() {
                    h[k + delay] += amp * v;
                }
            }
            h
        }
        FilterFamily::RandomSmooth => {
            let raw: Vec<f64> = (0..n + 16)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let kernel: Vec<f64> = (-8i32..=8)
                .map(|k| (-0.5 * (k as f64 / 3.0).powi(2)).exp())
                .collect();
            (0..n)
                .map(|k| {
                    let s: f64 = kernel.iter().enumerate().map(|(j, w)| w * raw[k + j]).sum();
                    s * (-(k as f64) / 24.0).exp()
                })
                .collect()
        }
    };
    FirFilter::new(unit_energy(taps), fs)
}

/// Unit-variance noise of the requested kind.
pub fn gen_noise(kind: NoiseKind, n: usize, sample_rate_hz: f64, seed: u64) -> Result<Signal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_NOISE);
    let x = match kind {
        NoiseKind::White => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        NoiseKind::HospitalLike => hospital_noise(n, sample_rate_hz, &mut rng),
    };
    z_score(&Signal::new(x, sample_rate_hz)?)
}

/// Pink (1/f) floor plus gated narrowband beeps between 400 and 1200 Hz.
fn hospital_noise(n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut spec = fft_real(&white);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = crate::spectral::bin_frequency(k, n, fs);
        // Below 1 Hz the floor is flat so the DC region stays bounded.
        *c /= f.max(1.0).sqrt();
    }
    let pink = unit_rms(ifft_real(&spec));
    let top = 1200.0f64.min(0.45 * fs);
    let bottom = 400.0f64.min(0.5 * top);
    let mut beeps = vec![0.0; n];
    for _ in 0..4 {
        let f = rng.gen_range(bottom..top);
        let rate = rng.gen_range(1.0..4.0);
        let phase_gate = rng.gen_range(0.0..1.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, b) in beeps.iter_mut().enumerate() {
            let t = i as f64 / fs;
            if ((t * rate + phase_gate).floor() as i64) % 2 == 0 {
                *b += (std::f64::consts::TAU * f * t + phase).sin();
            }
        }
    }
    let beeps = unit_rms(beeps);
    pink.iter().zip(&beeps).map(|(a, b)| a + b).collect()
}

fn unit_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = crate::signal::mean_square(&x).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Builds `pcg = conv(ecg, h_true)` and, if `snr_db` is given, a noisy copy.
pub fn gen_pair(spec: &SynthSpec, snr_db: Option<f64>, noise_kind: NoiseKind) -> Result<SynthPair> {
    let ecg = gen_ecg(spec)?;
    let h_true = gen_true_filter(spec)?;
    let pcg_clean = Signal::new(
        causal_convolve(ecg.samples(), h_true.taps()),
        spec.sample_rate_hz,
    )?;
    let (pcg_noisy, noise) = match snr_db {
        None => (None, None),
        Some(snr) => {
            let noise = gen_noise(noise_kind, ecg.len(), spec.sample_rate_hz, spec.seed)?;
            let mix_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ STREAM_MIX;
            let scaled = scaled_noise(&pcg_clean, &noise, snr, mix_seed)?;
            let noisy = mix_at_snr(&pcg_clean, &noise, snr, mix_seed)?;
            (Some(noisy), Some(Signal::new(scaled, spec.sample_rate_hz)?))
        }
    };
    Ok(SynthPair {
        ecg,
        pcg_clean,
        pcg_noisy,
        noise,
        h_true,
        spec: spec.clone(),
    })
}

impl SynthPair {
    /// The noisy PCG if present, otherwise the clean one.
    pub fn pcg(&self) -> &Signal {
        self.pcg_noisy.as_ref().unwrap_or(&self.pcg_clean)
    }
}
