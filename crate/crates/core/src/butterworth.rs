//! Butterworth IIR filters as cascaded second-order sections.
//!
//! The analog prototype poles lie on the unit circle at
//! `exp(j*pi*(2k + N + 1) / (2N))`. Band edges are pre-warped, the prototype
//! is mapped to low-pass, high-pass or band-pass in the s-plane and then to
//! the z-plane by the bilinear transform. Band-pass designs follow the usual
//! convention that an order-N design yields a 2N-pole filter.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::signal::Signal;

/// Preprocessing order when none is given.
pub const DEFAULT_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    LowPass,
    HighPass,
    BandPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButterworthSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoffs_hz: Vec<f64>,
}

impl ButterworthSpec {
    pub fn low_pass(order: usize, cutoff_hz: f64) -> Self {
        Self {
            kind: FilterKind::LowPass,
            order,
            cutoffs_hz: vec![cutoff_hz],
        }
    }

    pub fn high_pass(order: usize, cutoff_hz: f64) -> Self {
        Self {
            kind: FilterKind::HighPass,
            order,
            cutoffs_hz: vec![cutoff_hz],
        }
    }

    pub fn band_pass(order: usize, low_hz: f64, high_hz: f64) -> Self {
        Self {
            kind: FilterKind::BandPass,
            order,
            cutoffs_hz: vec![low_hz, high_hz],
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidParameter("filter order must be >= 1".into()));
        }
        let want = match self.kind {
            FilterKind::BandPass => 2,
            _ => 1,
        };
        if self.cutoffs_hz.len() != want {
            return Err(Error::InvalidParameter(format!(
                "{:?} needs {want} cutoff(s), got {}",
                self.kind,
                self.cutoffs_hz.len()
            )));
        }
        let nyquist = 0.5 * sample_rate_hz;
        for &c in &self.cutoffs_hz {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!("cutoff must be positive, got {c}")));
            }
            if c >= nyquist {
                return Err(Error::InvalidCutoff {
                    cutoff_hz: c,
                    nyquist_hz: nyquist,
                });
            }
        }
        if want == 2 && self.cutoffs_hz[0] >= self.cutoffs_hz[1] {
            return Err(Error::InvalidParameter(
                "band-pass requires low cutoff < high cutoff".into(),
            ));
        }
        Ok(())
    }
}

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2)
            / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

/// A designed filter: cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
    pub sample_rate_hz: f64,
}

impl Sos {
    pub fn design(spec: &ButterworthSpec, sample_rate_hz: f64) -> Result<Self> {
        spec.validate(sample_rate_hz)?;
        let fs = sample_rate_hz;
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let n = spec.order;
        let proto: Vec<Complex64> = (0..n)
            .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
            .collect();

        // Analog poles, and the digital zeros they pair with.
        let (poles, zeros, ref_freq): (Vec<Complex64>, Vec<f64>, f64) = match spec.kind {
            FilterKind::LowPass => {
                let wc = warp(spec.cutoffs_hz[0]);
                (proto.iter().map(|p| p * wc).collect(), vec![-1.0; n], 0.0)
            }
            FilterKind::HighPass => {
                let wc = warp(spec.cutoffs_hz[0]);
                (proto.iter().map(|p| wc / p).collect(), vec![1.0; n], 0.5 * fs)
            }
            FilterKind::BandPass => {
                let lo = warp(spec.cutoffs_hz[0]);
                let hi = warp(spec.cutoffs_hz[1]);
                let bw = hi - lo;
                let w0sq = lo * hi;
                let mut poles = Vec::with_capacity(2 * n);
                for p in &proto {
                    let pb = p * bw;
                    let disc = (pb * pb - 4.0 * w0sq).sqrt();
                    poles.push((pb + disc) / 2.0);
                    poles.push((pb - disc) / 2.0);
                }
                let mut zeros = vec![1.0; n];
                zeros.extend(std::iter::repeat(-1.0).take(n));
                // Digital frequency that maps to the analog centre sqrt(lo*hi).
                let center = fs / PI * (w0sq.sqrt() / (2.0 * fs)).atan();
                (poles, zeros, center)
            }
        };
        let zpoles: Vec<Complex64> = poles
            .iter()
            .map(|s| (2.0 * fs + s) / (2.0 * fs - s))
            .collect();

        let sections = pair_sections(&zpoles, &zeros);
        let mut sos = Sos {
            sections,
            sample_rate_hz: fs,
        };
        // Unit gain at the passband reference frequency.
        let g = sos.magnitude(ref_freq);
        let per = g.powf(-1.0 / sos.sections.len() as f64);
        for s in &mut sos.sections {
            for b in &mut s.b {
                *b *= per;
            }
        }
        Ok(sos)
    }

    /// Magnitude response at `freq_hz` of one pass of the cascade.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
            .norm()
    }

    /// Causal single-pass filtering with zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            run_section(s, &mut y, [0.0, 0.0]);
        }
        y
    }

    /// Forward-backward filtering: zero phase, squared magnitude.
    ///
    /// Edges are extended by odd reflection and each section starts from its
    /// steady state for the first extended sample.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = (3 * (2 * self.sections.len() + 1)).min(x.len().saturating_sub(1));
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        self.run_with_steady_state(&mut ext);
        ext.reverse();
        self.run_with_steady_state(&mut ext);
        ext.reverse();
        let out = ext[pad..pad + n].to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "filter output is not finite".into(),
            ));
        }
        Ok(out)
    }

    fn run_with_steady_state(&self, y: &mut [f64]) {
        let mut level = y[0];
        for s in &self.sections {
            let g = s.dc_gain();
            let zi = [level * (g - s.b[0]), level * (s.b[2] - s.a[2] * g)];
            run_section(s, y, zi);
            level *= g;
        }
    }
}

fn run_section(s: &Biquad, y: &mut [f64], zi: [f64; 2]) {
    let [b0, b1, b2] = s.b;
    let [_, a1, a2] = s.a;
    let (mut z1, mut z2) = (zi[0], zi[1]);
    for v in y.iter_mut() {
        let x = *v;
        let out = b0 * x + z1;
        z1 = b1 * x - a1 * out + z2;
        z2 = b2 * x - a2 * out;
        *v = out;
    }
}

/// Groups conjugate pole pairs (and leftover real poles) into biquads.
fn pair_sections(poles: &[Complex64], zeros: &[f64]) -> Vec<Biquad> {
    const IM_TOL: f64 = 1e-10;
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > IM_TOL).collect();
    upper.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    let mut reals: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= IM_TOL)
        .map(|p| p.re)
        .collect();
    reals.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut zeros = zeros.to_vec();
    // Pair opposite zeros first so band-pass sections get (1 - z^-2).
    zeros.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fn take_zero_pair(zs: &mut Vec<f64>) -> [f64; 3] {
        match zs.len() {
            0 => [1.0, 0.0, 0.0],
            1 => {
                let z = zs.pop().unwrap();
                [1.0, -z, 0.0]
            }
            _ => {
                let z1 = zs.remove(0);
                let z2 = zs.pop().unwrap();
                [1.0, -(z1 + z2), z1 * z2]
            }
        }
    }

    let mut sections = Vec::new();
    for p in upper {
        let a = [1.0, -2.0 * p.re, p.norm_sqr()];
        sections.push(Biquad {
            b: take_zero_pair(&mut zeros),
            a,
        });
    }
    for chunk in reals.chunks(2) {
        let (a, b) = if chunk.len() == 2 {
            (
                [1.0, -(chunk[0] + chunk[1]), chunk[0] * chunk[1]],
                take_zero_pair(&mut zeros),
            )
        } else {
            let b = match zeros.pop() {
                Some(z) => [1.0, -z, 0.0],
                None => [1.0, 0.0, 0.0],
            };
            ([1.0, -chunk[0], 0.0], b)
        };
        sections.push(Biquad { b, a });
    }
    sections
}

/// Zero-phase Butterworth filtering of a signal.
pub fn butterworth_filter(signal: &Signal, spec: &ButterworthSpec) -> Result<Signal> {
    let sos = Sos::design(spec, signal.sample_rate_hz())?;
    signal.with_samples(sos.filtfilt(signal.samples())?)
}

/// Causal single-pass Butterworth filtering (has phase distortion).
pub fn butterworth_filter_causal(signal: &Signal, spec: &ButterworthSpec) -> Result<Signal> {
    let sos = Sos::design(spec, signal.sample_rate_hz())?;
    signal.with_samples(sos.filter(signal.samples()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    fn tone(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn analytic_magnitude_matches_butterworth_formula() {
        // |H| = 1/sqrt(1 + (wa/wc)^(2N)) in warped analog frequency.
        let fs = 2000.0;
        let sos = Sos::design(&ButterworthSpec::low_pass(4, 100.0), fs).unwrap();
        let warp = |f: f64| (PI * f / fs).tan();
        for f in [10.0, 50.0, 100.0, 150.0, 400.0] {
            let want = 1.0 / (1.0 + (warp(f) / warp(100.0)).powi(8)).sqrt();
            assert!((sos.magnitude(f) - want).abs() < 1e-9, "f={f}");
        }
    }

    #[test]
    fn minus_three_db_at_cutoff_single_pass() {
        let fs = 2000.0;
        for spec in [
            ButterworthSpec::low_pass(4, 60.0),
            ButterworthSpec::high_pass(4, 20.0),
            ButterworthSpec::low_pass(3, 200.0),
        ] {
            let f = spec.cutoffs_hz[0];
            let sos = Sos::design(&spec, fs).unwrap();
            assert!((db(sos.magnitude(f)) + 3.0103).abs() < 0.01);
            // Measured on a steady-state sine.
            let x = tone(f, fs, 40000);
            let y = sos.filter(&x);
            let measured = db(rms(&y[20000..]) / rms(&x[20000..]));
            assert!((measured + 3.0).abs() < 0.5, "{spec:?}: {measured}");
        }
    }

    #[test]
    fn band_pass_40hz_attenuation_under_one_db() {
        let fs = 2000.0;
        let spec = ButterworthSpec::band_pass(4, 0.5, 60.0);
        let sig = Signal::new(tone(40.0, fs, 40000), fs).unwrap();
        let out = butterworth_filter(&sig, &spec).unwrap();
        let a = db(rms(&out.samples()[10000..30000]) / rms(&sig.samples()[10000..30000]));
        assert!(a > -1.0 && a <= 0.01, "attenuation {a} dB");
        let sos = Sos::design(&spec, fs).unwrap();
        for f in [0.5, 60.0] {
            assert!((db(sos.magnitude(f)) + 3.0103).abs() < 0.01);
        }
    }

    #[test]
    fn high_pass_removes_dc() {
        let fs = 2000.0;
        let sig = Signal::new(vec![3.0; 8000], fs).unwrap();
        let out = butterworth_filter(&sig, &ButterworthSpec::high_pass(4, 20.0)).unwrap();
        assert!(out.samples()[2000..6000].iter().all(|v| v.abs() <= 1e-6));
        let causal = butterworth_filter_causal(&sig, &ButterworthSpec::high_pass(4, 20.0)).unwrap();
        assert!(causal.samples()[4000..].iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn stopband_is_monotone() {
        let fs = 2000.0;
        for spec in [
            ButterworthSpec::low_pass(4, 60.0),
            ButterworthSpec::band_pass(4, 0.5, 60.0),
        ] {
            let sos = Sos::design(&spec, fs).unwrap();
            let mut prev = sos.magnitude(60.0);
            let mut f = 61.0;
            while f < 999.0 {
                let m = sos.magnitude(f);
                assert!(m <= prev + 1e-15, "{spec:?} at {f}");
                prev = m;
                f += 1.0;
            }
        }
        let sos = Sos::design(&ButterworthSpec::high_pass(4, 20.0), fs).unwrap();
        let mut prev = sos.magnitude(20.0);
        let mut f = 19.5;
        while f > 0.1 {
            let m = sos.magnitude(f);
            assert!(m <= prev + 1e-15);
            prev = m;
            f -= 0.5;
        }
    }

    #[test]
    fn zero_phase_preserves_timing() {
        // A symmetric pulse stays centred after forward-backward filtering.
        let fs = 2000.0;
        let n = 4000;
        let x: Vec<f64> = (0..n)
            .map(|i| (-0.5 * ((i as f64 - 2000.0) / 20.0).powi(2)).exp())
            .collect();
        let y = Sos::design(&ButterworthSpec::band_pass(4, 0.5, 60.0), fs)
            .unwrap()
            .filtfilt(&x)
            .unwrap();
        let peak = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 2000);
    }

    #[test]
    fn invalid_cutoffs() {
        let spec = ButterworthSpec::low_pass(4, 1000.0);
        assert!(matches!(spec.validate(2000.0), Err(Error::InvalidCutoff { .. })));
        assert!(ButterworthSpec::band_pass(4, 60.0, 0.5).validate(2000.0).is_err());
        let mut two = ButterworthSpec::low_pass(2, 10.0);
        two.cutoffs_hz.push(20.0);
        assert!(two.validate(2000.0).is_err());
    }
}
