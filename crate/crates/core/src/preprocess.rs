//! Conditioning of raw ECG/PCG recordings before estimation.

use serde::{Deserialize, Serialize};

use crate::butterworth::{butterworth_filter, ButterworthSpec, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::signal::{z_score, Signal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub ecg_low_hz: f64,
    pub ecg_high_hz: f64,
    pub pcg_highpass_hz: f64,
    pub order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            ecg_low_hz: 0.5,
            ecg_high_hz: 60.0,
            pcg_highpass_hz: 20.0,
            order: DEFAULT_ORDER,
        }
    }
}

/// Z-scores, then applies zero-phase Butterworth filters: a band-pass on the
/// ECG and a high-pass on the PCG. Both outputs are z-scored again.
pub fn preprocess_pair(ecg: &Signal, pcg: &Signal, cfg: &PreprocessConfig) -> Result<(Signal, Signal)> {
    if ecg.sample_rate_hz() != pcg.sample_rate_hz() {
        return Err(Error::SampleRateMismatch(ecg.sample_rate_hz(), pcg.sample_rate_hz()));
    }
    if ecg.len() != pcg.len() {
        return Err(Error::LengthMismatch(ecg.len(), pcg.len()));
    }
    let e = z_score(ecg)?;
    let p = z_score(pcg)?;
    let e = butterworth_filter(&e, &ButterworthSpec::band_pass(cfg.order, cfg.ecg_low_hz, cfg.ecg_high_hz))?;
    let p = butterworth_filter(&p, &ButterworthSpec::high_pass(cfg.order, cfg.pcg_highpass_hz))?;
    Ok((z_score(&e)?, z_score(&p)?))
}
