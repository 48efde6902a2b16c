//! File formats: raw f32 signals with JSON sidecars, single-column CSV, and
//! filter JSON documents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{FirFilter, Signal};

/// Metadata stored next to a raw sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub label: String,
    pub channel: String,
}

/// Path of the sidecar belonging to a raw sample file (`x.f32` -> `x.json`).
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes `signal` as little-endian f32 samples plus a JSON sidecar.
pub fn write_signal(raw: &Path, signal: &Signal, label: &str, channel: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(signal.len() * 4);
    for &v in signal.samples() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(raw, bytes)?;
    let meta = Sidecar {
        sample_rate_hz: signal.sample_rate_hz(),
        n_samples: signal.len(),
        label: label.to_string(),
        channel: channel.to_string(),
    };
    fs::write(sidecar_path(raw), to_json_pretty(&meta)?)?;
    Ok(())
}

/// Reads a raw f32 file and its sidecar.
pub fn read_raw_signal(raw: &Path) -> Result<(Signal, Sidecar)> {
    let meta: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(raw))?)?;
    let bytes = fs::read(raw)?;
    if bytes.len() != meta.n_samples * 4 {
        return Err(Error::LengthMismatch(meta.n_samples, bytes.len() / 4));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Signal::new(samples, meta.sample_rate_hz)?, meta))
}

/// Parses one amplitude per line; blank lines are skipped.
pub fn read_csv_signal(path: &Path, sample_rate_hz: f64) -> Result<Signal> {
    let text = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| {
            Error::InvalidParameter(format!("{}:{}: not a number: {line:?}", path.display(), i + 1))
        })?;
        samples.push(v);
    }
    Signal::new(samples, sample_rate_hz)
}

/// Reads a signal by extension: `.csv` needs `csv_rate_hz`, anything else is
/// treated as a raw file with a sidecar.
pub fn read_signal(path: &Path, csv_rate_hz: Option<f64>) -> Result<Signal> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    if is_csv {
        let fs_hz = csv_rate_hz.ok_or_else(|| {
            Error::InvalidParameter(format!("{}: CSV input needs a sample rate", path.display()))
        })?;
        read_csv_signal(path, fs_hz)
    } else {
        Ok(read_raw_signal(path)?.0)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of the canonical JSON form of a value (object keys sorted).
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&canonical)?.as_bytes()))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// A serialized coupling filter with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFile {
    pub taps: Vec<f64>,
    pub sample_rate_hz: f64,
    pub method: String,
    pub config_fingerprint: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
    #[serde(default)]
    pub inputs: Vec<InputHash>,
}

impl FilterFile {
    pub fn new<C: Serialize>(filter: &FirFilter, method: &str, config: &C) -> Result<Self> {
        Ok(FilterFile {
            taps: filter.taps().to_vec(),
            sample_rate_hz: filter.sample_rate_hz(),
            method: method.to_string(),
            config_fingerprint: fingerprint(config)?,
            config: serde_json::to_value(config)?,
            loss_history: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn filter(&self) -> Result<FirFilter> {
        FirFilter::new(self.taps.clone(), self.sample_rate_hz)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, to_json_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
