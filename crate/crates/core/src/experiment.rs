//! Seeded Monte Carlo benchmarks and intra-state consistency runs over
//! synthetic ECG/PCG pairs.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deconv::{self, DeconvConfig, DeconvMethod};
use crate::error::{Error, Result};
use crate::io::fingerprint;
use crate::metrics::{consistency_eval, filter_coherence, filter_mse, filter_pcc, ConsistencyReport};
use crate::nmcse::{self, NmcseConfig};
use crate::signal::{FirFilter, Signal};
use crate::synth::{gen_pair, NoiseKind, SynthSpec};

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Tikhonov,
    Wiener,
    #[serde(alias = "sparsity")]
    Sparse,
    Nmcse,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::Tikhonov,
        Method::Wiener,
        Method::Sparse,
        Method::Nmcse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Tikhonov => "tikhonov",
            Method::Wiener => "wiener",
            Method::Sparse => "sparse",
            Method::Nmcse => "nmcse",
        }
    }

    pub fn deconv(&self) -> Option<DeconvMethod> {
        match self {
            Method::Naive => Some(DeconvMethod::Naive),
            Method::Tikhonov => Some(DeconvMethod::Tikhonov),
            Method::Wiener => Some(DeconvMethod::Wiener),
            Method::Sparse => Some(DeconvMethod::Sparse),
            Method::Nmcse => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nmcse" => Ok(Method::Nmcse),
            other => other
                .parse::<DeconvMethod>()
                .map(|d| match d {
                    DeconvMethod::Naive => Method::Naive,
                    DeconvMethod::Tikhonov => Method::Tikhonov,
                    DeconvMethod::Wiener => Method::Wiener,
                    DeconvMethod::Sparse => Method::Sparse,
                })
                .map_err(|_| Error::InvalidParameter(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Beta,
    Epsilon,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Epsilon => "epsilon",
        }
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(&self, cfg: &NmcseConfig, value: f64) -> NmcseConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::Alpha => c.cost.alpha = value,
            SweepParam::Beta => c.cost.beta = value,
            SweepParam::Epsilon => c.sinkhorn.epsilon = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// SNR levels in dB; `null` in JSON stands for a noise-free condition.
mod snr_levels {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let o: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        o.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let o = Vec::<Option<f64>>::deserialize(d)?;
        Ok(o.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    #[serde(with = "snr_levels")]
    pub snr_db_levels: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    pub n_trials: usize,
    pub seed: u64,
    pub synth: SynthSpec,
    pub nmcse: NmcseConfig,
    pub deconv: DeconvConfig,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: Method::ALL.to_vec(),
            snr_db_levels: vec![30.0, 10.0, 5.0],
            noise_kinds: vec![NoiseKind::HospitalLike],
            n_trials: 20,
            seed: 0,
            synth: SynthSpec::default(),
            nmcse: NmcseConfig::default(),
            deconv: DeconvConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.n_trials == 0 {
            return bad("n_trials must be >= 1");
        }
        if self.methods.is_empty() {
            return bad("methods must be non-empty");
        }
        if self.snr_db_levels.is_empty() {
            return bad("snr_db_levels must be non-empty");
        }
        if self.snr_db_levels.iter().any(|s| s.is_nan()) {
            return bad("snr_db_levels must not contain NaN");
        }
        if self.noise_kinds.is_empty() {
            return bad("noise_kinds must be non-empty");
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return bad("sweep.values must be non-empty");
            }
            for &v in &sw.values {
                sw.param.apply(&self.nmcse, v).validate()?;
            }
        }
        self.synth.validate()?;
        self.nmcse.validate()?;
        self.deconv.validate()
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }

    /// `(sweep value, nmcse config)` per sweep group; one group without a sweep.
    fn groups(&self) -> Vec<(Option<f64>, NmcseConfig)> {
        match &self.sweep {
            None => vec![(None, self.nmcse.clone())],
            Some(sw) => sw
                .values
                .iter()
                .map(|&v| (Some(v), sw.param.apply(&self.nmcse, v)))
                .collect(),
        }
    }
}

/// Seed of the synthetic pair for a trial; shared by all methods, SNR levels
/// and noise kinds so comparisons are paired.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((trial as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Estimates a coupling filter with one method. NMCSE trains on the pair and
/// then refines on it.
pub fn estimate_filter(
    method: Method,
    ecg: &Signal,
    pcg: &Signal,
    deconv_cfg: &DeconvConfig,
    nmcse_cfg: &NmcseConfig,
) -> Result<FirFilter> {
    match method.deconv() {
        Some(d) => {
            let mut cfg = deconv_cfg.clone();
            cfg.method = d;
            deconv::estimate(ecg, pcg, &cfg)
        }
        None => {
            let pairs = [(ecg.clone(), pcg.clone())];
            let coupler = nmcse::train(&pairs, nmcse_cfg)?;
            nmcse::refine(&coupler, ecg, pcg, nmcse_cfg)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub trial: usize,
    pub sweep_value: Option<f64>,
    pub mse: f64,
    pub pcc: f64,
    pub mid_band_coherence: f64,
    pub wall_time_ms: f64,
    /// Error message when estimation failed; metrics are NaN then.
    pub error: Option<String>,
}

impl BenchmarkRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn snr_option(snr_db: f64) -> Option<f64> {
    snr_db.is_finite().then_some(snr_db)
}

struct Condition {
    group: usize,
    snr_db: f64,
    noise_kind: NoiseKind,
    trial: usize,
}

fn conditions(cfg: &ExperimentConfig, n_groups: usize) -> Vec<Condition> {
    let mut out = Vec::new();
    for group in 0..n_groups {
        for &snr_db in &cfg.snr_db_levels {
            for &noise_kind in &cfg.noise_kinds {
                for trial in 0..cfg.n_trials {
                    out.push(Condition {
                        group,
                        snr_db,
                        noise_kind,
                        trial,
                    });
                }
            }
        }
    }
    out
}

fn score(
    method: Method,
    ecg: &Signal,
    pcg: &Signal,
    h_true: &FirFilter,
    deconv_cfg: &DeconvConfig,
    nmcse_cfg: &NmcseConfig,
) -> Result<(f64, f64, f64, f64)> {
    let t0 = Instant::now();
    let h = estimate_filter(method, ecg, pcg, deconv_cfg, nmcse_cfg)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    let mse = filter_mse(&h, h_true)?;
    let pcc = filter_pcc(&h, h_true)?;
    let coh = filter_coherence(ecg, h_true, &h)?.band_means.mid;
    if !(mse.is_finite() && pcc.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    Ok((mse, pcc, coh, ms))
}

/// Runs every (sweep value, SNR, noise kind, trial, method) combination.
/// Rows come back in that nesting order whatever the thread count.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<Vec<BenchmarkRow>> {
    cfg.validate()?;
    let groups = cfg.groups();
    let conds = conditions(cfg, groups.len());
    let per_cond: Vec<Result<Vec<BenchmarkRow>>> = conds
        .par_iter()
        .map(|c| {
            let (sweep_value, nmcse_cfg) = &groups[c.group];
            let seed = trial_seed(cfg.seed, c.trial);
            let spec = SynthSpec {
                seed,
                ..cfg.synth.clone()
            };
            let pair = gen_pair(&spec, snr_option(c.snr_db), c.noise_kind)?;
            let ncfg = NmcseConfig {
                seed,
                ..nmcse_cfg.clone()
            };
            Ok(cfg
                .methods
                .iter()
                .map(|&method| {
                    let res = score(method, &pair.ecg, pair.pcg(), &pair.h_true, &cfg.deconv, &ncfg);
                    let (mse, pcc, coh, ms, error) = match res {
                        Ok((a, b, c, d)) => (a, b, c, d, None),
                        Err(e) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, Some(e.to_string())),
                    };
                    BenchmarkRow {
                        method,
                        snr_db: c.snr_db,
                        noise_kind: c.noise_kind,
                        trial: c.trial,
                        sweep_value: *sweep_value,
                        mse,
                        pcc,
                        mid_band_coherence: coh,
                        wall_time_ms: ms,
                        error,
                    }
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_cond {
        rows.extend(r?);
    }
    Ok(rows)
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sweep_name(cfg: &ExperimentConfig) -> &'static str {
    cfg.sweep.as_ref().map(|s| s.param.name()).unwrap_or("")
}

/// Results table. Wall times are excluded so the file is reproducible; see
/// [`timing_csv`].
pub fn benchmark_csv(rows: &[BenchmarkRow], cfg: &ExperimentConfig) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "# nmcse-benchmark schema={CSV_SCHEMA_VERSION} config={}", cfg.fingerprint()?).unwrap();
    s.push_str("method,snr_db,noise_kind,trial,sweep_param,sweep_value,mse,pcc,mid_band_coherence,status\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.snr_db,
            r.noise_kind,
            r.trial,
            sweep_name(cfg),
            opt_num(r.sweep_value),
            r.mse,
            r.pcc,
            r.mid_band_coherence,
            csv_escape(r.error.as_deref().unwrap_or("ok")),
        )
        .unwrap();
    }
    Ok(s)
}

/// Per-row wall times, in the same order as [`benchmark_csv`].
pub fn timing_csv(rows: &[BenchmarkRow], cfg: &ExperimentConfig) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "# nmcse-timing schema={CSV_SCHEMA_VERSION} config={}", cfg.fingerprint()?).unwrap();
    s.push_str("method,snr_db,noise_kind,trial,sweep_value,wall_time_ms\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.3}",
            r.method,
            r.snr_db,
            r.noise_kind,
            r.trial,
            opt_num(r.sweep_value),
            r.wall_time_ms
        )
        .unwrap();
    }
    Ok(s)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub sweep_value: Option<f64>,
    #[serde(with = "snr_scalar")]
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub median_mse: Option<f64>,
    pub median_pcc: Option<f64>,
    pub median_mid_band_coherence: Option<f64>,
}

mod snr_scalar {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub sweep_param: Option<SweepParam>,
    pub groups: Vec<SummaryGroup>,
}

impl Summary {
    pub fn find(&self, sweep_value: Option<f64>, snr_db: f64, noise_kind: NoiseKind, method: Method) -> Option<&SummaryGroup> {
        self.groups.iter().find(|g| {
            g.sweep_value == sweep_value && g.snr_db == snr_db && g.noise_kind == noise_kind && g.method == method
        })
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Per-condition medians over trials, ignoring failed rows.
pub fn summarize(rows: &[BenchmarkRow], cfg: &ExperimentConfig) -> Result<Summary> {
    let mut groups: Vec<SummaryGroup> = Vec::new();
    let mut members: Vec<Vec<&BenchmarkRow>> = Vec::new();
    for r in rows {
        let idx = groups.iter().position(|g| {
            g.sweep_value == r.sweep_value && g.snr_db == r.snr_db && g.noise_kind == r.noise_kind && g.method == r.method
        });
        let idx = match idx {
            Some(i) => i,
            None => {
                groups.push(SummaryGroup {
                    sweep_value: r.sweep_value,
                    snr_db: r.snr_db,
                    noise_kind: r.noise_kind,
                    method: r.method,
                    n_ok: 0,
                    n_failed: 0,
                    median_mse: None,
                    median_pcc: None,
                    median_mid_band_coherence: None,
                });
                members.push(Vec::new());
                groups.len() - 1
            }
        };
        members[idx].push(r);
    }
    for (g, m) in groups.iter_mut().zip(&members) {
        let ok: Vec<&&BenchmarkRow> = m.iter().filter(|r| r.ok()).collect();
        g.n_ok = ok.len();
        g.n_failed = m.len() - ok.len();
        g.median_mse = finite(median(&ok.iter().map(|r| r.mse).collect::<Vec<_>>()));
        g.median_pcc = finite(median(&ok.iter().map(|r| r.pcc).collect::<Vec<_>>()));
        g.median_mid_band_coherence =
            finite(median(&ok.iter().map(|r| r.mid_band_coherence).collect::<Vec<_>>()));
    }
    Ok(Summary {
        schema_version: CSV_SCHEMA_VERSION,
        config_fingerprint: cfg.fingerprint()?,
        sweep_param: cfg.sweep.as_ref().map(|s| s.param),
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub method: Method,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub trial: usize,
    pub report: Option<ConsistencyReport>,
    pub error: Option<String>,
}

/// Splits one long synthetic recording into three windows of
/// `synth.duration_s`: a clean reference window, then two noisy windows A and
/// B. Every method estimates a filter on each window, giving one
/// consistency row per (SNR, noise kind, trial, method).
pub fn run_consistency(cfg: &ExperimentConfig) -> Result<Vec<ConsistencyRow>> {
    cfg.validate()?;
    let n = cfg.synth.n_samples();
    let mut conds = Vec::new();
    for &snr_db in &cfg.snr_db_levels {
        for &noise_kind in &cfg.noise_kinds {
            for trial in 0..cfg.n_trials {
                conds.push((snr_db, noise_kind, trial));
            }
        }
    }
    let per_cond: Vec<Result<Vec<ConsistencyRow>>> = conds
        .par_iter()
        .map(|&(snr_db, noise_kind, trial)| {
            let seed = trial_seed(cfg.seed, trial);
            let spec = SynthSpec {
                seed,
                duration_s: 3.0 * cfg.synth.duration_s,
                ..cfg.synth.clone()
            };
            let pair = gen_pair(&spec, snr_option(snr_db), noise_kind)?;
            let noisy = pair.pcg();
            let ecg_r = pair.ecg.slice(0, n)?;
            let pcg_r = pair.pcg_clean.slice(0, n)?;
            let ecg_a = pair.ecg.slice(n, n)?;
            let pcg_a = noisy.slice(n, n)?;
            let ecg_b = pair.ecg.slice(2 * n, n)?;
            let pcg_b = noisy.slice(2 * n, n)?;
            let ncfg = NmcseConfig {
                seed,
                ..cfg.nmcse.clone()
            };
            Ok(cfg
                .methods
                .iter()
                .map(|&method| {
                    let run = || -> Result<ConsistencyReport> {
                        let est = |e: &Signal, p: &Signal| estimate_filter(method, e, p, &cfg.deconv, &ncfg);
                        let h_ref = est(&ecg_r, &pcg_r)?;
                        let h_a = est(&ecg_a, &pcg_a)?;
                        let h_b = est(&ecg_b, &pcg_b)?;
                        consistency_eval(&h_ref, &h_a, &h_b)
                    };
                    let (report, error) = match run() {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    ConsistencyRow {
                        method,
                        snr_db,
                        noise_kind,
                        trial,
                        report,
                        error,
                    }
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_cond {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn consistency_csv(rows: &[ConsistencyRow], cfg: &ExperimentConfig) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "# nmcse-consistency schema={CSV_SCHEMA_VERSION} config={}", cfg.fingerprint()?).unwrap();
    s.push_str("method,snr_db,noise_kind,trial,ref_mse,ref_pcc,mutual_mse,mutual_pcc,status\n");
    for r in rows {
        let v = r.report.map(|c| [c.ref_mse, c.ref_pcc, c.mutual_mse, c.mutual_pcc]).unwrap_or([f64::NAN; 4]);
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.snr_db,
            r.noise_kind,
            r.trial,
            v[0],
            v[1],
            v[2],
            v[3],
            csv_escape(r.error.as_deref().unwrap_or("ok")),
        )
        .unwrap();
    }
    Ok(s)
}
