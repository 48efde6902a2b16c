use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nmcse_core::deconv::DeconvConfig;
use nmcse_core::error::Error as CoreError;
use nmcse_core::experiment::{
    self, benchmark_csv, consistency_csv, median, summarize, timing_csv, ExperimentConfig, Method, Sweep,
    SweepParam,
};
use nmcse_core::io::{self as nio, FilterFile, InputHash};
use nmcse_core::metrics::{consistency_eval, filter_coherence, filter_mse, filter_pcc, BandMeans, ConsistencyReport};
use nmcse_core::nmcse::{self, NmcseConfig};
use nmcse_core::preprocess::{preprocess_pair, PreprocessConfig};
use nmcse_core::signal::{FirFilter, Signal};
use nmcse_core::synth::{gen_pair, FilterFamily, NoiseKind, Notch, SynthSpec};

const THREADS_ENV: &str = "NMCSE_THREADS";

#[derive(Parser)]
#[command(name = "nmcse", version, about = "ECG-to-PCG coupling filter estimation")]
struct Cli {
    /// Worker threads (default: $NMCSE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ECG/PCG pair with a known coupling filter.
    Synth(SynthArgs),
    /// Estimate a coupling filter from one ECG/PCG pair.
    Estimate(EstimateArgs),
    /// Train an NMCSE coupler on one or more pairs.
    Train(TrainArgs),
    /// Adapt a trained coupler to one pair.
    Refine(RefineArgs),
    /// Compare estimated filters with a reference.
    Evaluate(EvaluateArgs),
    /// Seeded Monte Carlo benchmark over methods, SNR levels and noise kinds.
    Benchmark(RunArgs),
    /// Intra-state consistency runs over windows of synthetic recordings.
    Consistency(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long = "fs", default_value_t = 2000.0)]
    sample_rate: f64,
    #[arg(long, default_value_t = 60.0)]
    hr: f64,
    #[arg(long = "qrs-ms", default_value_t = 8.0)]
    qrs_ms: f64,
    #[arg(long, default_value = "damped_sinusoid")]
    family: FilterFamily,
    /// Spectral notch as center_hz:width_hz:depth_db.
    #[arg(long)]
    notch: Option<Notch>,
    /// SNR of the noisy PCG in dB; omitted means noise-free.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value = "hospital_like")]
    noise: NoiseKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct Overrides {
    /// JSON file with `deconv`, `nmcse` and `preprocess` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample rate for CSV inputs.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    skip_preprocess: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    ecg: PathBuf,
    #[arg(long)]
    pcg: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// ECG files; paired in order with `--pcg`.
    #[arg(long, required = true)]
    ecg: Vec<PathBuf>,
    #[arg(long, required = true)]
    pcg: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Args)]
struct RefineArgs {
    /// Coupler written by `train`.
    #[arg(long)]
    filter: PathBuf,
    #[arg(long)]
    ecg: PathBuf,
    #[arg(long)]
    pcg: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    o: Overrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference filter JSON, or a synth manifest (uses its `h_true`).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Second estimate; adds reference and mutual consistency metrics.
    #[arg(long)]
    second: Option<PathBuf>,
    /// ECG excitation for mid-band coherence.
    #[arg(long)]
    ecg: Option<PathBuf>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    snr: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<NoiseKind>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    /// Sweep an NMCSE parameter: alpha, beta or epsilon.
    #[arg(long, requires = "sweep_values")]
    sweep_param: Option<String>,
    #[arg(long, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
    #[arg(long, short, default_value = ".")]
    out_dir: PathBuf,
}

/// Estimation settings read from a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PipelineConfig {
    deconv: DeconvConfig,
    nmcse: NmcseConfig,
    preprocess: PreprocessConfig,
    skip_preprocess: bool,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(CoreError::from).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .map_err(CoreError::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(CoreError::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn pipeline(o: &Overrides) -> Result<PipelineConfig> {
    let mut p: PipelineConfig = match &o.config {
        Some(path) => read_json(path)?,
        None => PipelineConfig::default(),
    };
    if o.skip_preprocess {
        p.skip_preprocess = true;
    }
    if let Some(v) = o.lambda {
        p.deconv.lambda = v;
    }
    if let Some(v) = o.gamma {
        p.deconv.gamma = v;
    }
    if let Some(v) = o.alpha {
        p.nmcse.cost.alpha = v;
    }
    if let Some(v) = o.beta {
        p.nmcse.cost.beta = v;
    }
    if let Some(v) = o.epsilon {
        p.nmcse.sinkhorn.epsilon = v;
    }
    if let Some(v) = o.n_points {
        p.nmcse.n_points = v;
    }
    if let Some(v) = o.epochs {
        p.nmcse.max_epochs = v;
    }
    if let Some(v) = o.lr {
        p.nmcse.learning_rate = v;
    }
    if let Some(v) = o.seed {
        p.nmcse.seed = v;
    }
    p.deconv.validate()?;
    p.nmcse.validate()?;
    Ok(p)
}

fn load_signal(path: &Path, rate: Option<f64>) -> Result<Signal> {
    nio::read_signal(path, rate).with_context(|| format!("reading {}", path.display()))
}

fn input_hashes(paths: &[&Path]) -> Result<Vec<InputHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: nio::file_sha256(p).with_context(|| format!("hashing {}", p.display()))?,
            })
        })
        .collect()
}

fn load_pair(ecg: &Path, pcg: &Path, p: &PipelineConfig, rate: Option<f64>) -> Result<(Signal, Signal)> {
    let e = load_signal(ecg, rate)?;
    let s = load_signal(pcg, rate)?;
    if p.skip_preprocess {
        Ok((e, s))
    } else {
        Ok(preprocess_pair(&e, &s, &p.preprocess)?)
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    method: &'a str,
    pipeline: &'a PipelineConfig,
}

fn filter_file(h: &FirFilter, method: &str, p: &PipelineConfig, inputs: &[&Path]) -> Result<FilterFile> {
    let mut f = FilterFile::new(h, method, &Provenance { method, pipeline: p })?;
    f.inputs = input_hashes(inputs)?;
    Ok(f)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        duration_s: a.duration,
        sample_rate_hz: a.sample_rate,
        heart_rate_bpm: a.hr,
        qrs_width_ms: a.qrs_ms,
        filter_family: a.family,
        spectral_notch: a.notch,
        seed: a.seed,
    };
    spec.validate()?;
    let pair = gen_pair(&spec, a.snr, a.noise)?;
    fs::create_dir_all(&a.out)
        .map_err(CoreError::from)
        .with_context(|| format!("creating {}", a.out.display()))?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        config_fingerprint: String,
        spec: &'a SynthSpec,
        snr_db: Option<f64>,
        noise_kind: Option<NoiseKind>,
        h_true: &'a [f64],
        sample_rate_hz: f64,
        files: Vec<String>,
    }
    #[derive(Serialize)]
    struct Key<'a> {
        spec: &'a SynthSpec,
        snr_db: Option<f64>,
        noise_kind: Option<NoiseKind>,
    }
    let noise_kind = a.snr.map(|_| a.noise);
    let fp = nio::fingerprint(&Key {
        spec: &spec,
        snr_db: a.snr,
        noise_kind,
    })?;
    let label = format!("synth:{fp}");
    let mut files = Vec::new();
    let mut put = |name: &str, s: &Signal, channel: &str| -> Result<()> {
        let path = a.out.join(name);
        nio::write_signal(&path, s, &label, channel).with_context(|| format!("writing {}", path.display()))?;
        files.push(name.to_string());
        Ok(())
    };
    put("ecg.f32", &pair.ecg, "ecg")?;
    put("pcg_clean.f32", &pair.pcg_clean, "pcg")?;
    if let Some(noisy) = &pair.pcg_noisy {
        put("pcg_noisy.f32", noisy, "pcg")?;
    }
    let manifest = Manifest {
        config_fingerprint: fp,
        spec: &spec,
        snr_db: a.snr,
        noise_kind,
        h_true: pair.h_true.taps(),
        sample_rate_hz: spec.sample_rate_hz,
        files,
    };
    write_file(&a.out.join("manifest.json"), &nio::to_json_pretty(&manifest)?)
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let p = pipeline(&a.o)?;
    let (ecg, pcg) = load_pair(&a.ecg, &a.pcg, &p, a.o.rate)?;
    let mut history = Vec::new();
    let h = match a.method.deconv() {
        Some(_) => experiment::estimate_filter(a.method, &ecg, &pcg, &p.deconv, &p.nmcse)
            .with_context(|| format!("method {}", a.method))?,
        None => {
            let coupler = nmcse::train(&[(ecg.clone(), pcg.clone())], &p.nmcse).context("method nmcse")?;
            history = coupler.loss_history.clone();
            nmcse::refine(&coupler, &ecg, &pcg, &p.nmcse).context("method nmcse")?
        }
    };
    let mut f = filter_file(&h, a.method.name(), &p, &[&a.ecg, &a.pcg])?;
    f.loss_history = history;
    f.write(&a.out).with_context(|| format!("writing {}", a.out.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.ecg.len() != a.pcg.len() {
        bail!(CoreError::InvalidParameter(format!(
            "{} --ecg files but {} --pcg files",
            a.ecg.len(),
            a.pcg.len()
        )));
    }
    let p = pipeline(&a.o)?;
    let pairs = a
        .ecg
        .iter()
        .zip(&a.pcg)
        .map(|(e, s)| load_pair(e, s, &p, a.o.rate))
        .collect::<Result<Vec<_>>>()?;
    let coupler = nmcse::train(&pairs, &p.nmcse).context("method nmcse")?;
    let inputs: Vec<&Path> = a.ecg.iter().chain(&a.pcg).map(PathBuf::as_path).collect();
    let mut f = filter_file(&coupler.filter, "nmcse", &p, &inputs)?;
    f.loss_history = coupler.loss_history;
    f.write(&a.out).with_context(|| format!("writing {}", a.out.display()))
}

fn cmd_refine(a: &RefineArgs) -> Result<()> {
    let p = pipeline(&a.o)?;
    let trained = FilterFile::read(&a.filter).with_context(|| format!("reading {}", a.filter.display()))?;
    let (ecg, pcg) = load_pair(&a.ecg, &a.pcg, &p, a.o.rate)?;
    let coupler = nmcse::TrainedCoupler {
        filter: trained.filter()?,
        loss_history: trained.loss_history.clone(),
        epochs_run: trained.loss_history.len(),
        config: p.nmcse.clone(),
    };
    let h = nmcse::refine(&coupler, &ecg, &pcg, &p.nmcse).context("method nmcse")?;
    let mut f = filter_file(&h, "nmcse", &p, &[&a.filter, &a.ecg, &a.pcg])?;
    f.loss_history = trained.loss_history;
    f.write(&a.out).with_context(|| format!("writing {}", a.out.display()))
}

/// Reads a filter JSON or the `h_true` of a synth manifest.
fn load_filter(path: &Path) -> Result<FirFilter> {
    let v: serde_json::Value = read_json(path)?;
    if let Some(h) = v.get("h_true") {
        let taps: Vec<f64> = serde_json::from_value(h.clone()).map_err(CoreError::from)?;
        let fs_hz = v
            .get("sample_rate_hz")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| CoreError::InvalidParameter(format!("{}: manifest lacks sample_rate_hz", path.display())))?;
        return Ok(FirFilter::new(taps, fs_hz)?);
    }
    let f: FilterFile = serde_json::from_value(v).map_err(CoreError::from)?;
    Ok(f.filter()?)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Report {
        mse: f64,
        pcc: f64,
        coherence: Option<BandMeans>,
        consistency: Option<ConsistencyReport>,
        inputs: Vec<InputHash>,
    }
    let h_ref = load_filter(&a.reference)?;
    let h_est = load_filter(&a.estimate)?;
    let coherence = match &a.ecg {
        Some(path) => Some(filter_coherence(&load_signal(path, a.rate)?, &h_ref, &h_est)?.band_means),
        None => None,
    };
    let consistency = match &a.second {
        Some(path) => Some(consistency_eval(&h_ref, &h_est, &load_filter(path)?)?),
        None => None,
    };
    let mut inputs: Vec<&Path> = vec![&a.reference, &a.estimate];
    inputs.extend(a.second.as_deref());
    inputs.extend(a.ecg.as_deref());
    let report = Report {
        mse: filter_mse(&h_est, &h_ref)?,
        pcc: filter_pcc(&h_est, &h_ref)?,
        coherence,
        consistency,
        inputs: input_hashes(&inputs)?,
    };
    let text = nio::to_json_pretty(&report)?;
    match &a.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut c: ExperimentConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &a.methods {
        c.methods = v.clone();
    }
    if let Some(v) = &a.snr {
        c.snr_db_levels = v.clone();
    }
    if let Some(v) = &a.noise {
        c.noise_kinds = v.clone();
    }
    if let Some(v) = a.trials {
        c.n_trials = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.duration {
        c.synth.duration_s = v;
    }
    if let (Some(name), Some(values)) = (&a.sweep_param, &a.sweep_values) {
        let param = match name.as_str() {
            "alpha" => SweepParam::Alpha,
            "beta" => SweepParam::Beta,
            "epsilon" => SweepParam::Epsilon,
            other => bail!(CoreError::InvalidParameter(format!("unknown sweep parameter {other:?}"))),
        };
        c.sweep = Some(Sweep {
            param,
            values: values.clone(),
        });
    }
    c.validate()?;
    Ok(c)
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(CoreError::from)
        .with_context(|| format!("creating {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into())
}

fn cmd_benchmark(a: &RunArgs) -> Result<()> {
    let cfg = experiment_config(a)?;
    create_out_dir(&a.out_dir)?;
    let rows = experiment::run_benchmark(&cfg)?;
    write_file(&a.out_dir.join("results.csv"), &benchmark_csv(&rows, &cfg)?)?;
    write_file(&a.out_dir.join("timing.csv"), &timing_csv(&rows, &cfg)?)?;
    let summary = summarize(&rows, &cfg)?;
    write_file(&a.out_dir.join("summary.json"), &nio::to_json_pretty(&summary)?)?;
    println!("{:<8} {:>8} {:<14} {:<10} {:>12} {:>10} {:>8}", "sweep", "snr_db", "noise", "method", "median_mse", "median_pcc", "failed");
    for g in &summary.groups {
        println!(
            "{:<8} {:>8} {:<14} {:<10} {:>12} {:>10} {:>8}",
            g.sweep_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            g.snr_db,
            g.noise_kind.to_string(),
            g.method.name(),
            fmt_opt(g.median_mse),
            g.median_pcc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            g.n_failed
        );
    }
    Ok(())
}

fn cmd_consistency(a: &RunArgs) -> Result<()> {
    let cfg = experiment_config(a)?;
    create_out_dir(&a.out_dir)?;
    let rows = experiment::run_consistency(&cfg)?;
    write_file(&a.out_dir.join("consistency.csv"), &consistency_csv(&rows, &cfg)?)?;
    println!(
        "{:>8} {:<14} {:<10} {:>12} {:>10} {:>12} {:>10}",
        "snr_db", "noise", "method", "ref_mse", "ref_pcc", "mutual_mse", "mutual_pcc"
    );
    for &snr in &cfg.snr_db_levels {
        for &noise in &cfg.noise_kinds {
            for &m in &cfg.methods {
                let reps: Vec<ConsistencyReport> = rows
                    .iter()
                    .filter(|r| r.method == m && r.snr_db == snr && r.noise_kind == noise)
                    .filter_map(|r| r.report)
                    .collect();
                let med = |f: fn(&ConsistencyReport) -> f64| median(&reps.iter().map(f).collect::<Vec<_>>());
                println!(
                    "{:>8} {:<14} {:<10} {:>12.4e} {:>10.4} {:>12.4e} {:>10.4}",
                    snr,
                    noise.to_string(),
                    m.name(),
                    med(|r| r.ref_mse),
                    med(|r| r.ref_pcc),
                    med(|r| r.mutual_mse),
                    med(|r| r.mutual_pcc)
                );
            }
        }
    }
    Ok(())
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CoreError::InvalidParameter(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!(CoreError::InvalidParameter("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CoreError::InvalidParameter(e.to_string()))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Io(_) => 3,
                CoreError::NumericalOverflow
                | CoreError::Divergence { .. }
                | CoreError::DegenerateExcitation
                | CoreError::NonFinite(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Estimate(a) => cmd_estimate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Refine(a) => cmd_refine(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Benchmark(a) => cmd_benchmark(a),
        Cmd::Consistency(a) => cmd_consistency(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
