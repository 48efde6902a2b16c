//! Coupling-filter estimation by minimizing entropic transport distances
//! between windows of `conv(ecg, h)` and the observed PCG.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{sinkhorn_with, unit_times, CostParams, Matrix, SinkhornConfig, SinkhornWorkspace};
use crate::signal::{FirFilter, Signal, DEFAULT_TAPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Unit impulse at tap 0.
    ZerosWithUnitTap,
    /// Seeded Gaussian taps with standard deviation `INIT_SCALE`.
    SmallRandom,
}

/// Standard deviation of [`Init::SmallRandom`] taps.
pub const INIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmcseConfig {
    pub cost: CostParams,
    pub sinkhorn: SinkhornConfig,
    pub n_taps: usize,
    /// Samples per transport window; windows overlap by half.
    pub n_points: usize,
    pub learning_rate: f64,
    /// Transport windows per ADAM step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub refine_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init: Init,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for NmcseConfig {
    fn default() -> Self {
        NmcseConfig {
            cost: CostParams::default(),
            sinkhorn: SinkhornConfig::default(),
            n_taps: DEFAULT_TAPS,
            n_points: 8,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            refine_steps: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init: Init::SmallRandom,
            seed: 0,
            early_stop_patience: 20,
        }
    }
}

impl NmcseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        self.cost.validate()?;
        self.sinkhorn.validate()?;
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.n_taps == 0 {
            return bad("n_taps must be >= 1".into());
        }
        if self.n_points == 0 {
            return bad("n_points must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("ADAM betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn initial_filter(&self, sample_rate_hz: f64) -> Result<FirFilter> {
        match self.init {
            Init::ZerosWithUnitTap => FirFilter::delta(self.n_taps, sample_rate_hz),
            Init::SmallRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(7);
                let d = Normal::new(0.0, INIT_SCALE).expect("valid normal");
                FirFilter::new(
                    (0..self.n_taps).map(|_| d.sample(&mut rng)).collect(),
                    sample_rate_hz,
                )
            }
        }
    }
}

/// ADAM optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &NmcseConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Start offsets of half-overlapping windows of `w` samples.
pub fn window_starts(len: usize, w: usize) -> Vec<usize> {
    if len < w {
        return Vec::new();
    }
    let stride = (w / 2).max(1);
    (0..=(len - w) / stride).map(|k| k * stride).collect()
}

struct PairView<'a> {
    x: &'a [f64],
    y: &'a [f64],
}

fn check_pair(ecg: &Signal, pcg: &Signal, cfg: &NmcseConfig) -> Result<()> {
    if ecg.sample_rate_hz() != pcg.sample_rate_hz() {
        return Err(Error::SampleRateMismatch(
            ecg.sample_rate_hz(),
            pcg.sample_rate_hz(),
        ));
    }
    if ecg.len() != pcg.len() {
        return Err(Error::LengthMismatch(ecg.len(), pcg.len()));
    }
    if ecg.len() < cfg.n_points {
        return Err(Error::TooShort {
            needed: cfg.n_points,
            got: ecg.len(),
        });
    }
    Ok(())
}

/// Per-window regularized transport cost and, optionally, its gradient with
/// respect to the taps.
fn window_eval(
    h: &[f64],
    pair: &PairView<'_>,
    start: usize,
    times: &[f64],
    cfg: &NmcseConfig,
    ws: &mut SinkhornWorkspace,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let w = times.len();
    let nt = h.len();
    let yhat: Vec<f64> = (start..start + w)
        .map(|i| {
            let kmax = nt.min(i + 1);
            (0..kmax).map(|k| h[k] * pair.x[i - k]).sum()
        })
        .collect();
    let y = &pair.y[start..start + w];
    let cost = Matrix::from_fn(w, w, |i, j| {
        cfg.cost.amplitude(yhat[i] - y[j]) + cfg.cost.temporal(times[i] - times[j])
    });
    let marg = vec![1.0 / w as f64; w];
    let plan = sinkhorn_with(&marg, &marg, &cost, &cfg.sinkhorn, ws)?;
    let loss = plan.regularized_cost();
    if !with_grad {
        return Ok((loss, Vec::new()));
    }
    let mut grad = vec![0.0; nt];
    for i in 0..w {
        // dL/dyhat_i = sum_j plan_ij * dC_ij/dyhat_i.
        let r: f64 = plan
            .matrix
            .row(i)
            .iter()
            .zip(y)
            .map(|(p, yj)| p * cfg.cost.amplitude_slope(yhat[i] - yj))
            .sum();
        let ii = start + i;
        for (l, g) in grad.iter_mut().enumerate().take(nt.min(ii + 1)) {
            *g += r * pair.x[ii - l];
        }
    }
    Ok((loss, grad))
}

struct Job<'a> {
    pair: &'a PairView<'a>,
    start: usize,
}

/// Mean loss and gradient over `jobs`, reduced in job order.
fn batch_eval(
    h: &[f64],
    jobs: &[Job<'_>],
    times: &[f64],
    cfg: &NmcseConfig,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = jobs
        .par_iter()
        .map_init(SinkhornWorkspace::default, |ws, job| {
            window_eval(h, job.pair, job.start, times, cfg, ws, with_grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; h.len()];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let k = jobs.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    Ok((loss / k, grad))
}

fn all_jobs<'a>(pair: &'a PairView<'a>, cfg: &NmcseConfig) -> Vec<Job<'a>> {
    window_starts(pair.x.len(), cfg.n_points)
        .into_iter()
        .map(|start| Job { pair, start })
        .collect()
}

fn check_filter(h: &FirFilter, cfg: &NmcseConfig) -> Result<()> {
    if h.len() != cfg.n_taps {
        return Err(Error::LengthMismatch(h.len(), cfg.n_taps));
    }
    Ok(())
}

/// Mean over windows of the entropic transport objective between
/// `conv(ecg, h)` and `pcg`.
pub fn nmcse_loss(h: &FirFilter, ecg: &Signal, pcg: &Signal, cfg: &NmcseConfig) -> Result<f64> {
    cfg.validate()?;
    check_pair(ecg, pcg, cfg)?;
    check_filter(h, cfg)?;
    let pair = PairView {
        x: ecg.samples(),
        y: pcg.samples(),
    };
    let times = unit_times(cfg.n_points);
    batch_eval(h.taps(), &all_jobs(&pair, cfg), &times, cfg, false).map(|r| r.0)
}

/// Loss and its envelope gradient with respect to the taps.
pub fn nmcse_loss_and_gradient(
    h: &FirFilter,
    ecg: &Signal,
    pcg: &Signal,
    cfg: &NmcseConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_pair(ecg, pcg, cfg)?;
    check_filter(h, cfg)?;
    let pair = PairView {
        x: ecg.samples(),
        y: pcg.samples(),
    };
    let times = unit_times(cfg.n_points);
    batch_eval(h.taps(), &all_jobs(&pair, cfg), &times, cfg, true)
}

pub fn nmcse_gradient(
    h: &FirFilter,
    ecg: &Signal,
    pcg: &Signal,
    cfg: &NmcseConfig,
) -> Result<Vec<f64>> {
    nmcse_loss_and_gradient(h, ecg, pcg, cfg).map(|r| r.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCoupler {
    pub filter: FirFilter,
    /// Mean mini-batch loss of each epoch.
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
    pub config: NmcseConfig,
}

impl TrainedCoupler {
    pub fn best_loss(&self) -> f64 {
        self.loss_history
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Mini-batch ADAM over the transport windows of all pairs.
///
/// Windows are shuffled each epoch with a seeded generator. The returned
/// filter is the end-of-epoch filter with the lowest epoch loss; training
/// stops after `early_stop_patience` epochs without improvement.
pub fn train(pairs: &[(Signal, Signal)], cfg: &NmcseConfig) -> Result<TrainedCoupler> {
    train_from(pairs, cfg, None)
}

/// As [`train`], warm-started from `init` when given.
pub fn train_from(
    pairs: &[(Signal, Signal)],
    cfg: &NmcseConfig,
    init: Option<&FirFilter>,
) -> Result<TrainedCoupler> {
    cfg.validate()?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one pair is required".into()))?;
    let fs = first.0.sample_rate_hz();
    for (ecg, pcg) in pairs {
        check_pair(ecg, pcg, cfg)?;
        if ecg.sample_rate_hz() != fs {
            return Err(Error::SampleRateMismatch(fs, ecg.sample_rate_hz()));
        }
    }
    let views: Vec<PairView<'_>> = pairs
        .iter()
        .map(|(e, p)| PairView {
            x: e.samples(),
            y: p.samples(),
        })
        .collect();
    let mut jobs: Vec<Job<'_>> = views.iter().flat_map(|v| all_jobs(v, cfg)).collect();
    let times = unit_times(cfg.n_points);
    let start = match init {
        Some(h) => {
            check_filter(h, cfg)?;
            h.clone()
        }
        None => cfg.initial_filter(fs)?,
    };
    let mut h = start.taps().to_vec();
    let mut adam = Adam::new(h.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (f64::INFINITY, h.clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        jobs.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in jobs.chunks(cfg.batch_size) {
            let (loss, grad) = batch_eval(&h, batch, &times, cfg, true)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut h, &grad);
        }
        let epoch_loss = total / jobs.len() as f64;
        history.push(epoch_loss);
        epochs_run = epoch + 1;
        if epoch_loss < best.0 {
            best = (epoch_loss, h.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if history.is_empty() {
        // Zero epochs: report the starting loss.
        let (loss, _) = batch_eval(&h, &jobs, &times, cfg, false)?;
        history.push(loss);
        best.1 = h;
    }
    Ok(TrainedCoupler {
        filter: FirFilter::new(best.1, fs)?,
        loss_history: history,
        epochs_run,
        config: cfg.clone(),
    })
}

/// Per-pair adaptation: up to `refine_steps` full-batch ADAM steps from the
/// coupler's filter, returning the lowest-loss iterate (the warm start
/// included).
pub fn refine(
    coupler: &TrainedCoupler,
    ecg: &Signal,
    pcg: &Signal,
    cfg: &NmcseConfig,
) -> Result<FirFilter> {
    if cfg.refine_steps == 0 {
        return Ok(coupler.filter.clone());
    }
    cfg.validate()?;
    check_pair(ecg, pcg, cfg)?;
    check_filter(&coupler.filter, cfg)?;
    let pair = PairView {
        x: ecg.samples(),
        y: pcg.samples(),
    };
    let jobs = all_jobs(&pair, cfg);
    let times = unit_times(cfg.n_points);
    let mut h = coupler.filter.taps().to_vec();
    let mut adam = Adam::new(h.len(), cfg);
    let mut best = (f64::INFINITY, h.clone());
    for step in 0..=cfg.refine_steps {
        let last = step == cfg.refine_steps;
        let (loss, grad) = batch_eval(&h, &jobs, &times, cfg, !last)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: step });
        }
        if loss < best.0 {
            best = (loss, h.clone());
        }
        if !last {
            adam.step(&mut h, &grad);
        }
    }
    FirFilter::new(best.1, ecg.sample_rate_hz())
}
