//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 9`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nmcse_core::butterworth::{ButterworthSpec, Sos};
use nmcse_core::experiment::{
    benchmark_csv, median, run_benchmark, run_consistency, ExperimentConfig, Method, Sweep, SweepParam,
};
use nmcse_core::metrics::{band_of, coherence, filter_pcc};
use nmcse_core::nmcse::{self, nmcse_gradient, nmcse_loss, NmcseConfig};
use nmcse_core::ot::{cost_matrix, exact_ot, sinkhorn, CostParams, EmpiricalDistribution, SinkhornConfig};
use nmcse_core::signal::{
    causal_convolve, convolve_direct, convolve_fft, mix_at_snr, snr_db, z_score, FirFilter, Signal,
};
use nmcse_core::synth::{gen_pair, NoiseKind, Notch, SynthSpec};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cloud(n: usize, rng: &mut ChaCha8Rng) -> EmpiricalDistribution {
    EmpiricalDistribution::uniform(
        (0..n)
            .map(|_| (rng.gen::<f64>(), StandardNormal.sample(&mut *rng)))
            .collect(),
    )
    .unwrap()
}

/// 50 seeded instances, ten per size n = m in 2..=6.
fn ot_instances() -> Vec<(EmpiricalDistribution, EmpiricalDistribution)> {
    let mut out = Vec::new();
    for n in 2..=6 {
        for k in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * n as u64 + k);
            out.push((cloud(n, &mut rng), cloud(n, &mut rng)));
        }
    }
    out
}

fn sinkhorn_cfg(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        max_iter: 100_000,
        tol: 1e-12,
        log_domain: true,
    }
}

fn c1_sinkhorn_exact_agreement() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for (a, b) in ot_instances() {
        let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
        let (exact, _) = exact_ot(&a, &b, &c).unwrap();
        let plan = sinkhorn(&a, &b, &c, &sinkhorn_cfg(0.005)).unwrap();
        let gap = (plan.transport_cost - exact).abs();
        let bound = 0.05 * exact + 1e-6;
        worst = worst.max(gap / bound);
        if gap > bound {
            failures += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!("{failures}/50 outside bound, worst gap/bound {worst:.3}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn c2_entropic_monotonicity() -> Outcome {
    let eps = [1.0, 0.1, 0.01, 0.001];
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for (a, b) in ot_instances() {
        let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
        let (exact, _) = exact_ot(&a, &b, &c).unwrap();
        let gaps: Vec<f64> = eps
            .iter()
            .map(|&e| sinkhorn(&a, &b, &c, &sinkhorn_cfg(e)).unwrap().transport_cost - exact)
            .collect();
        for w in gaps.windows(2) {
            worst = worst.max(w[1] - w[0]);
            if w[1] > w[0] + 1e-9 {
                violations += 1;
            }
        }
    }
    ensure(
        violations == 0,
        format!("{violations} increasing steps over 50 instances, largest increase {worst:.3e}"),
    )
}

fn c3_gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let cfg = NmcseConfig {
        n_points: 32,
        sinkhorn: SinkhornConfig {
            epsilon: 0.1,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let spec = SynthSpec {
            seed,
            duration_s: 0.5,
            heart_rate_bpm: 120.0,
            qrs_width_ms: 4.0,
            ..Default::default()
        };
        let p = gen_pair(&spec, Some(10.0), NoiseKind::White).unwrap();
        let ecg = p.ecg.slice(0, 256).unwrap();
        let pcg = p.pcg().slice(0, 256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps: Vec<f64> = p
            .h_true
            .taps()
            .iter()
            .map(|v| v * rng.gen_range(0.3..1.2) + 0.02 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let h = FirFilter::new(taps, 2000.0).unwrap();
        let g = nmcse_gradient(&h, &ecg, &pcg, &cfg).unwrap();
        let step = 1e-4;
        let fd: Vec<f64> = (0..h.len())
            .map(|l| {
                let mut up = h.taps().to_vec();
                let mut dn = h.taps().to_vec();
                up[l] += step;
                dn[l] -= step;
                let f = |t: Vec<f64>| nmcse_loss(&FirFilter::new(t, 2000.0).unwrap(), &ecg, &pcg, &cfg).unwrap();
                (f(up) - f(dn)) / (2.0 * step)
            })
            .collect();
        let num = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    let elapsed = t0.elapsed();
    ensure(
        worst < 1e-2 && elapsed < Duration::from_secs(30),
        format!("worst relative L2 error {worst:.3e} over 10 instances, {:.1} s", elapsed.as_secs_f64()),
    )
}

fn c4_noise_free_identifiability() -> Outcome {
    let t0 = Instant::now();
    let spec = SynthSpec {
        qrs_width_ms: 2.0,
        seed: 4,
        ..Default::default()
    };
    let p = gen_pair(&spec, None, NoiseKind::White).unwrap();
    let cfg = ExperimentConfig::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for m in Method::ALL {
        let h = nmcse_core::experiment::estimate_filter(m, &p.ecg, &p.pcg_clean, &cfg.deconv, &cfg.nmcse).unwrap();
        let pcc = filter_pcc(&h, &p.h_true).unwrap();
        let threshold = if m == Method::Nmcse { 0.95 } else { 0.99 };
        ok &= pcc > threshold;
        parts.push(format!("{m} {pcc:.4}"));
    }
    let elapsed = t0.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    ensure(ok, format!("pcc: {}, {:.1} s", parts.join(", "), elapsed.as_secs_f64()))
}

fn method_medians(
    rows: &[nmcse_core::experiment::BenchmarkRow],
    m: Method,
    pick: fn(&nmcse_core::experiment::BenchmarkRow) -> f64,
) -> f64 {
    median(&rows.iter().filter(|r| r.method == m && r.ok()).map(pick).collect::<Vec<_>>())
}

fn c5_robustness_ordering() -> Outcome {
    let t0 = Instant::now();
    let cfg = ExperimentConfig {
        snr_db_levels: vec![5.0],
        noise_kinds: vec![NoiseKind::HospitalLike],
        n_trials: 20,
        seed: 5,
        ..Default::default()
    };
    let rows = run_benchmark(&cfg).unwrap();
    let mse: Vec<(Method, f64)> = Method::ALL.iter().map(|&m| (m, method_medians(&rows, m, |r| r.mse))).collect();
    let pcc: Vec<(Method, f64)> = Method::ALL.iter().map(|&m| (m, method_medians(&rows, m, |r| r.pcc))).collect();
    let nm_mse = mse[4].1;
    let nm_pcc = pcc[4].1;
    let best_mse = mse[..4].iter().all(|&(_, v)| nm_mse < v);
    let best_pcc = pcc[..4].iter().all(|&(_, v)| nm_pcc > v);
    let elapsed = t0.elapsed();
    let fmt = |v: &[(Method, f64)]| v.iter().map(|(m, x)| format!("{m} {x:.3e}")).collect::<Vec<_>>().join(", ");
    ensure(
        best_mse && best_pcc && elapsed < Duration::from_secs(1800),
        format!(
            "median mse: {}; median pcc: {}; {:.0} s",
            fmt(&mse),
            fmt(&pcc),
            elapsed.as_secs_f64()
        ),
    )
}

fn notch_config(depth_db: f64, methods: Vec<Method>) -> ExperimentConfig {
    ExperimentConfig {
        methods,
        snr_db_levels: vec![10.0],
        noise_kinds: vec![NoiseKind::White],
        n_trials: 20,
        seed: 6,
        // Broadband pulses, so the notch is the only deep spectral null.
        synth: SynthSpec {
            qrs_width_ms: 2.0,
            spectral_notch: Some(Notch {
                center_hz: 100.0,
                width_hz: 20.0,
                depth_db,
            }),
            ..Default::default()
        },
        ..Default::default()
    }
}

fn c6_spectral_null_stress() -> Outcome {
    let rows = run_benchmark(&notch_config(40.0, vec![Method::Naive, Method::Nmcse])).unwrap();
    let naive = method_medians(&rows, Method::Naive, |r| r.mse);
    let nm = method_medians(&rows, Method::Nmcse, |r| r.mse);
    let shallow = method_medians(
        &run_benchmark(&notch_config(20.0, vec![Method::Naive])).unwrap(),
        Method::Naive,
        |r| r.mse,
    );
    let deep = method_medians(
        &run_benchmark(&notch_config(60.0, vec![Method::Naive])).unwrap(),
        Method::Naive,
        |r| r.mse,
    );
    ensure(
        naive >= 5.0 * nm && deep > shallow,
        format!(
            "40 dB notch: naive {naive:.3e} vs nmcse {nm:.3e} (ratio {:.1}); naive at 20 dB {shallow:.3e}, at 60 dB {deep:.3e}",
            naive / nm
        ),
    )
}

fn sweep_medians(param: SweepParam, values: &[f64], base: NmcseConfig) -> Vec<f64> {
    let cfg = ExperimentConfig {
        methods: vec![Method::Nmcse],
        snr_db_levels: vec![10.0],
        noise_kinds: vec![NoiseKind::HospitalLike],
        n_trials: 10,
        seed: 7,
        nmcse: base,
        sweep: Some(Sweep {
            param,
            values: values.to_vec(),
        }),
        ..Default::default()
    };
    let rows = run_benchmark(&cfg).unwrap();
    values
        .iter()
        .map(|&v| median(&rows.iter().filter(|r| r.sweep_value == Some(v) && r.ok()).map(|r| r.mse).collect::<Vec<_>>()))
        .collect()
}

fn c7_parameter_sensitivity() -> Outcome {
    let values = [0.01, 0.1, 0.5, 1.0];
    let mut base = NmcseConfig::default();
    base.cost.beta = 0.1;
    let alpha = sweep_medians(SweepParam::Alpha, &values, base.clone());
    base.cost.alpha = 1.0;
    let beta = sweep_medians(SweepParam::Beta, &values, base);
    let fmt = |v: &[f64]| {
        values.iter().zip(v).map(|(p, m)| format!("{p}: {m:.3e}")).collect::<Vec<_>>().join(", ")
    };
    ensure(
        alpha[0] > alpha[3] && beta[3] > beta[1],
        format!("alpha sweep median mse {{{}}}; beta sweep {{{}}}", fmt(&alpha), fmt(&beta)),
    )
}

fn c8_intra_state_consistency() -> Outcome {
    let cfg = ExperimentConfig {
        snr_db_levels: vec![10.0],
        noise_kinds: vec![NoiseKind::HospitalLike],
        n_trials: 20,
        seed: 8,
        ..Default::default()
    };
    let rows = run_consistency(&cfg).unwrap();
    let med = |m: Method, f: fn(&nmcse_core::metrics::ConsistencyReport) -> f64| {
        median(&rows.iter().filter(|r| r.method == m).filter_map(|r| r.report.as_ref()).map(f).collect::<Vec<_>>())
    };
    let nm_mutual = med(Method::Nmcse, |r| r.mutual_pcc);
    let naive_mutual = med(Method::Naive, |r| r.mutual_pcc);
    let ref_mse: Vec<(Method, f64)> = Method::ALL.iter().map(|&m| (m, med(m, |r| r.ref_mse))).collect();
    let nm_ref = ref_mse[4].1;
    let min_ref = ref_mse[..4].iter().all(|&(_, v)| nm_ref <= v);
    ensure(
        nm_mutual > naive_mutual && min_ref,
        format!(
            "mutual pcc nmcse {nm_mutual:.4} vs naive {naive_mutual:.4}; median ref_mse: {}",
            ref_mse.iter().map(|(m, v)| format!("{m} {v:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn white(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn c9_dsp_suite() -> Outcome {
    let x = white(5000, 1);
    let h = white(64, 2);
    let d = convolve_direct(&x, &h);
    let f = convolve_fft(&x, &h);
    let conv_err = d.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut delta = vec![0.0; 64];
    delta[0] = 1.0;
    let identity = causal_convolve(&x, &delta) == x;
    let sos = Sos::design(&ButterworthSpec::low_pass(4, 100.0), 2000.0).unwrap();
    let gain_db = 20.0 * sos.magnitude(100.0).log10();
    let clean = Signal::new(white(20000, 3), 2000.0).unwrap();
    let noise = Signal::new(white(20000, 4), 2000.0).unwrap();
    let mixed = mix_at_snr(&clean, &noise, 7.5, 9).unwrap();
    let resid: Vec<f64> = mixed.samples().iter().zip(clean.samples()).map(|(m, c)| m - c).collect();
    let snr = snr_db(clean.samples(), &resid);
    let z = z_score(&Signal::new(x.iter().map(|v| 3.0 * v + 2.0).collect(), 2000.0).unwrap()).unwrap();
    let n = z.len() as f64;
    let zm = z.samples().iter().sum::<f64>() / n;
    let zs = (z.samples().iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n).sqrt();
    ensure(
        conv_err < 1e-9 && identity && (gain_db + 3.0).abs() <= 0.5 && (snr - 7.5).abs() <= 0.1 && zm.abs() < 1e-9 && (zs - 1.0).abs() < 1e-9,
        format!(
            "conv max err {conv_err:.2e}, delta identity {identity}, gain at cutoff {gain_db:.3} dB, realized snr {snr:.4} dB, z-score mean {zm:.1e} sd {zs:.12}"
        ),
    )
}

fn c10_coherence_properties() -> Outcome {
    let x = Signal::new(white(40000, 11), 2000.0).unwrap();
    let self_coh = coherence(&x, &x, 8).unwrap();
    let self_dev = self_coh.msc.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max);
    let h: Vec<f64> = nmcse_core::synth::damped_sinusoid(64, 10.0, 100.0, 2000.0);
    let y = Signal::new(causal_convolve(x.samples(), &h), 2000.0).unwrap();
    let lti = coherence(&x, &y, 8).unwrap();
    let hf = FirFilter::new(h, 2000.0).unwrap();
    let gain = |f: f64| {
        let w = 2.0 * std::f64::consts::PI * f / 2000.0;
        let (re, im) = hf.taps().iter().enumerate().fold((0.0, 0.0), |(r, i), (k, c)| {
            (r + c * (w * k as f64).cos(), i - c * (w * k as f64).sin())
        });
        re * re + im * im
    };
    let peak = lti.frequencies_hz.iter().map(|&f| gain(f)).fold(0.0, f64::max);
    let lti_dev = lti
        .frequencies_hz
        .iter()
        .zip(&lti.msc)
        .filter(|(f, _)| gain(**f) > 1e-3 * peak)
        .map(|(_, c)| (c - 1.0).abs())
        .fold(0.0, f64::max);
    let bands = [
        band_of(9.999) == 0,
        band_of(10.0) == 1,
        band_of(100.0) == 1,
        band_of(100.001) == 2,
    ];
    ensure(
        self_dev <= 1e-9 && lti_dev <= 0.05 && bands.iter().all(|&b| b),
        format!("self-coherence max dev {self_dev:.2e}, LTI max dev on powered bins {lti_dev:.4}, band edges {bands:?}"),
    )
}

fn c11_determinism() -> Outcome {
    let cfg = ExperimentConfig {
        snr_db_levels: vec![10.0],
        n_trials: 2,
        seed: 11,
        synth: SynthSpec {
            duration_s: 2.0,
            ..Default::default()
        },
        nmcse: NmcseConfig {
            max_epochs: 10,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| benchmark_csv(&run_benchmark(&cfg).unwrap(), &cfg).unwrap())
    };
    let a = run(1);
    let b = run(1);
    let c = run(3);
    ensure(
        a == b && a == c,
        format!("{} CSV bytes; repeat identical {}, 1 vs 3 threads identical {}", a.len(), a == b, a == c),
    )
}

fn c12_convergence_sanity() -> Outcome {
    let spec = SynthSpec {
        duration_s: 2.0,
        seed: 12,
        ..Default::default()
    };
    let p = gen_pair(&spec, None, NoiseKind::White).unwrap();
    let cfg = NmcseConfig {
        max_epochs: 200,
        early_stop_patience: 200,
        ..Default::default()
    };
    let coupler = nmcse::train(&[(p.ecg.clone(), p.pcg_clean.clone())], &cfg).unwrap();
    let hist = &coupler.loss_history;
    let best_at = |epoch: usize| hist[..epoch.min(hist.len())].iter().copied().fold(f64::INFINITY, f64::min);
    let mut ok = hist.len() >= 200;
    let mut parts = Vec::new();
    for t in [10, 25, 50] {
        let (a, b) = (best_at(t), best_at(4 * t));
        ok &= b <= a;
        parts.push(format!("T={t}: {a:.4e} -> {b:.4e}"));
    }
    ensure(ok, format!("{} epochs; best loss {}", hist.len(), parts.join(", ")))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "sinkhorn vs exact transport", c1_sinkhorn_exact_agreement),
        (2, "entropic monotonicity", c2_entropic_monotonicity),
        (3, "gradient vs finite differences", c3_gradient_correctness),
        (4, "noise-free identifiability", c4_noise_free_identifiability),
        (5, "robustness ordering at 5 dB", c5_robustness_ordering),
        (6, "spectral-null stress", c6_spectral_null_stress),
        (7, "parameter-sensitivity shape", c7_parameter_sensitivity),
        (8, "intra-state consistency", c8_intra_state_consistency),
        (9, "DSP unit suite", c9_dsp_suite),
        (10, "coherence properties", c10_coherence_properties),
        (11, "benchmark determinism", c11_determinism),
        (12, "convergence sanity", c12_convergence_sanity),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id:>2} {name}: PASS ({msg}) [{secs:.1} s]"),
            Err(msg) => {
                println!("criterion {id:>2} {name}: FAIL ({msg}) [{secs:.1} s]");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
