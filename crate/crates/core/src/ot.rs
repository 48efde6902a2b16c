//! Entropic optimal transport between weighted point clouds in
//! (normalized time, amplitude) space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `n` accepted by [`exact_ot`].
pub const EXACT_OT_MAX: usize = 9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        s
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Weighted point cloud of `(t, y)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    points: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(points: Vec<(f64, f64)>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySignal);
        }
        if points.len() != weights.len() {
            return Err(Error::LengthMismatch(points.len(), weights.len()));
        }
        if let Some(i) = points
            .iter()
            .position(|(t, y)| !t.is_finite() || !y.is_finite())
        {
            return Err(Error::NonFinite(i));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(EmpiricalDistribution { points, weights })
    }

    /// Uniform weights over the given points.
    pub fn uniform(points: Vec<(f64, f64)>) -> Result<Self> {
        let n = points.len().max(1);
        let weights = vec![1.0 / n as f64; points.len()];
        Self::new(points, weights)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|v| (v - w).abs() < 1e-12)
    }
}

/// Times for `n` points mapped affinely onto `[0, 1]`.
pub fn unit_times(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    let d = (n - 1) as f64;
    (0..n).map(|i| i as f64 / d).collect()
}

/// Sample indices picked by uniform-stride subsampling of `len` samples.
pub fn subsample_indices(len: usize, n_points: usize) -> Vec<usize> {
    (0..n_points).map(|i| i * len / n_points).collect()
}

/// Uniform-weight cloud from `n_points` evenly strided samples of `window`.
pub fn build_distribution(window: &[f64], n_points: usize) -> Result<EmpiricalDistribution> {
    if window.is_empty() {
        return Err(Error::EmptySignal);
    }
    if n_points == 0 || n_points > window.len() {
        return Err(Error::InvalidParameter(format!(
            "n_points must be in 1..={}, got {n_points}",
            window.len()
        )));
    }
    let idx = subsample_indices(window.len(), n_points);
    let points = unit_times(n_points)
        .into_iter()
        .zip(idx)
        .map(|(t, i)| (t, window[i]))
        .collect();
    EmpiricalDistribution::uniform(points)
}

/// Ground cost `alpha |dy|^p + beta |dt|^q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
    pub q: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            alpha: 1.0,
            beta: 0.1,
            p: 2.0,
            q: 2.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta > 0.0
            && self.p > 0.0
            && self.q > 0.0
            && [self.alpha, self.beta, self.p, self.q]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad cost params {self:?}")))
        }
    }

    pub fn amplitude(&self, d: f64) -> f64 {
        self.alpha * pow_abs(d, self.p)
    }

    pub fn temporal(&self, d: f64) -> f64 {
        self.beta * pow_abs(d, self.q)
    }

    /// Derivative of the amplitude term with respect to the source amplitude.
    pub fn amplitude_slope(&self, d: f64) -> f64 {
        if d == 0.0 && self.p <= 1.0 {
            return 0.0;
        }
        let mag = if self.p == 2.0 {
            2.0 * d.abs()
        } else {
            self.p * d.abs().powf(self.p - 1.0)
        };
        self.alpha * mag * d.signum()
    }
}

fn pow_abs(d: f64, e: f64) -> f64 {
    if e == 2.0 {
        d * d
    } else if e == 1.0 {
        d.abs()
    } else {
        d.abs().powf(e)
    }
}

pub fn cost_matrix(
    src: &EmpiricalDistribution,
    dst: &EmpiricalDistribution,
    params: &CostParams,
) -> Result<Matrix> {
    params.validate()?;
    Ok(Matrix::from_fn(src.len(), dst.len(), |i, j| {
        let (ti, yi) = src.points[i];
        let (tj, yj) = dst.points[j];
        params.amplitude(yi - yj) + params.temporal(ti - tj)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stopping threshold on the L1 marginal violation.
    pub tol: f64,
    /// Use absorption-stabilized scaling; the plain kernel underflows for
    /// small `epsilon`.
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iter: 1000,
            tol: 1e-8,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// `<plan, cost>`.
    pub transport_cost: f64,
    /// `-sum plan * ln(plan)`.
    pub entropy: f64,
    /// L1 row-marginal violation at exit; columns are matched exactly.
    pub marginal_error: f64,
    pub epsilon: f64,
}

impl TransportPlan {
    /// Entropy-regularized objective `<plan, cost> - epsilon * entropy`.
    /// Its derivative with respect to any cost entry is the plan entry.
    pub fn regularized_cost(&self) -> f64 {
        self.transport_cost - self.epsilon * self.entropy
    }
}

fn entropy(m: &Matrix) -> f64 {
    -m.as_slice()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Reusable buffers so repeated solves do not allocate.
#[derive(Debug, Default, Clone)]
pub struct SinkhornWorkspace {
    kernel: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    kv: Vec<f64>,
    ktu: Vec<f64>,
}

pub fn sinkhorn(
    src: &EmpiricalDistribution,
    dst: &EmpiricalDistribution,
    cost: &Matrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    sinkhorn_with(src.weights(), dst.weights(), cost, cfg, &mut SinkhornWorkspace::default())
}

/// Sinkhorn scaling on raw marginals `a`, `b`.
///
/// In log-domain mode the duals start from the c-transform of the cost, so
/// every kernel entry is at most 1 and each row and column holds an entry
/// equal to 1. Scalings are absorbed into the duals whenever they leave
/// `[1e-50, 1e50]`.
pub fn sinkhorn_with(
    a: &[f64],
    b: &[f64],
    cost: &Matrix,
    cfg: &SinkhornConfig,
    ws: &mut SinkhornWorkspace,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch {
            expected: (a.len(), b.len()),
            got: (n, m),
        });
    }
    if let Some(i) = cost.as_slice().iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let eps = cfg.epsilon;
    let c = cost.as_slice();
    ws.f.clear();
    ws.f.resize(n, 0.0);
    ws.g.clear();
    ws.g.resize(m, 0.0);
    if cfg.log_domain {
        for i in 0..n {
            ws.f[i] = cost.row(i).iter().cloned().fold(f64::INFINITY, f64::min);
        }
        for j in 0..m {
            let mut mn = f64::INFINITY;
            for i in 0..n {
                mn = mn.min(c[i * m + j] - ws.f[i]);
            }
            ws.g[j] = mn;
        }
    }
    ws.kernel.resize(n * m, 0.0);
    ws.u.clear();
    ws.u.resize(n, 1.0);
    ws.v.clear();
    ws.v.resize(m, 1.0);
    ws.kv.resize(n, 0.0);
    ws.ktu.resize(m, 0.0);

    // Small epsilon converges very slowly from a cold start, so the duals
    // are first solved at geometrically larger epsilon and carried down.
    let mut iterations = 0;
    if cfg.log_domain {
        let spread = cost.max() - c.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut stage = eps;
        let mut stages = Vec::new();
        while stage * ANNEAL_FACTOR < 0.25 * spread {
            stage *= ANNEAL_FACTOR;
            stages.push(stage);
        }
        for &e in stages.iter().rev() {
            rebuild_kernel(ws, c, n, m, e);
            let budget = ANNEAL_STAGE_ITERS.min(cfg.max_iter.saturating_sub(iterations));
            let (it, _, _) = scale(ws, a, b, c, n, m, e, cfg.tol.max(1e-6), budget, true)?;
            iterations += it;
            absorb(ws, e);
        }
    }
    rebuild_kernel(ws, c, n, m, eps);
    let budget = cfg.max_iter.saturating_sub(iterations);
    let (it, err, converged) = scale(ws, a, b, c, n, m, eps, cfg.tol, budget, cfg.log_domain)?;
    iterations += it;
    let matrix = Matrix::from_fn(n, m, |i, j| ws.u[i] * ws.kernel[i * m + j] * ws.v[j]);
    if matrix.as_slice().iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    let transport_cost = matrix.dot(cost);
    let entropy = entropy(&matrix);
    Ok(TransportPlan {
        matrix,
        converged,
        iterations,
        transport_cost,
        entropy,
        marginal_error: err,
        epsilon: eps,
    })
}

const ANNEAL_FACTOR: f64 = 4.0;
const ANNEAL_STAGE_ITERS: usize = 200;

fn absorb(ws: &mut SinkhornWorkspace, eps: f64) {
    for (f, u) in ws.f.iter_mut().zip(ws.u.iter_mut()) {
        *f += eps * u.ln();
        *u = 1.0;
    }
    for (g, v) in ws.g.iter_mut().zip(ws.v.iter_mut()) {
        *g += eps * v.ln();
        *v = 1.0;
    }
}

/// Alternating scaling updates; returns (iterations, row violation, converged).
#[allow(clippy::too_many_arguments)]
fn scale(
    ws: &mut SinkhornWorkspace,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    n: usize,
    m: usize,
    eps: f64,
    tol: f64,
    max_iter: usize,
    log_domain: bool,
) -> Result<(usize, f64, bool)> {
    let bad = |x: &f64| !x.is_finite() || *x == 0.0;
    let out = |x: &f64| !(1e-50..=1e50).contains(x);
    let mut iterations = 0;
    loop {
        matvec(&ws.kernel, &ws.v, &mut ws.kv, n, m);
        let err: f64 = (0..n).map(|i| (ws.u[i] * ws.kv[i] - a[i]).abs()).sum();
        if (iterations > 0 && err < tol) || iterations >= max_iter {
            return Ok((iterations, err, err < tol));
        }
        for i in 0..n {
            ws.u[i] = a[i] / ws.kv[i];
        }
        matvec_t(&ws.kernel, &ws.u, &mut ws.ktu, n, m);
        for j in 0..m {
            ws.v[j] = b[j] / ws.ktu[j];
        }
        iterations += 1;
        if ws.u.iter().any(bad) || ws.v.iter().any(bad) {
            return Err(Error::NumericalOverflow);
        }
        if log_domain && (ws.u.iter().any(out) || ws.v.iter().any(out)) {
            absorb(ws, eps);
            rebuild_kernel(ws, c, n, m, eps);
        }
    }
}

fn rebuild_kernel(ws: &mut SinkhornWorkspace, c: &[f64], n: usize, m: usize, eps: f64) {
    let inv = 1.0 / eps;
    for i in 0..n {
        let fi = ws.f[i];
        let row = &mut ws.kernel[i * m..(i + 1) * m];
        for j in 0..m {
            row[j] = ((fi + ws.g[j] - c[i * m + j]) * inv).exp();
        }
    }
}

fn matvec(k: &[f64], v: &[f64], out: &mut [f64], n: usize, m: usize) {
    for i in 0..n {
        out[i] = k[i * m..(i + 1) * m]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

fn matvec_t(k: &[f64], u: &[f64], out: &mut [f64], n: usize, m: usize) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..n {
        let ui = u[i];
        for (o, kij) in out.iter_mut().zip(&k[i * m..(i + 1) * m]) {
            *o += kij * ui;
        }
    }
}

/// Exact OT between equal-size uniform clouds by exhaustive search over
/// permutations (Heap's algorithm). Returns the cost and the optimal
/// assignment `i -> sigma[i]`.
pub fn exact_ot(
    src: &EmpiricalDistribution,
    dst: &EmpiricalDistribution,
    cost: &Matrix,
) -> Result<(f64, Vec<usize>)> {
    let n = src.len();
    if n != dst.len() || cost.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: (n, n),
            got: cost.shape(),
        });
    }
    if n > EXACT_OT_MAX {
        return Err(Error::TooLarge {
            n,
            max: EXACT_OT_MAX,
        });
    }
    if !src.is_uniform() || !dst.is_uniform() {
        return Err(Error::InvalidParameter(
            "exact transport requires uniform weights".into(),
        ));
    }
    let score = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| cost.get(i, j))
            .sum::<f64>()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = score(&perm);
    let mut best_perm = perm.clone();
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            let s = score(&perm);
            if s < best {
                best = s;
                best_perm.copy_from_slice(&perm);
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64, best_perm))
}

/// Envelope gradient: `grad[l] = sum_ij plan_ij * dC_ij/dtheta_l`.
pub fn plan_weighted_cost_gradient(
    plan: &TransportPlan,
    grad_cost_wrt_param: &[Matrix],
) -> Result<Vec<f64>> {
    grad_cost_wrt_param
        .iter()
        .map(|g| {
            if g.shape() != plan.matrix.shape() {
                Err(Error::ShapeMismatch {
                    expected: plan.matrix.shape(),
                    got: g.shape(),
                })
            } else {
                Ok(plan.matrix.dot(g))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> EmpiricalDistribution {
        let pts = (0..n)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(-2.0..2.0)))
            .collect();
        EmpiricalDistribution::uniform(pts).unwrap()
    }

    /// Independent exhaustive search: lexicographic recursion.
    fn brute_force(cost: &Matrix) -> f64 {
        fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.rows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
        best / cost.rows() as f64
    }

    #[test]
    fn distribution_construction() {
        let w: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let d = build_distribution(&w, 256).unwrap();
        assert_eq!(d.len(), 256);
        assert!((d.points()[1].0 - 1.0 / 255.0).abs() < 1e-15);
        assert_eq!(d.points()[17].1, 17.0);

        let w: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        let d = build_distribution(&w, 200).unwrap();
        assert_eq!(d.points()[3].1, 30.0);
        assert!(d.weights().iter().all(|&x| (x - 0.005).abs() < 1e-15));
        assert!((d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d.points().last().unwrap().0, 1.0);
    }

    #[test]
    fn cost_examples() {
        let p = CostParams::default();
        let a = EmpiricalDistribution::uniform(vec![(0.5, 1.0)]).unwrap();
        let b = EmpiricalDistribution::uniform(vec![(0.5, 0.0)]).unwrap();
        assert_eq!(cost_matrix(&a, &b, &p).unwrap().get(0, 0), 1.0);
        let a = EmpiricalDistribution::uniform(vec![(0.0, 2.0)]).unwrap();
        let b = EmpiricalDistribution::uniform(vec![(1.0, 0.0)]).unwrap();
        assert!((cost_matrix(&a, &b, &p).unwrap().get(0, 0) - 4.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cloud(&mut rng, 5);
        let m = cost_matrix(&c, &c, &p).unwrap();
        for i in 0..5 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..5 {
                assert!(m.get(i, j) >= 0.0);
                if i != j {
                    assert!(m.get(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn single_point_plan() {
        let a = EmpiricalDistribution::uniform(vec![(0.0, 0.3)]).unwrap();
        let b = EmpiricalDistribution::uniform(vec![(1.0, -0.2)]).unwrap();
        let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
        let plan = sinkhorn(&a, &b, &c, &SinkhornConfig::default()).unwrap();
        assert!((plan.matrix.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((plan.transport_cost - c.get(0, 0)).abs() < 1e-12);
        assert!(plan.converged);
    }

    #[test]
    fn small_epsilon_concentrates_on_diagonal() {
        let a = EmpiricalDistribution::uniform(vec![(0.0, 0.0), (1.0, 1.0)]).unwrap();
        let c = cost_matrix(&a, &a, &CostParams::default()).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            ..Default::default()
        };
        let plan = sinkhorn(&a, &a, &c, &cfg).unwrap();
        let off = plan.matrix.get(0, 1) + plan.matrix.get(1, 0);
        assert!(off < 0.01, "{off}");
    }

    #[test]
    fn huge_epsilon_gives_product_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cloud(&mut rng, 4);
        let b = cloud(&mut rng, 6);
        let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 1e6,
            ..Default::default()
        };
        let plan = sinkhorn(&a, &b, &c, &cfg).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert!((plan.matrix.get(i, j) - 1.0 / 24.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn matches_exact_on_five_points() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 5);
            let b = cloud(&mut rng, 5);
            let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
            let cfg = SinkhornConfig {
                epsilon: 0.005,
                ..Default::default()
            };
            let plan = sinkhorn(&a, &b, &c, &cfg).unwrap();
            let (exact, _) = exact_ot(&a, &b, &c).unwrap();
            assert!(
                (plan.transport_cost - exact).abs() <= 0.05 * exact + 1e-6,
                "seed {seed}: {} vs {exact}",
                plan.transport_cost
            );
        }
    }

    #[test]
    fn plain_kernel_overflow_is_reported() {
        let a = EmpiricalDistribution::uniform(vec![(0.0, 0.0), (1.0, 3.0)]).unwrap();
        let b = EmpiricalDistribution::uniform(vec![(0.0, 10.0), (1.0, 12.0)]).unwrap();
        let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
        let cfg = SinkhornConfig {
            epsilon: 0.001,
            log_domain: false,
            ..Default::default()
        };
        assert!(matches!(
            sinkhorn(&a, &b, &c, &cfg),
            Err(Error::NumericalOverflow)
        ));
        let cfg = SinkhornConfig {
            log_domain: true,
            ..cfg
        };
        assert!(sinkhorn(&a, &b, &c, &cfg).unwrap().converged);
    }

    #[test]
    fn exact_ot_examples() {
        let a = EmpiricalDistribution::uniform(vec![(0.2, 0.7)]).unwrap();
        let b = EmpiricalDistribution::uniform(vec![(0.9, 0.1)]).unwrap();
        let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
        assert_eq!(exact_ot(&a, &b, &c).unwrap(), (c.get(0, 0), vec![0]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(&mut rng, 6);
        let c = cost_matrix(&a, &a, &CostParams::default()).unwrap();
        let (cost, perm) = exact_ot(&a, &a, &c).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(perm, (0..6).collect::<Vec<_>>());

        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = cloud(&mut rng, 4);
            let b = cloud(&mut rng, 4);
            let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
            assert_eq!(exact_ot(&a, &b, &c).unwrap().0, brute_force(&c));
        }

        let a = cloud(&mut rng, 10);
        let c = cost_matrix(&a, &a, &CostParams::default()).unwrap();
        assert!(matches!(
            exact_ot(&a, &a, &c),
            Err(Error::TooLarge { n: 10, max: 9 })
        ));
    }

    #[test]
    fn gradient_examples() {
        let a = EmpiricalDistribution::uniform(vec![(0.0, 1.0)]).unwrap();
        let c = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let plan = sinkhorn(&a, &a, &c, &SinkhornConfig::default()).unwrap();
        let g = plan_weighted_cost_gradient(&plan, &[Matrix::from_vec(1, 1, vec![3.5]).unwrap()])
            .unwrap();
        assert!((g[0] - 3.5).abs() < 1e-12);
        let z = plan_weighted_cost_gradient(&plan, &[Matrix::zeros(1, 1)]).unwrap();
        assert_eq!(z, vec![0.0]);
        assert!(matches!(
            plan_weighted_cost_gradient(&plan, &[Matrix::zeros(2, 1)]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn envelope_gradient_matches_finite_difference() {
        // d/ds of the regularized objective at C + s*D equals <plan, D>.
        let cfg = SinkhornConfig {
            tol: 1e-10,
            max_iter: 100_000,
            ..Default::default()
        };
        let mut checked = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let a = cloud(&mut rng, 8);
            let b = cloud(&mut rng, 8);
            let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
            let d = Matrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
            let plan = sinkhorn(&a, &b, &c, &cfg).unwrap();
            if !plan.converged {
                continue;
            }
            checked += 1;
            let g = plan_weighted_cost_gradient(&plan, std::slice::from_ref(&d)).unwrap()[0];
            let h = 1e-5;
            let shifted = |s: f64| {
                let cs = Matrix::from_fn(8, 8, |i, j| c.get(i, j) + s * d.get(i, j));
                sinkhorn(&a, &b, &cs, &cfg).unwrap().regularized_cost()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-3 * fd.abs(), "{g} vs {fd}");
        }
        assert!(checked >= 15, "only {checked} instances converged");
    }

    #[test]
    fn symmetry_under_transpose() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let a = cloud(&mut rng, 5);
            let b = cloud(&mut rng, 7);
            let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
            let cfg = SinkhornConfig {
                tol: 1e-12,
                max_iter: 100_000,
                ..Default::default()
            };
            let p = sinkhorn(&a, &b, &c, &cfg).unwrap();
            let q = sinkhorn(&b, &a, &c.transpose(), &cfg).unwrap();
            assert!((p.transport_cost - q.transport_cost).abs() < 1e-9);
            for (x, y) in p.matrix.as_slice().iter().zip(q.matrix.transpose().as_slice()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn converged_plans_are_feasible_and_bounded(
            seed in 0u64..10_000,
            n in 1usize..12,
            m in 1usize..12,
            log_eps in -2.5f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n);
            let b = cloud(&mut rng, m);
            let c = cost_matrix(&a, &b, &CostParams::default()).unwrap();
            let cfg = SinkhornConfig {
                epsilon: 10f64.powf(log_eps),
                max_iter: 20_000,
                ..Default::default()
            };
            let plan = sinkhorn(&a, &b, &c, &cfg).unwrap();
            prop_assert!(plan.matrix.as_slice().iter().all(|&p| p >= 0.0));
            prop_assert!(plan.transport_cost <= c.max() + 1e-12);
            if plan.converged {
                let rows: f64 = plan.matrix.row_sums().iter().zip(a.weights())
                    .map(|(s, w)| (s - w).abs()).sum();
                let cols: f64 = plan.matrix.col_sums().iter().zip(b.weights())
                    .map(|(s, w)| (s - w).abs()).sum();
                prop_assert!(rows <= cfg.tol);
                prop_assert!(cols <= cfg.tol + 1e-12);
            }
        }
    }
}
