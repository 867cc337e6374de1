//! Full-covariance Gaussian mixtures fitted by EM.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOptions {
    pub restarts: usize,
    /// Convergence tolerance on the mean log-likelihood.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Added to every covariance diagonal.
    pub covariance_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            tolerance: 1e-6,
            max_iterations: 500,
            covariance_floor: 1e-8,
        }
    }
}

/// One EM run.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub components: Vec<GmmComponent>,
    /// Total log-likelihood at the returned parameters.
    pub log_likelihood: f64,
    /// Mean log-likelihood per iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Gaussian density evaluator with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianEval {
    pub mean: DVector<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// Row-major copy of the lower factor for allocation-free evaluation.
    lower: Vec<f64>,
    /// Strictly-lower part of the factor, packed row by row.
    packed: Vec<f64>,
    inv_diag: Vec<f64>,
    mean_v: Vec<f64>,
    log_norm: f64,
}

impl GaussianEval {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<Self> {
        let chol = Cholesky::new(cov.clone())?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        let d = mean.len();
        let lower = (0..d * d).map(|k| l[(k / d, k % d)]).collect();
        let packed = (0..d).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        let inv_diag = (0..d).map(|i| 1.0 / l[(i, i)]).collect();
        Some(Self {
            mean: mean.clone(),
            chol,
            lower,
            packed,
            inv_diag,
            mean_v: mean.iter().copied().collect(),
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    /// Log-density using `buf` (length >= dim) as scratch.
    #[inline]
    pub fn log_pdf_with(&self, x: &[f64], buf: &mut [f64]) -> f64 {
        let d = self.mean_v.len();
        let mut sq = 0.0;
        let mut off = 0;
        for i in 0..d {
            let mut v = x[i] - self.mean_v[i];
            for (r, b) in self.packed[off..off + i].iter().zip(&buf[..i]) {
                v -= r * b;
            }
            v *= self.inv_diag[i];
            buf[i] = v;
            sq += v * v;
            off += i;
        }
        self.log_norm - 0.5 * sq
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.mean.len()];
        self.log_pdf_with(x, &mut buf)
    }

    /// `mean + L z`.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        (0..d)
            .map(|i| self.mean[i] + (0..=i).map(|j| self.lower[i * d + j] * z[j]).sum::<f64>())
            .collect()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mixture_log_pdf(evals: &[(f64, GaussianEval)], x: &[f64]) -> f64 {
    let terms: Vec<f64> = evals.iter().map(|(w, g)| w.ln() + g.log_pdf(x)).collect();
    log_sum_exp(&terms)
}

/// Weighted sufficient statistics: `sum r`, `sum r x` and the packed lower
/// triangle of `sum r x x^T`, per component.
struct Stats {
    k: usize,
    d: usize,
    nk: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
}

impl Stats {
    fn new(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            nk: vec![0.0; k],
            sx: vec![0.0; k * d],
            sxx: vec![0.0; k * d * (d + 1) / 2],
        }
    }

    #[inline]
    fn add(&mut self, c: usize, r: f64, x: &[f64]) {
        let d = self.d;
        let tri = d * (d + 1) / 2;
        self.nk[c] += r;
        let sx = &mut self.sx[c * d..(c + 1) * d];
        let sxx = &mut self.sxx[c * tri..(c + 1) * tri];
        let mut p = 0;
        for a in 0..d {
            let ra = r * x[a];
            sx[a] += ra;
            for b in 0..=a {
                sxx[p] += ra * x[b];
                p += 1;
            }
        }
    }

    /// M-step. `None` if a component has (numerically) no mass.
    fn components(&self, n: usize, floor: f64) -> Option<Vec<GmmComponent>> {
        let (k, d) = (self.k, self.d);
        let tri = d * (d + 1) / 2;
        if self.nk.iter().any(|&v| !(v > 1e-8 * n as f64)) {
            return None;
        }
        let out = (0..k)
            .map(|c| {
                let nk = self.nk[c];
                let mean = DVector::from_fn(d, |j, _| self.sx[c * d + j] / nk);
                let mut cov = DMatrix::zeros(d, d);
                let mut p = 0;
                for a in 0..d {
                    for b in 0..=a {
                        let v = self.sxx[c * tri + p] / nk - mean[a] * mean[b];
                        cov[(a, b)] = v;
                        cov[(b, a)] = v;
                        p += 1;
                    }
                    cov[(a, a)] += floor;
                }
                GmmComponent {
                    weight: nk / n as f64,
                    mean,
                    covariance: cov,
                }
            })
            .collect();
        Some(out)
    }
}

/// Data stored column by column so the E-step loops run over contiguous
/// memory.
struct Columns {
    n: usize,
    d: usize,
    x: Vec<f64>,
}

impl Columns {
    fn new(data: &[Vec<f64>]) -> Self {
        let n = data.len();
        let d = data.first().map_or(0, |x| x.len());
        let mut x = vec![0.0; n * d];
        for (i, row) in data.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                x[a * n + i] = *v;
            }
        }
        Self { n, d, x }
    }

    fn col(&self, a: usize) -> &[f64] {
        &self.x[a * self.n..(a + 1) * self.n]
    }
}

/// Scratch buffers reused across E-steps.
struct Scratch {
    /// Per component, then per point: log weight + log density, later the
    /// responsibility.
    resp: Vec<f64>,
    /// Whitened coordinates of the current component, per dimension.
    white: Vec<f64>,
    top: Vec<f64>,
    sum: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, d: usize, k: usize) -> Self {
        Self {
            resp: vec![0.0; n * k],
            white: vec![0.0; n * d],
            top: vec![0.0; n],
            sum: vec![0.0; n],
        }
    }
}

/// E-step fused with the accumulation for the next M-step. Returns the
/// total log-likelihood under `comps` and the statistics of the
/// responsibilities; `None` when a covariance is not positive definite.
fn e_step(data: &Columns, comps: &[GmmComponent], s: &mut Scratch) -> Option<(f64, Stats)> {
    let evals: Vec<(f64, GaussianEval)> = comps
        .iter()
        .map(|c| GaussianEval::new(&c.mean, &c.covariance).map(|g| (c.weight.ln(), g)))
        .collect::<Option<_>>()?;
    let (n, d, k) = (data.n, data.d, comps.len());
    s.top.fill(f64::NEG_INFINITY);
    for (c, (lw, g)) in evals.iter().enumerate() {
        let out = &mut s.resp[c * n..(c + 1) * n];
        out.fill(0.0);
        let mut off = 0;
        for a in 0..d {
            let (done, rest) = s.white.split_at_mut(a * n);
            let w = &mut rest[..n];
            let (m, inv) = (g.mean_v[a], g.inv_diag[a]);
            for (wi, xi) in w.iter_mut().zip(data.col(a)) {
                *wi = xi - m;
            }
            for (b, r) in g.packed[off..off + a].iter().enumerate() {
                for (wi, vb) in w.iter_mut().zip(&done[b * n..(b + 1) * n]) {
                    *wi -= r * vb;
                }
            }
            for (wi, o) in w.iter_mut().zip(out.iter_mut()) {
                *wi *= inv;
                *o += *wi * *wi;
            }
            off += a;
        }
        let base = lw + g.log_norm;
        for (o, t) in out.iter_mut().zip(s.top.iter_mut()) {
            *o = base - 0.5 * *o;
            *t = t.max(*o);
        }
    }
    // Terms more than e^-40 below the largest cannot change the sum in
    // double precision; they are treated as exact zeros.
    s.sum.fill(0.0);
    for c in 0..k {
        let col = &mut s.resp[c * n..(c + 1) * n];
        for ((o, t), sum) in col.iter_mut().zip(&s.top).zip(s.sum.iter_mut()) {
            let e = *o - t;
            *o = if e < -40.0 { 0.0 } else { e.exp() };
            *sum += *o;
        }
    }
    let mut total = 0.0;
    for (t, sum) in s.top.iter().zip(s.sum.iter_mut()) {
        let lse = t + sum.ln();
        if !lse.is_finite() {
            return None;
        }
        total += lse;
        *sum = 1.0 / *sum;
    }
    let mut stats = Stats::new(k, d);
    let tri = d * (d + 1) / 2;
    for c in 0..k {
        let col = &mut s.resp[c * n..(c + 1) * n];
        for (o, inv) in col.iter_mut().zip(&s.sum) {
            *o *= inv;
        }
        let col = &s.resp[c * n..(c + 1) * n];
        stats.nk[c] = col.iter().sum();
        let mut p = 0;
        for a in 0..d {
            let xa = data.col(a);
            stats.sx[c * d + a] = col.iter().zip(xa).map(|(r, x)| r * x).sum();
            for b in 0..=a {
                stats.sxx[c * tri + p] = col
                    .iter()
                    .zip(xa)
                    .zip(data.col(b))
                    .map(|((r, x), y)| r * x * y)
                    .sum();
                p += 1;
            }
        }
    }
    Some((total, stats))
}

/// k-means++ seeding followed by hard responsibilities to the nearest seed.
fn initial_stats(data: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Stats {
    let n = data.len();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut seeds: Vec<usize> = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = data.iter().map(|x| dist2(x, &data[seeds[0]])).collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        for (i, x) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(x, &data[next]));
        }
    }
    let mut stats = Stats::new(k, data[0].len());
    for x in data {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &s) in seeds.iter().enumerate() {
            let d = dist2(x, &data[s]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        stats.add(best, 1.0, x);
    }
    stats
}

/// One EM run from a random start. `None` if a component collapses.
pub fn run_em(data: &[Vec<f64>], k: usize, opts: &EmOptions, seed: u64) -> Option<EmRun> {
    let mut rng = rng::seeded(seed);
    let n_rows = data.len();
    let mut comps = initial_stats(data, k, &mut rng).components(n_rows, opts.covariance_floor)?;
    let n = n_rows as f64;
    let cols = Columns::new(data);
    let mut scratch = Scratch::new(cols.n, cols.d, k);
    let mut history = Vec::new();
    let mut converged = false;
    loop {
        let (ll, stats) = e_step(&cols, &comps, &mut scratch)?;
        let mean_ll = ll / n;
        let done = history
            .last()
            .is_some_and(|prev: &f64| (mean_ll - prev).abs() < opts.tolerance);
        history.push(mean_ll);
        if done {
            converged = true;
        }
        if done || history.len() >= opts.max_iterations {
            return Some(EmRun {
                components: comps,
                log_likelihood: ll,
                history,
                converged,
            });
        }
        comps = stats.components(n_rows, opts.covariance_floor)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn two_clusters(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { -3.0 } else { 3.0 };
                vec![
                    c + rng.sample::<f64, _>(StandardNormal),
                    0.5 * c + rng.sample::<f64, _>(StandardNormal),
                ]
            })
            .collect()
    }

    #[test]
    fn em_log_likelihood_monotone() {
        let data = two_clusters(400, 1);
        for k in 1..=4 {
            let run = run_em(&data, k, &EmOptions::default(), 7).unwrap();
            for w in run.history.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "k={k}: {} -> {}", w[0], w[1]);
            }
            let total: f64 = run.components.iter().map(|c| c.weight).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn em_finds_cluster_means() {
        let data = two_clusters(1000, 2);
        let run = run_em(&data, 2, &EmOptions::default(), 3).unwrap();
        let mut xs: Vec<f64> = run.components.iter().map(|c| c.mean[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 3.0).abs() < 0.2 && (xs[1] - 3.0).abs() < 0.2);
        assert!(run.converged);
    }

    #[test]
    fn single_component_is_mle_gaussian() {
        let data = two_clusters(50, 4);
        let run = run_em(&data, 1, &EmOptions::default(), 0).unwrap();
        let n = data.len() as f64;
        let mx: f64 = data.iter().map(|x| x[0]).sum::<f64>() / n;
        let vx: f64 = data.iter().map(|x| (x[0] - mx).powi(2)).sum::<f64>() / n;
        assert!((run.components[0].mean[0] - mx).abs() < 1e-12);
        assert!((run.components[0].covariance[(0, 0)] - vx - 1e-8).abs() < 1e-10);
    }

    #[test]
    fn gaussian_eval_standard_normal() {
        let g = GaussianEval::new(&DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        assert!((g.log_pdf(&[0.0]) + 0.5 * LN_2PI).abs() < 1e-15);
        assert!(GaussianEval::new(&DVector::zeros(2), &DMatrix::zeros(2, 2)).is_none());
    }

    #[test]
    fn log_sum_exp_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
