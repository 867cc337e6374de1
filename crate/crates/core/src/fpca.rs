//! Altitude grid, gappy functional PCA and curve reconstruction.
//!
//! Curves (drag or CAS against altitude) are interpolated onto a uniform grid
//! of flight levels. Trajectories that only cover part of the grid leave gaps,
//! which are filled iteratively:
//!
//! 1. covariance (pairwise-complete on the first pass, plain sample covariance
//!    of the imputed matrix afterwards),
//! 2. eigendecomposition, truncated to a target explained variance,
//! 3. per-row weights fitted one mode at a time against observed entries only,
//! 4. missing entries replaced by the reconstruction `mean + sum_l w_l phi_l`,
//! 5. repeat until the imputed entries move by less than 1 % (mean relative
//!    change) for 10 consecutive iterations, or 50 iterations have run.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::DescentProfile;
use crate::units::{fl_to_m, m_to_fl_floor, METRES_PER_FL};

/// Bottom of every grid: FL150.
pub const GRID_BOTTOM_FL: u32 = 150;
/// Hard cap on gappy iterations.
pub const MAX_GAPPY_ITERATIONS: usize = 50;
/// Consecutive small-change iterations required to stop.
pub const CONVERGED_STREAK: usize = 10;
/// Mean relative change of the imputed entries regarded as small.
pub const CONVERGENCE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpcaError {
    #[error("no trajectory reaches the grid bottom (FL{GRID_BOTTOM_FL})")]
    EmptyGrid,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid curve matrix: {0}")]
    InvalidMatrix(String),
    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("gappy fPCA needs at least 3 curves, got {0}")]
    InsufficientData(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// Uniform grid of flight levels, bottom to top, one flight level apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct AltitudeGrid {
    fl_bottom: u32,
    fl_top: u32,
    levels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    fl_bottom: u32,
    fl_top: u32,
}

impl TryFrom<GridSpec> for AltitudeGrid {
    type Error = FpcaError;
    fn try_from(s: GridSpec) -> Result<Self, FpcaError> {
        AltitudeGrid::from_flight_levels(s.fl_bottom, s.fl_top)
    }
}

impl From<AltitudeGrid> for GridSpec {
    fn from(g: AltitudeGrid) -> Self {
        GridSpec {
            fl_bottom: g.fl_bottom,
            fl_top: g.fl_top,
        }
    }
}

impl AltitudeGrid {
    pub fn from_flight_levels(fl_bottom: u32, fl_top: u32) -> Result<Self, FpcaError> {
        if fl_top <= fl_bottom {
            return Err(FpcaError::InvalidGrid(format!(
                "top FL{fl_top} must be above bottom FL{fl_bottom}"
            )));
        }
        Ok(Self {
            fl_bottom,
            fl_top,
            levels: (fl_bottom..=fl_top).map(fl_to_m).collect(),
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn h_i(&self) -> f64 {
        self.levels[0]
    }

    pub fn h_f(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    pub fn delta_h(&self) -> f64 {
        METRES_PER_FL
    }

    pub fn fl_bottom(&self) -> u32 {
        self.fl_bottom
    }

    pub fn fl_top(&self) -> u32 {
        self.fl_top
    }

    /// Index of the grid level at or just below `h` and the fractional
    /// position towards the next level. Clamped to the grid.
    pub fn locate(&self, h: f64) -> (usize, f64) {
        let n = self.levels.len();
        let x = (h - self.h_i()) / METRES_PER_FL;
        if x <= 0.0 {
            return (0, 0.0);
        }
        if x >= (n - 1) as f64 - 1e-9 {
            return (n - 1, 0.0);
        }
        let i = x.floor() as usize;
        let s = x - i as f64;
        if s < 1e-9 {
            (i, 0.0)
        } else if s > 1.0 - 1e-9 {
            (i + 1, 0.0)
        } else {
            (i, s)
        }
    }

    /// Highest grid level at or below `h`, if any.
    pub fn snap_down(&self, h: f64) -> Option<f64> {
        let fl = m_to_fl_floor(h);
        if fl < self.fl_bottom as i64 {
            None
        } else {
            Some(fl_to_m((fl as u32).min(self.fl_top)))
        }
    }
}

/// Picks the grid top: the highest flight level covered by at least
/// `coverage_frac` of the given altitude spans `(lowest, highest)`.
pub fn build_grid(
    spans: &[(f64, f64)],
    coverage_frac: f64,
    max_fl: Option<u32>,
) -> Result<AltitudeGrid, FpcaError> {
    if spans.is_empty() {
        return Err(FpcaError::EmptyGrid);
    }
    if !(coverage_frac > 0.0 && coverage_frac <= 1.0) {
        return Err(FpcaError::InvalidGrid(format!(
            "coverage fraction {coverage_frac} outside (0, 1]"
        )));
    }
    let tol = 1e-6;
    let covers = |lo: f64, hi: f64, h: f64| lo <= h + tol && hi >= h - tol;
    let h_i = fl_to_m(GRID_BOTTOM_FL);
    if !spans.iter().any(|&(lo, hi)| covers(lo, hi, h_i)) {
        return Err(FpcaError::EmptyGrid);
    }
    let highest = spans
        .iter()
        .map(|&(_, hi)| m_to_fl_floor(hi))
        .max()
        .unwrap_or(0);
    let mut top = highest.min(max_fl.map_or(i64::MAX, i64::from));
    let needed = coverage_frac * spans.len() as f64 - 1e-9;
    while top > GRID_BOTTOM_FL as i64 {
        let h = fl_to_m(top as u32);
        let count = spans.iter().filter(|&&(lo, hi)| covers(lo, hi, h)).count();
        if count as f64 >= needed {
            return AltitudeGrid::from_flight_levels(GRID_BOTTOM_FL, top as u32);
        }
        top -= 1;
    }
    Err(FpcaError::InvalidGrid(format!(
        "no flight level above FL{GRID_BOTTOM_FL} is covered by {:.0} % of trajectories",
        coverage_frac * 100.0
    )))
}

/// One curve on the grid with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GridRow {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// A row with no observed levels must be excluded from the data matrix.
    pub fn is_empty(&self) -> bool {
        self.observed() == 0
    }
}

/// Linear interpolation of `(h, y)` samples onto the grid. Levels outside the
/// sampled altitude span are masked out; nothing is extrapolated. Samples at
/// identical altitudes are averaged.
pub fn interpolate_to_grid(hs: &[f64], ys: &[f64], grid: &AltitudeGrid) -> GridRow {
    let n = grid.len();
    let mut row = GridRow {
        values: vec![0.0; n],
        mask: vec![false; n],
    };
    let mut pts: Vec<(f64, f64)> = hs
        .iter()
        .zip(ys)
        .filter(|(h, y)| h.is_finite() && y.is_finite())
        .map(|(&h, &y)| (h, y))
        .collect();
    if pts.is_empty() {
        return row;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64, usize)> = Vec::with_capacity(pts.len());
    for (h, y) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == h => {
                last.1 += y;
                last.2 += 1;
            }
            _ => merged.push((h, y, 1)),
        }
    }
    let merged: Vec<(f64, f64)> = merged
        .into_iter()
        .map(|(h, s, c)| (h, s / c as f64))
        .collect();
    let tol = 1e-6;
    let lo = merged[0].0;
    let hi = merged[merged.len() - 1].0;
    let mut seg = 0;
    for (k, &level) in grid.levels().iter().enumerate() {
        if level < lo - tol || level > hi + tol {
            continue;
        }
        if merged.len() == 1 {
            row.values[k] = merged[0].1;
            row.mask[k] = true;
            continue;
        }
        while seg + 2 < merged.len() && merged[seg + 1].0 < level {
            seg += 1;
        }
        let (h0, y0) = merged[seg];
        let (h1, y1) = merged[seg + 1];
        let s = ((level - h0) / (h1 - h0)).clamp(0.0, 1.0);
        row.values[k] = if s == 0.0 {
            y0
        } else if s == 1.0 {
            y1
        } else {
            y0 + s * (y1 - y0)
        };
        row.mask[k] = true;
    }
    row
}

/// Curves on a common grid, `n_t x n_g`, with a mask of observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GappyCurveMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    grid: AltitudeGrid,
}

impl GappyCurveMatrix {
    /// Masked-out values are zeroed. Every row needs at least two observed
    /// levels forming one contiguous span.
    pub fn new(
        mut values: DMatrix<f64>,
        mask: DMatrix<bool>,
        grid: AltitudeGrid,
    ) -> Result<Self, FpcaError> {
        let (n_t, n_g) = values.shape();
        if mask.shape() != (n_t, n_g) || n_g != grid.len() {
            return Err(FpcaError::InvalidMatrix(format!(
                "values {:?}, mask {:?}, grid {}",
                values.shape(),
                mask.shape(),
                grid.len()
            )));
        }
        for r in 0..n_t {
            let observed: Vec<usize> = (0..n_g).filter(|&j| mask[(r, j)]).collect();
            if observed.len() < 2 {
                return Err(FpcaError::InvalidMatrix(format!(
                    "row {r} has {} observed levels",
                    observed.len()
                )));
            }
            if observed[observed.len() - 1] - observed[0] + 1 != observed.len() {
                return Err(FpcaError::InvalidMatrix(format!(
                    "row {r} observations are not contiguous"
                )));
            }
            for j in 0..n_g {
                if mask[(r, j)] {
                    if !values[(r, j)].is_finite() {
                        return Err(FpcaError::InvalidMatrix(format!(
                            "row {r} level {j} is not finite"
                        )));
                    }
                } else {
                    values[(r, j)] = 0.0;
                }
            }
        }
        Ok(Self { values, mask, grid })
    }

    pub fn from_rows(rows: &[GridRow], grid: AltitudeGrid) -> Result<Self, FpcaError> {
        let n_g = grid.len();
        if let Some(r) = rows.iter().find(|r| r.values.len() != n_g || r.mask.len() != n_g) {
            return Err(FpcaError::LengthMismatch(format!(
                "row of length {} on a grid of {n_g}",
                r.values.len()
            )));
        }
        let values = DMatrix::from_fn(rows.len(), n_g, |i, j| rows[i].values[j]);
        let mask = DMatrix::from_fn(rows.len(), n_g, |i, j| rows[i].mask[j]);
        Self::new(values, mask, grid)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn grid(&self) -> &AltitudeGrid {
        &self.grid
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_levels(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|m| *m)
    }

    pub fn row(&self, r: usize) -> GridRow {
        GridRow {
            values: self.values.row(r).iter().copied().collect(),
            mask: self.mask.row(r).iter().copied().collect(),
        }
    }

    /// Per-level mean over the rows that observe the level (0 if none do).
    pub fn observed_means(&self) -> DVector<f64> {
        DVector::from_fn(self.n_levels(), |j, _| {
            let (sum, count) = (0..self.n_rows())
                .filter(|&r| self.mask[(r, j)])
                .fold((0.0, 0usize), |(s, c), r| (s + self.values[(r, j)], c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
    }
}

/// Pairwise-complete covariance: entry `(j, k)` uses only the rows observing
/// both levels, centred by the per-level observed means, divided by
/// `count - 1`. Entries with fewer than two co-observations are zero.
pub fn pairwise_covariance(f: &GappyCurveMatrix) -> DMatrix<f64> {
    let n_g = f.n_levels();
    let mean = f.observed_means();
    let centred = DMatrix::from_fn(f.n_rows(), n_g, |r, j| {
        if f.mask[(r, j)] {
            f.values[(r, j)] - mean[j]
        } else {
            0.0
        }
    });
    let indicator = DMatrix::from_fn(f.n_rows(), n_g, |r, j| if f.mask[(r, j)] { 1.0 } else { 0.0 });
    let sums = centred.transpose() * &centred;
    let counts = indicator.transpose() * &indicator;
    let mut c = DMatrix::from_fn(n_g, n_g, |j, k| {
        let n = counts[(j, k)];
        if n < 2.0 {
            0.0
        } else {
            sums[(j, k)] / (n - 1.0)
        }
    });
    symmetrize(&mut c);
    c
}

/// Sample covariance `(F - mean)^T (F - mean) / (n - 1)` of a complete matrix.
pub fn sample_covariance(values: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = values.nrows();
    let mean = values.row_mean().transpose();
    let mut centred = values.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut c = centred.transpose() * &centred / ((n.max(2) - 1) as f64);
    symmetrize(&mut c);
    (mean, c)
}

fn symmetrize(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    for j in 0..n {
        for k in (j + 1)..n {
            let v = 0.5 * (c[(j, k)] + c[(k, j)]);
            c[(j, k)] = v;
            c[(k, j)] = v;
        }
    }
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
/// Negative eigenvalues are clamped to zero; each mode's largest-magnitude
/// entry is made positive.
pub fn eigen_modes(c: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>), FpcaError> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(FpcaError::NotSymmetric(f64::INFINITY));
    }
    let scale = c.amax().max(1.0);
    let asym = (c - c.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(FpcaError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(c.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut modes = DMatrix::zeros(n, n);
    let mut values = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        modes.set_column(dst, &v);
        values[dst] = eig.eigenvalues[src].max(0.0);
    }
    Ok((modes, values))
}

/// Smallest number of leading modes whose cumulative share of the total
/// variance reaches `target_var`. At least one.
pub fn truncate_modes(eigenvalues: &[f64], target_var: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return 1;
    }
    let mut cum = 0.0;
    for (i, &l) in eigenvalues.iter().enumerate() {
        cum += l;
        if cum >= target_var * total - 1e-12 * total {
            return i + 1;
        }
    }
    eigenvalues.len().max(1)
}

/// Outcome of fitting one curve's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    /// Modes with no support on the observed entries; their weight is zero.
    pub zero_support: Vec<usize>,
    pub sweeps: usize,
}

const MAX_SWEEPS: usize = 500;
const SWEEP_TOLERANCE: f64 = 1e-13;

/// Fits the first `n_modes` weights of one curve one mode at a time, each by
/// the closed-form scalar least squares over observed entries
/// `w_l = sum_obs r_i phi_il / sum_obs phi_il^2` with the residual `r`
/// updated after every mode. Passes are repeated until the weights stop
/// moving, which for gappy rows converges to the least-squares fit over the
/// observed entries; on complete rows with orthonormal modes the first pass
/// is already exact.
pub fn fit_weights_sequential(
    row: &[f64],
    mask: &[bool],
    mean: &[f64],
    modes: &DMatrix<f64>,
    n_modes: usize,
) -> Result<WeightFit, FpcaError> {
    let n_g = row.len();
    if mask.len() != n_g || mean.len() != n_g || modes.nrows() != n_g || n_modes > modes.ncols() {
        return Err(FpcaError::LengthMismatch(format!(
            "row {n_g}, mask {}, mean {}, modes {}x{}, n_modes {n_modes}",
            mask.len(),
            mean.len(),
            modes.nrows(),
            modes.ncols()
        )));
    }
    let obs: Vec<usize> = (0..n_g).filter(|&i| mask[i]).collect();
    // Residual form rewritten through the observed Gram matrix G and the
    // projections b of the centred data: r = r0 - sum_l w_l phi_l, hence
    // sum_obs r phi_l = b_l - sum_k G_lk w_k.
    let mut gram = DMatrix::zeros(n_modes, n_modes);
    let mut proj = vec![0.0; n_modes];
    for l in 0..n_modes {
        for &i in &obs {
            proj[l] += (row[i] - mean[i]) * modes[(i, l)];
        }
        for k in 0..=l {
            let g: f64 = obs.iter().map(|&i| modes[(i, l)] * modes[(i, k)]).sum();
            gram[(l, k)] = g;
            gram[(k, l)] = g;
        }
    }
    let zero_support: Vec<usize> = (0..n_modes).filter(|&l| gram[(l, l)] <= 0.0).collect();
    let mut w = vec![0.0; n_modes];
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_step: f64 = 0.0;
        for l in 0..n_modes {
            if gram[(l, l)] <= 0.0 {
                continue;
            }
            let residual_proj: f64 = proj[l]
                - (0..n_modes)
                    .map(|k| gram[(l, k)] * w[k])
                    .sum::<f64>();
            let step = residual_proj / gram[(l, l)];
            w[l] += step;
            max_step = max_step.max(step.abs());
        }
        let scale = w.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if max_step <= SWEEP_TOLERANCE * scale {
            return Ok(WeightFit {
                weights: w,
                zero_support,
                sweeps,
            });
        }
    }
    // Ill-conditioned observed Gram matrix (short rows): jump to the fixed
    // point the sweeps are crawling towards.
    let support: Vec<usize> = (0..n_modes).filter(|&l| gram[(l, l)] > 0.0).collect();
    let g = DMatrix::from_fn(support.len(), support.len(), |a, b| gram[(support[a], support[b])]);
    let b = DVector::from_iterator(support.len(), support.iter().map(|&l| proj[l]));
    let eps = 1e-12 * g.amax().max(f64::MIN_POSITIVE);
    if let Ok(x) = g.svd(true, true).solve(&b, eps) {
        w.iter_mut().for_each(|v| *v = 0.0);
        for (a, &l) in support.iter().enumerate() {
            w[l] = x[a];
        }
    }
    Ok(WeightFit {
        weights: w,
        zero_support,
        sweeps,
    })
}

/// Mean function, orthonormal modes and eigenvalues of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaBasis {
    pub mean: Vec<f64>,
    /// `n_g x n_modes`, columns orthonormal.
    pub modes: DMatrix<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance captured by the retained modes.
    pub explained_variance: f64,
    pub total_variance: f64,
}

impl FpcaBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn n_levels(&self) -> usize {
        self.mean.len()
    }

    /// `mean + sum_l w_l phi_l`.
    pub fn reconstruct(&self, weights: &[f64]) -> Result<Vec<f64>, FpcaError> {
        if weights.len() != self.n_modes() {
            return Err(FpcaError::LengthMismatch(format!(
                "{} weights for {} modes",
                weights.len(),
                self.n_modes()
            )));
        }
        let w = DVector::from_column_slice(weights);
        let curve = DVector::from_column_slice(&self.mean) + &self.modes * w;
        Ok(curve.iter().copied().collect())
    }

    /// Largest deviation of `modes^T modes` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.modes.transpose() * &self.modes;
        (gram - DMatrix::identity(self.n_modes(), self.n_modes())).amax()
    }
}

/// Latent weights of one trajectory: drag (`alpha`) then CAS (`beta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl WeightVector {
    pub fn from_concatenated(w: &[f64], n_alpha: usize) -> Self {
        Self {
            alpha: w[..n_alpha].to_vec(),
            beta: w[n_alpha..].to_vec(),
        }
    }

    pub fn concatenated(&self) -> Vec<f64> {
        self.alpha.iter().chain(&self.beta).copied().collect()
    }
}

/// Drag and CAS profiles from latent weights. Only lengths are checked here;
/// positivity is enforced by the plausibility bounds downstream.
pub fn reconstruct(
    weights: &WeightVector,
    basis_drag: &FpcaBasis,
    basis_cas: &FpcaBasis,
    grid: &AltitudeGrid,
) -> Result<DescentProfile, FpcaError> {
    if basis_drag.n_levels() != grid.len() || basis_cas.n_levels() != grid.len() {
        return Err(FpcaError::LengthMismatch(format!(
            "bases have {} / {} levels, grid has {}",
            basis_drag.n_levels(),
            basis_cas.n_levels(),
            grid.len()
        )));
    }
    Ok(DescentProfile {
        grid: grid.clone(),
        drag_values: basis_drag.reconstruct(&weights.alpha)?,
        cas_values: basis_cas.reconstruct(&weights.beta)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GappyOptions {
    pub target_var: f64,
    pub max_iterations: usize,
    pub threshold: f64,
    pub streak: usize,
}

impl GappyOptions {
    pub fn new(target_var: f64) -> Self {
        Self {
            target_var,
            max_iterations: MAX_GAPPY_ITERATIONS,
            threshold: CONVERGENCE_THRESHOLD,
            streak: CONVERGED_STREAK,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GappyFpcaResult {
    pub basis: FpcaBasis,
    /// `n_t x n_modes` weights from the final iteration.
    pub weights: DMatrix<f64>,
    pub iterations: usize,
    /// Whether the small-change streak was reached before the cap.
    pub converged: bool,
    /// Observed entries kept, gaps filled with the final reconstruction.
    pub imputed: DMatrix<f64>,
    /// Mean relative change of the imputed entries per iteration.
    pub change_history: Vec<f64>,
}

/// Gappy fPCA with the default stopping rule.
pub fn gappy_fpca(f: &GappyCurveMatrix, target_var: f64) -> Result<GappyFpcaResult, FpcaError> {
    gappy_fpca_with(f, &GappyOptions::new(target_var))
}

pub fn gappy_fpca_with(
    f: &GappyCurveMatrix,
    opts: &GappyOptions,
) -> Result<GappyFpcaResult, FpcaError> {
    let n_t = f.n_rows();
    let n_g = f.n_levels();
    if n_t < 3 {
        return Err(FpcaError::InsufficientData(n_t));
    }
    if !(opts.target_var > 0.0 && opts.target_var <= 1.0) {
        return Err(FpcaError::InvalidMatrix(format!(
            "explained variance target {} outside (0, 1]",
            opts.target_var
        )));
    }
    let complete = f.is_complete();
    let rows: Vec<GridRow> = (0..n_t).map(|r| f.row(r)).collect();

    let mut mean = f.observed_means();
    let mut cov = pairwise_covariance(f);
    // Gaps start out filled with the per-level observed mean.
    let mut filled = DMatrix::from_fn(n_t, n_g, |r, j| {
        if f.mask[(r, j)] {
            f.values[(r, j)]
        } else {
            mean[j]
        }
    });
    let mut history = Vec::new();
    let mut streak = 0;
    let mut iterations = 0;
    let mut converged;
    loop {
        iterations += 1;
        let (modes_all, eig_all) = eigen_modes(&cov)?;
        let eig_vec: Vec<f64> = eig_all.iter().copied().collect();
        let n_modes = truncate_modes(&eig_vec, opts.target_var);
        let modes = modes_all.columns(0, n_modes).into_owned();
        let mean_slice: Vec<f64> = mean.iter().copied().collect();

        let fits: Vec<WeightFit> = rows
            .par_iter()
            .map(|row| {
                fit_weights_sequential(&row.values, &row.mask, &mean_slice, &modes, n_modes)
            })
            .collect::<Result<_, _>>()?;
        let zero_support: usize = fits.iter().map(|w| w.zero_support.len()).sum();
        if zero_support > 0 {
            warn!("{zero_support} (row, mode) pairs had no support on observed levels; weights set to 0");
        }
        let weights = DMatrix::from_fn(n_t, n_modes, |r, l| fits[r].weights[l]);

        let mut change_sum = 0.0;
        let mut n_missing = 0usize;
        let recon = &weights * modes.transpose();
        for r in 0..n_t {
            for j in 0..n_g {
                if !f.mask[(r, j)] {
                    let new = mean[j] + recon[(r, j)];
                    let old = filled[(r, j)];
                    change_sum += (new - old).abs() / old.abs().max(1e-6);
                    n_missing += 1;
                    filled[(r, j)] = new;
                }
            }
        }
        let change = if n_missing == 0 {
            0.0
        } else {
            change_sum / n_missing as f64
        };
        history.push(change);

        let total: f64 = eig_vec.iter().sum();
        let retained: f64 = eig_vec[..n_modes].iter().sum();
        let basis = FpcaBasis {
            mean: mean_slice,
            modes,
            eigenvalues: eig_vec[..n_modes].to_vec(),
            explained_variance: if total > 0.0 { retained / total } else { 1.0 },
            total_variance: total,
        };

        if complete {
            converged = true;
        } else {
            streak = if change < opts.threshold { streak + 1 } else { 0 };
            converged = streak >= opts.streak;
        }
        if converged || iterations >= opts.max_iterations {
            return Ok(GappyFpcaResult {
                basis,
                weights,
                iterations,
                converged,
                imputed: filled,
                change_history: history,
            });
        }
        let (m, c) = sample_covariance(&filled);
        mean = m;
        cov = c;
    }
}
