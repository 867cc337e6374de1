//! Density models over concatenated fPCA weights.
//!
//! Weights are z-scored per coordinate before fitting; the [`Scaler`] is kept
//! with the model, and [`LatentModel::log_density`] and the samplers work in
//! raw weight units.

mod flow;
mod gmm;

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flow::{param_count_nf, MafFlow};
pub use gmm::{log_sum_exp, run_em, EmOptions, EmRun, GaussianEval, GmmComponent};

use crate::rng;

/// Trajectories required per model parameter when sizing a mixture.
pub const TRAJECTORIES_PER_PARAMETER: usize = 15;
/// Diagonal regularisation of the single-Gaussian covariance.
pub const GAUSSIAN_RIDGE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("no training data")]
    Empty,
    #[error("expected dimension {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("training diverged after {restarts} learning-rate halvings (last rate {learning_rate:e})")]
    Diverged { restarts: usize, learning_rate: f64 },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gaussian,
    Gmm,
    Nf,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gaussian => "gaussian",
            ModelKind::Gmm => "gmm",
            ModelKind::Nf => "nf",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(ModelKind::Gaussian),
            "gmm" => Ok(ModelKind::Gmm),
            "nf" | "flow" => Ok(ModelKind::Nf),
            other => Err(format!("unknown model kind {other:?} (gaussian, gmm, nf)")),
        }
    }
}

/// `n_c (n_c + 3) / 2`: mean plus symmetric covariance.
pub fn param_count_gaussian(n_c: usize) -> usize {
    n_c * (n_c + 3) / 2
}

/// `n_m n_c (n_c + 3) / 2 + (n_m - 1)`.
pub fn param_count_gmm(n_m: usize, n_c: usize) -> usize {
    n_m * param_count_gaussian(n_c) + n_m.saturating_sub(1)
}

/// Largest mixture size with at least 15 trajectories per parameter; never
/// less than one.
pub fn max_components(n_tr: usize, n_c: usize) -> usize {
    let mut n_m = 1;
    while TRAJECTORIES_PER_PARAMETER * param_count_gmm(n_m + 1, n_c) <= n_tr {
        n_m += 1;
    }
    n_m
}

/// Per-coordinate standardisation. Zero spreads are replaced by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let std = (0..d)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let s = v.sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn transform(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| m + s * x)
            .collect()
    }

    /// `log |d z / d w|`.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentParams {
    Gaussian {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
    Gmm {
        n_m: usize,
        components: Vec<GmmComponent>,
    },
    NormFlow {
        flow: MafFlow,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model_kind: ModelKind,
    /// Parameter count of the selected model.
    pub n_p: usize,
    pub n_train: usize,
    /// `(n_m, BIC)` for every mixture size tried.
    pub bic_curve: Vec<(usize, f64)>,
    /// Mean negative log-likelihood of the training weights (raw units).
    pub final_nll: f64,
    /// EM iterations of the selected run, or training epochs.
    pub iterations: usize,
    pub learning_rate: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub params: LatentParams,
    pub dim: usize,
    pub training_seed: u64,
    pub scaler: Scaler,
    pub report: FitReport,
}

/// Pre-factored sampler; cheap to draw from repeatedly.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    scaler: &'a Scaler,
    inner: SamplerKind<'a>,
}

#[derive(Debug, Clone)]
enum SamplerKind<'a> {
    Gaussian { mean: DVector<f64>, root: DMatrix<f64> },
    Gmm { cdf: Vec<f64>, parts: Vec<(DVector<f64>, DMatrix<f64>)> },
    Flow(&'a MafFlow),
}

/// Symmetric square root of a PSD matrix; negative eigenvalues clamp to 0.
fn psd_root(c: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(c.clone());
    let sqrt = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * sqrt * e.eigenvectors.transpose()
}

fn regularised_eval(mean: &DVector<f64>, cov: &DMatrix<f64>) -> GaussianEval {
    GaussianEval::new(mean, cov).unwrap_or_else(|| {
        let mut ridge = GAUSSIAN_RIDGE;
        loop {
            let c = cov + DMatrix::identity(cov.nrows(), cov.ncols()) * ridge;
            if let Some(g) = GaussianEval::new(mean, &c) {
                return g;
            }
            ridge *= 10.0;
        }
    })
}

impl<'a> Sampler<'a> {
    /// One draw in raw weight units.
    pub fn draw(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let mut normal = |d: usize| -> DVector<f64> {
            DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let z: Vec<f64> = match &self.inner {
            SamplerKind::Gaussian { mean, root } => {
                (mean + root * normal(mean.len())).iter().copied().collect()
            }
            SamplerKind::Gmm { cdf, parts } => {
                let u: f64 = rng.random();
                let k = cdf.iter().position(|&c| u < c).unwrap_or(parts.len() - 1);
                let (mean, root) = &parts[k];
                let mut normal = |d: usize| -> DVector<f64> {
                    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
                };
                (mean + root * normal(mean.len())).iter().copied().collect()
            }
            SamplerKind::Flow(f) => f.sample_one(rng),
        };
        self.scaler.inverse(&z)
    }
}

impl LatentModel {
    pub fn kind(&self) -> ModelKind {
        match self.params {
            LatentParams::Gaussian { .. } => ModelKind::Gaussian,
            LatentParams::Gmm { .. } => ModelKind::Gmm,
            LatentParams::NormFlow { .. } => ModelKind::Nf,
        }
    }

    pub fn sampler(&self) -> Sampler<'_> {
        let inner = match &self.params {
            LatentParams::Gaussian { mean, covariance } => SamplerKind::Gaussian {
                mean: mean.clone(),
                root: psd_root(covariance),
            },
            LatentParams::Gmm { components, .. } => {
                let mut acc = 0.0;
                let cdf = components
                    .iter()
                    .map(|c| {
                        acc += c.weight;
                        acc
                    })
                    .collect();
                let parts = components
                    .iter()
                    .map(|c| (c.mean.clone(), psd_root(&c.covariance)))
                    .collect();
                SamplerKind::Gmm { cdf, parts }
            }
            LatentParams::NormFlow { flow } => SamplerKind::Flow(flow),
        };
        Sampler {
            scaler: &self.scaler,
            inner,
        }
    }

    pub fn sample_one(&self, rng: &mut rng::Rng) -> Vec<f64> {
        self.sampler().draw(rng)
    }

    /// `n` i.i.d. draws from one seeded stream.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let s = self.sampler();
        let mut rng = rng::seeded(seed);
        (0..n).map(|_| s.draw(&mut rng)).collect()
    }

    /// Log-density in standardised units.
    pub fn log_density_scaled(&self, z: &[f64]) -> f64 {
        match &self.params {
            LatentParams::Gaussian { mean, covariance } => {
                regularised_eval(mean, covariance).log_pdf(z)
            }
            LatentParams::Gmm { components, .. } => {
                let evals: Vec<(f64, GaussianEval)> = components
                    .iter()
                    .map(|c| (c.weight, regularised_eval(&c.mean, &c.covariance)))
                    .collect();
                gmm::mixture_log_pdf(&evals, z)
            }
            LatentParams::NormFlow { flow } => flow.log_density(z),
        }
    }

    /// Log-density in raw weight units.
    pub fn log_density(&self, w: &[f64]) -> f64 {
        self.log_density_scaled(&self.scaler.transform(w)) + self.scaler.log_jacobian()
    }

    fn mean_nll(&self, rows: &[Vec<f64>]) -> f64 {
        -rows.iter().map(|w| self.log_density(w)).sum::<f64>() / rows.len() as f64
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize, LatentError> {
    let d = rows.first().ok_or(LatentError::Empty)?.len();
    if d == 0 {
        return Err(LatentError::Empty);
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(LatentError::DimensionMismatch {
            expected: d,
            found: r.len(),
        });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LatentError::Degenerate("non-finite weight".into()));
    }
    Ok(d)
}

fn gaussian_mle(z: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = z.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in z {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in z {
        let diff = DVector::from_column_slice(r) - &mean;
        cov.ger(1.0 / n, &diff, &diff, 1.0);
    }
    (mean, cov)
}

/// Maximum-likelihood Gaussian with `1e-9 I` added to the covariance.
pub fn fit_gaussian(rows: &[Vec<f64>], seed: u64) -> Result<LatentModel, LatentError> {
    let d = check_rows(rows)?;
    let mut warnings = Vec::new();
    if rows.len() <= d {
        let msg = format!(
            "{} training rows for dimension {d}: covariance is rank deficient, ridge carries it",
            rows.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let scaler = Scaler::fit(rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect();
    let (mean, mut covariance) = gaussian_mle(&z, d);
    for j in 0..d {
        covariance[(j, j)] += GAUSSIAN_RIDGE;
    }
    let mut model = LatentModel {
        params: LatentParams::Gaussian { mean, covariance },
        dim: d,
        training_seed: seed,
        scaler,
        report: FitReport {
            model_kind: ModelKind::Gaussian,
            n_p: param_count_gaussian(d),
            n_train: rows.len(),
            bic_curve: Vec::new(),
            final_nll: 0.0,
            iterations: 1,
            learning_rate: None,
            warnings,
        },
    };
    model.report.final_nll = model.mean_nll(rows);
    Ok(model)
}

/// `n_p ln(n_tr) - 2 ln L`.
pub fn bic(n_p: usize, n_tr: usize, log_likelihood: f64) -> f64 {
    n_p as f64 * (n_tr as f64).ln() - 2.0 * log_likelihood
}

/// EM for every mixture size up to [`max_components`], best of several
/// restarts each, then the size with the lowest BIC.
pub fn fit_gmm(rows: &[Vec<f64>], seed: u64, opts: &EmOptions) -> Result<LatentModel, LatentError> {
    let d = check_rows(rows)?;
    if opts.restarts == 0 || opts.max_iterations == 0 {
        return Err(LatentError::InvalidOptions(
            "restarts and max_iterations must be positive".into(),
        ));
    }
    let n_tr = rows.len();
    let mut warnings = Vec::new();
    let max_m = max_components(n_tr, d);
    if max_m == 1 {
        let msg = format!(
            "{n_tr} trajectories support only one component at dimension {d} (15 per parameter)"
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let scaler = Scaler::fit(rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect();

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, EmRun)> = None;
    for n_m in 1..=max_m {
        let runs: Vec<Option<EmRun>> = (0..opts.restarts)
            .into_par_iter()
            .map(|r| {
                let run_seed = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((n_m * 1000 + r) as u64);
                run_em(&z, n_m, opts, run_seed)
            })
            .collect();
        let chosen = runs
            .into_iter()
            .flatten()
            .fold(None::<EmRun>, |acc, run| match acc {
                Some(a) if a.log_likelihood >= run.log_likelihood => Some(a),
                _ => Some(run),
            });
        let Some(run) = chosen else {
            let msg = format!("all EM restarts collapsed at {n_m} components; stopping the sweep");
            warn!("{msg}");
            warnings.push(msg);
            break;
        };
        let score = bic(param_count_gmm(n_m, d), n_tr, run.log_likelihood);
        curve.push((n_m, score));
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, n_m, run));
        }
    }
    let (_, n_m, run) =
        best.ok_or_else(|| LatentError::Degenerate("no EM run succeeded".into()))?;
    let mut model = LatentModel {
        params: LatentParams::Gmm {
            n_m,
            components: run.components,
        },
        dim: d,
        training_seed: seed,
        scaler,
        report: FitReport {
            model_kind: ModelKind::Gmm,
            n_p: param_count_gmm(n_m, d),
            n_train: n_tr,
            bic_curve: curve,
            final_nll: 0.0,
            iterations: run.history.len(),
            learning_rate: None,
            warnings,
        },
    };
    model.report.final_nll = model.mean_nll(rows);
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NfOptions {
    pub n_flows: usize,
    /// Defaults to twice the dimension.
    pub hidden_width: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Below this many rows every step uses the full training set.
    pub full_batch_below: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_frac: f64,
    pub max_restarts: usize,
}

impl Default for NfOptions {
    fn default() -> Self {
        Self {
            n_flows: 5,
            hidden_width: None,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 256,
            full_batch_below: 512,
            max_epochs: 2000,
            patience: 50,
            validation_frac: 0.1,
            max_restarts: 3,
        }
    }
}

/// Minimum rows before the flow fit stops warning about small data.
pub const NF_MIN_ROWS: usize = 50;
const GRADIENT_CHUNK: usize = 32;

/// Mean NLL and gradient over a batch, chunked for parallelism and summed
/// in a fixed order so the result does not depend on thread count.
fn batch_gradient(flow: &MafFlow, batch: &[Vec<f64>], params: &[f64]) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>, usize)> = batch
        .par_chunks(GRADIENT_CHUNK)
        .map(|c| {
            let (nll, g) = flow.nll_and_gradient(c, params);
            (nll, g, c.len())
        })
        .collect();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut nll = 0.0;
    for (l, g, m) in parts {
        let w = m as f64 / n;
        nll += l * w;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v * w;
        }
    }
    (nll, grad)
}

fn parallel_nll(flow: &MafFlow, data: &[Vec<f64>], params: &[f64]) -> f64 {
    let parts: Vec<(f64, usize)> = data
        .par_chunks(256)
        .map(|c| (flow.mean_nll(c, params), c.len()))
        .collect();
    parts.iter().map(|(l, m)| l * *m as f64).sum::<f64>() / data.len() as f64
}

enum Training {
    Done { params: Vec<f64>, epochs: usize },
    Diverged,
}

fn train_flow(
    flow: &MafFlow,
    train: &[Vec<f64>],
    val: &[Vec<f64>],
    opts: &NfOptions,
    lr: f64,
    seed: u64,
) -> Training {
    let mut params = flow.parameters.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut best = params.clone();
    let mut best_val = parallel_nll(flow, val, &params);
    let mut stale = 0;
    let batch = if train.len() < opts.full_batch_below {
        train.len()
    } else {
        opts.batch_size.max(1)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng::substream(seed, 1);
    let mut epochs = 0;
    for _ in 0..opts.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (nll, grad) = batch_gradient(flow, &rows, &params);
            if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Training::Diverged;
            }
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = opts.momentum * *v - lr * g;
                *p += *v;
            }
        }
        let v = parallel_nll(flow, val, &params);
        if !v.is_finite() {
            return Training::Diverged;
        }
        if v < best_val {
            best_val = v;
            best.copy_from_slice(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                break;
            }
        }
    }
    Training::Done {
        params: best,
        epochs,
    }
}

/// Masked autoregressive flow trained by mini-batch gradient descent with
/// momentum on the mean negative log-likelihood, with early stopping on a
/// held-out slice. A diverging run halves the learning rate and restarts.
pub fn fit_nf(rows: &[Vec<f64>], seed: u64, opts: &NfOptions) -> Result<LatentModel, LatentError> {
    let d = check_rows(rows)?;
    if opts.n_flows == 0 || !(opts.learning_rate > 0.0) || !(0.0..1.0).contains(&opts.validation_frac) {
        return Err(LatentError::InvalidOptions(format!("{opts:?}")));
    }
    let mut warnings = Vec::new();
    if rows.len() < NF_MIN_ROWS {
        let msg = format!("only {} training rows for the flow", rows.len());
        warn!("{msg}");
        warnings.push(msg);
    }
    let hidden = opts.hidden_width.unwrap_or(2 * d).max(1);
    let scaler = Scaler::fit(rows);
    let mut z: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect();
    z.shuffle(&mut rng::substream(seed, 0));
    let n_val = if z.len() >= 10 {
        ((opts.validation_frac * z.len() as f64).ceil() as usize).min(z.len() - 1)
    } else {
        0
    };
    let (val, train) = z.split_at(n_val);
    let val = if val.is_empty() { train } else { val };

    let init = MafFlow::new(d, opts.n_flows, hidden, seed);
    let mut lr = opts.learning_rate;
    let mut restarts = 0;
    let (params, epochs) = loop {
        match train_flow(&init, train, val, opts, lr, seed) {
            Training::Done { params, epochs } => break (params, epochs),
            Training::Diverged => {
                if restarts == opts.max_restarts {
                    return Err(LatentError::Diverged {
                        restarts,
                        learning_rate: lr,
                    });
                }
                restarts += 1;
                lr *= 0.5;
                let msg = format!("loss diverged; restarting with learning rate {lr:e}");
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    };
    let flow = MafFlow {
        parameters: params,
        ..init
    };
    let n_p = flow.n_parameters();
    let mut model = LatentModel {
        params: LatentParams::NormFlow { flow },
        dim: d,
        training_seed: seed,
        scaler,
        report: FitReport {
            model_kind: ModelKind::Nf,
            n_p,
            n_train: rows.len(),
            bic_curve: Vec::new(),
            final_nll: 0.0,
            iterations: epochs,
            learning_rate: Some(lr),
            warnings,
        },
    };
    model.report.final_nll = model.mean_nll(rows);
    Ok(model)
}

/// Options for all three model kinds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentOptions {
    pub em: EmOptions,
    pub nf: NfOptions,
}

pub fn fit(
    kind: ModelKind,
    rows: &[Vec<f64>],
    seed: u64,
    opts: &LatentOptions,
) -> Result<LatentModel, LatentError> {
    match kind {
        ModelKind::Gaussian => fit_gaussian(rows, seed),
        ModelKind::Gmm => fit_gmm(rows, seed, &opts.em),
        ModelKind::Nf => fit_nf(rows, seed, &opts.nf),
    }
}
