//! Masked affine autoregressive flow.
//!
//! Each layer maps data-side `y` to base-side `u` with
//! `u_i = (y_i - mu_i(y_<i)) * exp(-alpha_i(y_<i))`, where `mu` and `alpha`
//! come from a one-hidden-layer MADE network (tanh) whose masks enforce the
//! autoregressive order. Layers alternate between the natural and reversed
//! variable order. Output weights start at zero, so a fresh flow is the
//! identity.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MafFlow {
    pub dim: usize,
    pub n_flows: usize,
    pub hidden_width: usize,
    /// All layer parameters, layer after layer; see [`Layout`].
    pub parameters: Vec<f64>,
}

/// Offsets of one layer's blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    wm: usize,
    bm: usize,
    wa: usize,
    ba: usize,
    size: usize,
}

impl Layout {
    fn new(d: usize, h: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h * d;
        let wm = b1 + h;
        let bm = wm + d * h;
        let wa = bm + d;
        let ba = wa + d * h;
        Self {
            w1,
            b1,
            wm,
            bm,
            wa,
            ba,
            size: ba + d,
        }
    }
}

/// Masks of one layer: `m1[h * d + j]` (input j -> hidden h) and
/// `m2[i * hw + h]` (hidden h -> output i), plus the variable degrees.
#[derive(Debug, Clone)]
struct Masks {
    m1: Vec<f64>,
    m2: Vec<f64>,
    /// Variables sorted by increasing degree.
    order: Vec<usize>,
}

/// Intermediate values of one layer for one point.
#[derive(Debug, Clone, Default)]
struct LayerTrace {
    y: Vec<f64>,
    hidden: Vec<f64>,
    alpha: Vec<f64>,
    u: Vec<f64>,
}

pub fn param_count_nf(dim: usize, n_flows: usize, hidden_width: usize) -> usize {
    n_flows * Layout::new(dim, hidden_width).size
}

impl MafFlow {
    /// Identity flow with random first-layer weights.
    pub fn new(dim: usize, n_flows: usize, hidden_width: usize, seed: u64) -> Self {
        let lay = Layout::new(dim, hidden_width);
        let mut rng = rng::seeded(seed);
        let mut parameters = vec![0.0; n_flows * lay.size];
        let scale = 1.0 / (dim as f64).sqrt();
        for k in 0..n_flows {
            let masks = masks(dim, hidden_width, k);
            let base = k * lay.size;
            for (idx, m) in masks.m1.iter().enumerate() {
                if *m != 0.0 {
                    parameters[base + lay.w1 + idx] = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Self {
            dim,
            n_flows,
            hidden_width,
            parameters,
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(self.dim, self.hidden_width)
    }

    fn all_masks(&self) -> Vec<Masks> {
        (0..self.n_flows)
            .map(|k| masks(self.dim, self.hidden_width, k))
            .collect()
    }

    /// Hidden activations, mu and alpha of layer `k` at input `y`.
    fn conditioner(
        &self,
        k: usize,
        masks: &Masks,
        y: &[f64],
        params: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (d, hw) = (self.dim, self.hidden_width);
        let lay = self.layout();
        let p = &params[k * lay.size..(k + 1) * lay.size];
        let hidden: Vec<f64> = (0..hw)
            .map(|h| {
                let mut a = p[lay.b1 + h];
                for j in 0..d {
                    a += p[lay.w1 + h * d + j] * masks.m1[h * d + j] * y[j];
                }
                a.tanh()
            })
            .collect();
        let mut mu = vec![0.0; d];
        let mut alpha = vec![0.0; d];
        for i in 0..d {
            let (mut m, mut a) = (p[lay.bm + i], p[lay.ba + i]);
            for h in 0..hw {
                let mask = masks.m2[i * hw + h];
                m += p[lay.wm + i * hw + h] * mask * hidden[h];
                a += p[lay.wa + i * hw + h] * mask * hidden[h];
            }
            mu[i] = m;
            alpha[i] = a;
        }
        (hidden, mu, alpha)
    }

    fn trace(&self, x: &[f64], params: &[f64], masks: &[Masks]) -> Vec<LayerTrace> {
        let mut y = x.to_vec();
        let mut out = Vec::with_capacity(self.n_flows);
        for (k, m) in masks.iter().enumerate() {
            let (hidden, mu, alpha) = self.conditioner(k, m, &y, params);
            let u: Vec<f64> = (0..self.dim)
                .map(|i| (y[i] - mu[i]) * (-alpha[i]).exp())
                .collect();
            out.push(LayerTrace {
                y: std::mem::replace(&mut y, u.clone()),
                hidden,
                alpha,
                u,
            });
        }
        out
    }

    /// Data to base space: one parallel pass per layer. Returns the base
    /// point and `log |det d(base)/d(data)|`.
    pub fn inverse(&self, x: &[f64]) -> (Vec<f64>, f64) {
        self.inverse_with(x, &self.parameters, &self.all_masks())
    }

    fn inverse_with(&self, x: &[f64], params: &[f64], masks: &[Masks]) -> (Vec<f64>, f64) {
        let tr = self.trace(x, params, masks);
        let log_det: f64 = tr.iter().flat_map(|l| l.alpha.iter()).map(|a| -a).sum();
        let z = tr.last().map_or_else(|| x.to_vec(), |l| l.u.clone());
        (z, log_det)
    }

    /// Base to data space. Each layer is inverted one variable at a time in
    /// autoregressive order.
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let masks = self.all_masks();
        let mut u = z.to_vec();
        for k in (0..self.n_flows).rev() {
            let m = &masks[k];
            let mut y = vec![0.0; self.dim];
            for &i in &m.order {
                // mu_i and alpha_i depend only on earlier variables, which
                // are final already.
                let (_, mu, alpha) = self.conditioner(k, m, &y, &self.parameters);
                y[i] = u[i] * alpha[i].exp() + mu[i];
            }
            u = y;
        }
        u
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (z, log_det) = self.inverse(x);
        let sq: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (self.dim as f64 * LN_2PI + sq) + log_det
    }

    pub fn sample_one(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.forward(&z)
    }

    /// Mean negative log-likelihood of `batch` at `params` and its gradient.
    pub fn nll_and_gradient(&self, batch: &[Vec<f64>], params: &[f64]) -> (f64, Vec<f64>) {
        let (d, hw) = (self.dim, self.hidden_width);
        let lay = self.layout();
        let masks = self.all_masks();
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        for x in batch {
            let tr = self.trace(x, params, &masks);
            let z = &tr[self.n_flows - 1].u;
            let sq: f64 = z.iter().map(|v| v * v).sum();
            let alpha_sum: f64 = tr.iter().flat_map(|l| l.alpha.iter()).sum();
            total += 0.5 * (d as f64 * LN_2PI + sq) + alpha_sum;

            let mut g_u = z.clone();
            for k in (0..self.n_flows).rev() {
                let l = &tr[k];
                let m = &masks[k];
                let p = &params[k * lay.size..(k + 1) * lay.size];
                let g = &mut grad[k * lay.size..(k + 1) * lay.size];
                let mut g_y = vec![0.0; d];
                let mut g_mu = vec![0.0; d];
                let mut g_alpha = vec![0.0; d];
                for i in 0..d {
                    let e = (-l.alpha[i]).exp();
                    g_y[i] = g_u[i] * e;
                    g_mu[i] = -g_u[i] * e;
                    g_alpha[i] = 1.0 - g_u[i] * l.u[i];
                }
                let mut g_hidden = vec![0.0; hw];
                for i in 0..d {
                    g[lay.bm + i] += g_mu[i];
                    g[lay.ba + i] += g_alpha[i];
                    for h in 0..hw {
                        let mask = m.m2[i * hw + h];
                        if mask == 0.0 {
                            continue;
                        }
                        g[lay.wm + i * hw + h] += g_mu[i] * l.hidden[h];
                        g[lay.wa + i * hw + h] += g_alpha[i] * l.hidden[h];
                        g_hidden[h] +=
                            g_mu[i] * p[lay.wm + i * hw + h] + g_alpha[i] * p[lay.wa + i * hw + h];
                    }
                }
                for h in 0..hw {
                    let g_a = g_hidden[h] * (1.0 - l.hidden[h] * l.hidden[h]);
                    g[lay.b1 + h] += g_a;
                    for j in 0..d {
                        let mask = m.m1[h * d + j];
                        if mask == 0.0 {
                            continue;
                        }
                        g[lay.w1 + h * d + j] += g_a * l.y[j];
                        g_y[j] += g_a * p[lay.w1 + h * d + j];
                    }
                }
                g_u = g_y;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        (total / n, grad)
    }

    pub fn mean_nll(&self, data: &[Vec<f64>], params: &[f64]) -> f64 {
        let masks = self.all_masks();
        let sum: f64 = data
            .iter()
            .map(|x| {
                let (z, log_det) = self.inverse_with(x, params, &masks);
                let sq: f64 = z.iter().map(|v| v * v).sum();
                0.5 * (self.dim as f64 * LN_2PI + sq) - log_det
            })
            .sum();
        sum / data.len() as f64
    }
}

/// MADE masks for layer `k`. Even layers use the natural variable order, odd
/// layers the reversed one. Hidden degrees cycle through `1..d-1`.
fn masks(d: usize, hw: usize, k: usize) -> Masks {
    let order: Vec<usize> = if k % 2 == 0 {
        (0..d).collect()
    } else {
        (0..d).rev().collect()
    };
    let mut degree = vec![0usize; d];
    for (pos, &i) in order.iter().enumerate() {
        degree[i] = pos + 1;
    }
    let span = d.saturating_sub(1).max(1);
    let hidden_degree: Vec<usize> = (0..hw).map(|h| h % span + 1).collect();
    let mut m1 = vec![0.0; hw * d];
    let mut m2 = vec![0.0; d * hw];
    for h in 0..hw {
        for j in 0..d {
            if degree[j] <= hidden_degree[h] {
                m1[h * d + j] = 1.0;
            }
        }
        for i in 0..d {
            if degree[i] > hidden_degree[h] {
                m2[i * hw + h] = 1.0;
            }
        }
    }
    Masks { m1, m2, order }
}
