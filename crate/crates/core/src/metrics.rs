//! Distributional comparison of generated descents with held-out tracks:
//! KS, Wasserstein-1 and MAE of means, time to bottom, per-level CAS/ROCD
//! distances split at the transition altitude, and KDE curves for plotting.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Trajectory;
use crate::fpca::{interpolate_to_grid, AltitudeGrid};
use crate::physics::SimulatedTrajectory;

/// Documentation only: the deterministic baseline's time-to-bottom MAE for
/// the B738, in seconds, as reported on the original radar data.
pub const B738_BADA_TIME_TO_BOTTOM_MAE_S: f64 = 166.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty sample set: {0}")]
    Empty(&'static str),
    #[error("no trajectory spans the whole grid ({0})")]
    NoSpanningTrajectory(&'static str),
    #[error("kde needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no level has values in both sets")]
    NoCommonLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Cas,
    Rocd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Ks,
    W1,
    Mae,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Ks, Measure::W1, Measure::Mae];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Ks => "ks",
            Measure::W1 => "wasserstein",
            Measure::Mae => "mae",
        }
    }

    pub fn apply(self, a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
        match self {
            Measure::Ks => ks_distance(a, b),
            Measure::W1 => wasserstein1(a, b),
            Measure::Mae => mae_of_means(a, b),
        }
    }
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Cas => "cas",
            Quantity::Rocd => "rocd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceTriple {
    pub ks: f64,
    pub wasserstein: f64,
    pub mae: f64,
}

impl DistanceTriple {
    pub fn between(a: &[f64], b: &[f64]) -> Result<Self, MetricsError> {
        Ok(Self {
            ks: ks_distance(a, b)?,
            wasserstein: wasserstein1(a, b)?,
            mae: mae_of_means(a, b)?,
        })
    }

    pub fn get(&self, m: Measure) -> f64 {
        match m {
            Measure::Ks => self.ks,
            Measure::W1 => self.wasserstein,
            Measure::Mae => self.mae,
        }
    }
}

fn sorted(x: &[f64], what: &'static str) -> Result<Vec<f64>, MetricsError> {
    if x.is_empty() {
        return Err(MetricsError::Empty(what));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(what));
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Walks the merged support. Calls `f(x, next_x, F_a(x), F_b(x))` at every
/// distinct step point, with `next_x = None` at the last one.
fn walk_ecdfs(a: &[f64], b: &[f64], mut f: impl FnMut(f64, Option<f64>, f64, f64)) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => Some(p.min(q)),
            (Some(&p), None) => Some(p),
            (None, Some(&q)) => Some(q),
            (None, None) => None,
        };
        f(x, next, i as f64 / na, j as f64 / nb);
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let a = sorted(a, "ks first sample")?;
    let b = sorted(b, "ks second sample")?;
    let mut d: f64 = 0.0;
    walk_ecdfs(&a, &b, |_, _, fa, fb| d = d.max((fa - fb).abs()));
    Ok(d)
}

/// Wasserstein-1 distance: the area between the two ECDFs.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let a = sorted(a, "wasserstein first sample")?;
    let b = sorted(b, "wasserstein second sample")?;
    let mut w = 0.0;
    walk_ecdfs(&a, &b, |x, next, fa, fb| {
        if let Some(nx) = next {
            w += (fa - fb).abs() * (nx - x);
        }
    });
    Ok(w)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `|mean(a) - mean(b)|`.
pub fn mae_of_means(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::Empty("mae first sample"));
    }
    if b.is_empty() {
        return Err(MetricsError::Empty("mae second sample"));
    }
    let d = (mean(a) - mean(b)).abs();
    if !d.is_finite() {
        return Err(MetricsError::NonFinite("mae"));
    }
    Ok(d)
}

/// A descent reduced to what evaluation needs: time, CAS and ROCD against
/// altitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub h: Vec<f64>,
    pub t: Vec<f64>,
    pub cas: Vec<f64>,
    pub rocd: Vec<f64>,
}

impl Track {
    pub fn from_trajectory(tr: &Trajectory) -> Self {
        Self {
            h: tr.blips.iter().map(|b| b.h).collect(),
            t: tr.blips.iter().map(|b| b.t).collect(),
            cas: tr.blips.iter().map(|b| b.v_ias).collect(),
            rocd: tr.blips.iter().map(|b| b.rocd).collect(),
        }
    }

    pub fn from_simulated(s: &SimulatedTrajectory) -> Self {
        Self {
            h: s.samples.iter().map(|p| p.h).collect(),
            t: s.samples.iter().map(|p| p.t).collect(),
            cas: s.samples.iter().map(|p| p.v_cas).collect(),
            rocd: s.samples.iter().map(|p| p.rocd).collect(),
        }
    }

    fn series(&self, q: Quantity) -> &[f64] {
        match q {
            Quantity::Cas => &self.cas,
            Quantity::Rocd => &self.rocd,
        }
    }

    /// Time between the grid top and bottom, interpolated in altitude.
    /// `None` unless the track covers both ends.
    pub fn time_to_bottom(&self, grid: &AltitudeGrid) -> Option<f64> {
        let row = interpolate_to_grid(&self.h, &self.t, grid);
        let top = grid.len() - 1;
        if row.mask[0] && row.mask[top] {
            Some(row.values[0] - row.values[top])
        } else {
            None
        }
    }
}

/// Time to bottom of every track that spans the whole grid.
pub fn time_to_bottom_distribution(
    tracks: &[Track],
    grid: &AltitudeGrid,
) -> Result<Vec<f64>, MetricsError> {
    if tracks.is_empty() {
        return Err(MetricsError::Empty("time to bottom"));
    }
    let out: Vec<f64> = tracks.iter().filter_map(|t| t.time_to_bottom(grid)).collect();
    if out.is_empty() {
        return Err(MetricsError::NoSpanningTrajectory("time to bottom"));
    }
    Ok(out)
}

/// Values of `q` at each grid level, from the tracks observing that level.
pub fn level_values(tracks: &[Track], grid: &AltitudeGrid, q: Quantity) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); grid.len()];
    for tr in tracks {
        let row = interpolate_to_grid(&tr.h, tr.series(q), grid);
        for (j, (&v, &m)) in row.values.iter().zip(&row.mask).enumerate() {
            if m {
                out[j].push(v);
            }
        }
    }
    out
}

/// Mean per-level distance above and at-or-below `h_trans`. A side with no
/// comparable level is `None`.
pub fn per_level_distance(
    test: &[Track],
    gen: &[Track],
    grid: &AltitudeGrid,
    quantity: Quantity,
    measure: Measure,
    h_trans: f64,
) -> Result<(Option<f64>, Option<f64>), MetricsError> {
    if test.is_empty() {
        return Err(MetricsError::Empty("test tracks"));
    }
    if gen.is_empty() {
        return Err(MetricsError::Empty("generated tracks"));
    }
    let tv = level_values(test, grid, quantity);
    let gv = level_values(gen, grid, quantity);
    split_mean(grid, h_trans, |j| {
        if tv[j].is_empty() || gv[j].is_empty() {
            Ok(None)
        } else {
            measure.apply(&tv[j], &gv[j]).map(Some)
        }
    })
}

fn split_mean(
    grid: &AltitudeGrid,
    h_trans: f64,
    mut at: impl FnMut(usize) -> Result<Option<f64>, MetricsError>,
) -> Result<(Option<f64>, Option<f64>), MetricsError> {
    let (mut above, mut below) = (Vec::new(), Vec::new());
    for (j, &h) in grid.levels().iter().enumerate() {
        if let Some(d) = at(j)? {
            if h > h_trans {
                above.push(d);
            } else {
                below.push(d);
            }
        }
    }
    let m = |v: Vec<f64>| (!v.is_empty()).then(|| mean(&v));
    Ok((m(above), m(below)))
}

/// Per-level values of all three measures in one pass.
fn per_level_triples(
    tv: &[Vec<f64>],
    gv: &[Vec<f64>],
    grid: &AltitudeGrid,
    h_trans: f64,
) -> Result<(Option<DistanceTriple>, Option<DistanceTriple>), MetricsError> {
    let mut sides = [(None, None); 3];
    for (k, m) in Measure::ALL.iter().enumerate() {
        sides[k] = split_mean(grid, h_trans, |j| {
            if tv[j].is_empty() || gv[j].is_empty() {
                Ok(None)
            } else {
                m.apply(&tv[j], &gv[j]).map(Some)
            }
        })?;
    }
    let pick = |f: fn(&(Option<f64>, Option<f64>)) -> Option<f64>| -> Option<DistanceTriple> {
        Some(DistanceTriple {
            ks: f(&sides[0])?,
            wasserstein: f(&sides[1])?,
            mae: f(&sides[2])?,
        })
    };
    Ok((pick(|s| s.0), pick(|s| s.1)))
}

/// Scott bandwidth `sigma * n^(-1/5)`, floored at `1e-6 max(|x|, 1)`.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64, MetricsError> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("kde samples"));
    }
    let m = mean(samples);
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let bw = var.sqrt() * (n as f64).powf(-0.2);
    let scale = samples.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    Ok(bw.max(1e-6 * scale))
}

/// Gaussian kernel density estimate evaluated at `eval`.
pub fn kde_pdf(samples: &[f64], eval: &[f64]) -> Result<Vec<f64>, MetricsError> {
    let bw = scott_bandwidth(samples)?;
    let norm = 1.0 / (samples.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    Ok(eval
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| (-0.5 * ((x - s) / bw).powi(2)).exp())
                .sum::<f64>()
        })
        .collect())
}

/// ECDF of `samples` at `eval`.
pub fn ecdf(samples: &[f64], eval: &[f64]) -> Result<Vec<f64>, MetricsError> {
    let s = sorted(samples, "ecdf samples")?;
    let n = s.len() as f64;
    Ok(eval
        .iter()
        .map(|&x| s.partition_point(|&v| v <= x) as f64 / n)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub time_to_bottom: DistanceTriple,
    pub time_to_bottom_bada_mae: f64,
    pub cas_above: Option<DistanceTriple>,
    pub cas_below: Option<DistanceTriple>,
    pub rocd_above: Option<DistanceTriple>,
    pub rocd_below: Option<DistanceTriple>,
    pub cas_bada_mae_above: Option<f64>,
    pub cas_bada_mae_below: Option<f64>,
    pub rocd_bada_mae_above: Option<f64>,
    pub rocd_bada_mae_below: Option<f64>,
    pub transition_altitude_used: f64,
    pub n_test_spanning: usize,
    pub n_generated_spanning: usize,
}

/// Distances between test and generated tracks, plus MAE of the single
/// deterministic baseline track against the test set.
pub fn build_report(
    test: &[Track],
    gen: &[Track],
    bada: &Track,
    grid: &AltitudeGrid,
    h_trans: f64,
) -> Result<MetricsReport, MetricsError> {
    let ttb_test = time_to_bottom_distribution(test, grid)?;
    let ttb_gen = time_to_bottom_distribution(gen, grid)?;
    let ttb_bada = bada
        .time_to_bottom(grid)
        .ok_or(MetricsError::NoSpanningTrajectory("baseline"))?;
    let time_to_bottom = DistanceTriple::between(&ttb_test, &ttb_gen)?;
    let time_to_bottom_bada_mae = mae_of_means(&ttb_test, &[ttb_bada])?;

    let bada_set = std::slice::from_ref(bada);
    let mut per_q = Vec::new();
    for q in [Quantity::Cas, Quantity::Rocd] {
        let tv = level_values(test, grid, q);
        let gv = level_values(gen, grid, q);
        let bv = level_values(bada_set, grid, q);
        let (above, below) = per_level_triples(&tv, &gv, grid, h_trans)?;
        let (b_above, b_below) = split_mean(grid, h_trans, |j| {
            if tv[j].is_empty() || bv[j].is_empty() {
                Ok(None)
            } else {
                mae_of_means(&tv[j], &bv[j]).map(Some)
            }
        })?;
        per_q.push((above, below, b_above, b_below));
    }
    let (cas_above, cas_below, cas_bada_mae_above, cas_bada_mae_below) = per_q[0];
    let (rocd_above, rocd_below, rocd_bada_mae_above, rocd_bada_mae_below) = per_q[1];
    Ok(MetricsReport {
        time_to_bottom,
        time_to_bottom_bada_mae,
        cas_above,
        cas_below,
        rocd_above,
        rocd_below,
        cas_bada_mae_above,
        cas_bada_mae_below,
        rocd_bada_mae_above,
        rocd_bada_mae_below,
        transition_altitude_used: h_trans,
        n_test_spanning: ttb_test.len(),
        n_generated_spanning: ttb_gen.len(),
    })
}

/// One cell of the flat report table. `value` is `None` for a side with no
/// levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub aircraft: String,
    pub quantity: String,
    pub split: String,
    pub measure: String,
    pub value: Option<f64>,
}

pub const REPORT_HEADER: &str = "aircraft,quantity,split,measure,value";

impl MetricsReport {
    /// Flat rows: time to bottom, then CAS and ROCD above and below, each
    /// with ks, wasserstein, mae and bada_mae.
    pub fn rows(&self, aircraft: &str) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let mut push = |quantity: &str, split: &str, t: Option<DistanceTriple>, bada: Option<f64>| {
            for m in Measure::ALL {
                rows.push(ReportRow {
                    aircraft: aircraft.to_string(),
                    quantity: quantity.into(),
                    split: split.into(),
                    measure: m.name().into(),
                    value: t.map(|t| t.get(m)),
                });
            }
            rows.push(ReportRow {
                aircraft: aircraft.to_string(),
                quantity: quantity.into(),
                split: split.into(),
                measure: "bada_mae".into(),
                value: bada,
            });
        };
        push("time_to_bottom", "all", Some(self.time_to_bottom), Some(self.time_to_bottom_bada_mae));
        push("cas", "above", self.cas_above, self.cas_bada_mae_above);
        push("cas", "below", self.cas_below, self.cas_bada_mae_below);
        push("rocd", "above", self.rocd_above, self.rocd_bada_mae_above);
        push("rocd", "below", self.rocd_below, self.rocd_bada_mae_below);
        rows
    }
}

pub fn write_report_rows<W: Write>(mut w: W, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{v}", r.aircraft, r.quantity, r.split, r.measure)?;
    }
    w.flush()
}

pub const CURVE_HEADER: &str = "quantity,source,x,ecdf,pdf";

/// ECDF and KDE of one quantity for each named sample set, evaluated on a
/// shared grid of `n_points` spanning all sets plus three bandwidths.
pub fn write_curves<W: Write>(
    mut w: W,
    quantity: &str,
    sets: &[(&str, &[f64])],
    n_points: usize,
) -> Result<(), std::io::Error> {
    let usable: Vec<&(&str, &[f64])> = sets.iter().filter(|(_, s)| s.len() >= 2).collect();
    if usable.is_empty() || n_points < 2 {
        return Ok(());
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, s) in &usable {
        let bw = scott_bandwidth(s).unwrap_or(0.0);
        for &x in s.iter() {
            lo = lo.min(x - 3.0 * bw);
            hi = hi.max(x + 3.0 * bw);
        }
    }
    let xs: Vec<f64> = (0..n_points)
        .map(|k| lo + (hi - lo) * k as f64 / (n_points - 1) as f64)
        .collect();
    for (name, s) in usable {
        let (Ok(f), Ok(p)) = (ecdf(s, &xs), kde_pdf(s, &xs)) else {
            continue;
        };
        for k in 0..n_points {
            writeln!(w, "{quantity},{name},{},{},{}", xs[k], f[k], p[k])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid5() -> AltitudeGrid {
        AltitudeGrid::from_flight_levels(150, 154).unwrap()
    }

    /// ECDF difference evaluated at every sample point by direct counting.
    fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    /// Mean absolute difference of matched order statistics (equal sizes).
    fn w1_sorted_match(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn ks_fixtures() {
        assert_eq!(ks_distance(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(ks_distance(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[0.5, 1.5]).unwrap(), 0.5);
        assert!(ks_distance(&[], &[1.0]).is_err());
        assert!(ks_distance(&[1.0], &[]).is_err());
    }

    #[test]
    fn w1_fixtures() {
        assert_eq!(wasserstein1(&[0.0, 2.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((wasserstein1(&[0.0, 2.0], &[1.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((wasserstein1(&[0.0], &[0.0, 4.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(wasserstein1(&[], &[1.0]).is_err());
    }

    #[test]
    fn mae_fixtures() {
        assert_eq!(mae_of_means(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mae_of_means(&[90.0, 110.0], &[85.0, 95.0]).unwrap(), 10.0);
        assert!(mae_of_means(&[], &[1.0]).is_err());
        assert!(mae_of_means(&[1.0], &[]).is_err());
    }

    #[test]
    fn exhaustive_small_fixtures() {
        // Every pair of multisets of size 1..=3 over {0, 1, 2}.
        let mut sets: Vec<Vec<f64>> = Vec::new();
        for n in 1..=3u32 {
            for code in 0..3u32.pow(n) {
                let mut c = code;
                let mut s = Vec::new();
                for _ in 0..n {
                    s.push((c % 3) as f64);
                    c /= 3;
                }
                sets.push(s);
            }
        }
        for a in &sets {
            for b in &sets {
                let ks = ks_distance(a, b).unwrap();
                assert!((ks - ks_brute(a, b)).abs() < 1e-12, "{a:?} {b:?}");
                if a.len() == b.len() {
                    let w = wasserstein1(a, b).unwrap();
                    assert!((w - w1_sorted_match(a, b)).abs() < 1e-12, "{a:?} {b:?}");
                }
                let m = mae_of_means(a, b).unwrap();
                let direct = (a.iter().sum::<f64>() / a.len() as f64
                    - b.iter().sum::<f64>() / b.len() as f64)
                    .abs();
                assert!((m - direct).abs() < 1e-12);
            }
        }
    }

    fn constant_rate_track(h_top: f64, h_bot: f64, rate: f64, cas: f64) -> Track {
        let n = 40;
        let h: Vec<f64> = (0..=n)
            .map(|k| h_top - (h_top - h_bot) * k as f64 / n as f64)
            .collect();
        Track {
            t: h.iter().map(|x| (h_top - x) / rate).collect(),
            cas: vec![cas; h.len()],
            rocd: vec![-rate; h.len()],
            h,
        }
    }

    #[test]
    fn time_to_bottom_constant_rate() {
        let g = AltitudeGrid::from_flight_levels(150, 250).unwrap();
        let tr = constant_rate_track(g.h_f() + 500.0, g.h_i() - 300.0, 10.0, 140.0);
        let d = time_to_bottom_distribution(&[tr], &g).unwrap();
        assert!((d[0] - (g.h_f() - g.h_i()) / 10.0).abs() < 1e-6);
    }

    #[test]
    fn time_to_bottom_filters_spanning() {
        let g = AltitudeGrid::from_flight_levels(150, 250).unwrap();
        let full = constant_rate_track(g.h_f(), g.h_i(), 10.0, 140.0);
        let low = constant_rate_track(g.h_f() - 600.0, g.h_i(), 10.0, 140.0);
        let high = constant_rate_track(g.h_f(), g.h_i() + 100.0, 10.0, 140.0);
        let set = vec![full.clone(), low.clone(), high.clone(), full.clone()];
        let expected = set
            .iter()
            .filter(|t| {
                let lo = t.h.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = t.h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                lo <= g.h_i() + 1e-6 && hi >= g.h_f() - 1e-6
            })
            .count();
        assert_eq!(time_to_bottom_distribution(&set, &g).unwrap().len(), expected);
        assert!(matches!(
            time_to_bottom_distribution(&[low, high], &g),
            Err(MetricsError::NoSpanningTrajectory(_))
        ));
    }

    /// Track with given CAS at the five levels of `grid5`.
    fn level_track(cas: [f64; 5]) -> Track {
        let g = grid5();
        let h = g.levels().to_vec();
        Track {
            t: h.iter().map(|x| (g.h_f() - x) / 10.0).collect(),
            rocd: cas.iter().map(|c| -c / 20.0).collect(),
            cas: cas.to_vec(),
            h,
        }
    }

    #[test]
    fn per_level_hand_fixture() {
        let g = grid5();
        let test = [
            level_track([100.0, 101.0, 102.0, 103.0, 104.0]),
            level_track([110.0, 111.0, 112.0, 113.0, 114.0]),
            level_track([120.0, 121.0, 122.0, 123.0, 124.0]),
        ];
        let gen = [
            level_track([105.0, 101.0, 130.0, 90.0, 104.0]),
            level_track([115.0, 111.0, 131.0, 91.0, 114.0]),
            level_track([125.0, 121.0, 132.0, 92.0, 124.0]),
        ];
        // Per level: {1/3, 0, 1, 1, 0}. Transition between levels 2 and 3.
        let h_trans = g.levels()[2];
        let (above, below) =
            per_level_distance(&test, &gen, &g, Quantity::Cas, Measure::Ks, h_trans).unwrap();
        assert!((above.unwrap() - 0.5).abs() < 1e-12);
        assert!((below.unwrap() - (1.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
        let per_level: Vec<f64> = (0..5)
            .map(|j| {
                let a: Vec<f64> = test.iter().map(|t| t.cas[j]).collect();
                let b: Vec<f64> = gen.iter().map(|t| t.cas[j]).collect();
                ks_brute(&a, &b)
            })
            .collect();
        assert_eq!(per_level.iter().map(|v| (v * 3.0).round()).collect::<Vec<_>>(), vec![1.0, 0.0, 3.0, 3.0, 0.0]);
    }

    #[test]
    fn per_level_identity_and_shift() {
        let g = grid5();
        let test = [
            level_track([100.0, 101.0, 102.0, 103.0, 104.0]),
            level_track([110.0, 109.0, 112.0, 113.0, 118.0]),
        ];
        let h_trans = g.levels()[1] + 10.0;
        for q in [Quantity::Cas, Quantity::Rocd] {
            for m in Measure::ALL {
                let (a, b) = per_level_distance(&test, &test, &g, q, m, h_trans).unwrap();
                assert_eq!(a, Some(0.0));
                assert_eq!(b, Some(0.0));
            }
        }
        let shifted: Vec<Track> = test
            .iter()
            .map(|t| Track {
                cas: t.cas.iter().map(|c| c + 5.0).collect(),
                ..t.clone()
            })
            .collect();
        let (a, b) =
            per_level_distance(&test, &shifted, &g, Quantity::Cas, Measure::Mae, h_trans).unwrap();
        assert!((a.unwrap() - 5.0).abs() < 1e-12 && (b.unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn per_level_side_absent_and_ties_below() {
        let g = grid5();
        let test = [level_track([1.0, 2.0, 3.0, 4.0, 5.0])];
        let (a, b) =
            per_level_distance(&test, &test, &g, Quantity::Cas, Measure::Mae, g.h_f()).unwrap();
        assert_eq!(a, None);
        assert_eq!(b, Some(0.0));
        assert!(per_level_distance(&[], &test, &g, Quantity::Cas, Measure::Ks, 0.0).is_err());
    }

    #[test]
    fn per_level_uses_observed_levels_only() {
        let g = grid5();
        let full = level_track([100.0; 5]);
        let mut partial = level_track([200.0; 5]);
        for v in [&mut partial.h, &mut partial.t, &mut partial.cas, &mut partial.rocd] {
            v.truncate(2);
        }
        // Partial track observes the two lowest levels only.
        let vals = level_values(&[full, partial], &g, Quantity::Cas);
        assert_eq!(vals.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn kde_properties() {
        let xs: Vec<f64> = (0..200).map(|k| ((k as f64) * 0.61803).fract() - 0.5).collect();
        let bw = scott_bandwidth(&xs).unwrap();
        let m = mean(&xs);
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 199.0).sqrt();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0 * sd;
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * sd;
        let n = 4001;
        let grid: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
        let p = kde_pdf(&xs, &grid).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
        let dx = (hi - lo) / (n - 1) as f64;
        let integral: f64 = p.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum();
        assert!((integral - 1.0).abs() < 0.01, "{integral}");
        assert!((bw - sd * 200f64.powf(-0.2)).abs() < 1e-12);

        let cluster = [-0.1, 0.0, 0.0, 0.1];
        let ev: Vec<f64> = (-100..=100).map(|k| k as f64 * 0.01).collect();
        let pc = kde_pdf(&cluster, &ev).unwrap();
        let imax = (0..ev.len()).max_by(|&a, &b| pc[a].total_cmp(&pc[b])).unwrap();
        assert!(ev[imax].abs() < 0.02);

        let flat = [3.0, 3.0, 3.0];
        assert_eq!(scott_bandwidth(&flat).unwrap(), 3e-6);
        assert!(kde_pdf(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn bandwidth_scales_with_n() {
        let base = [0.0, 1.0];
        let big: Vec<f64> = base.iter().cycle().take(64).cloned().collect();
        let small: Vec<f64> = base.iter().cycle().take(2).cloned().collect();
        let sd_ratio = {
            let s = |v: &[f64]| {
                let m = mean(v);
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            };
            s(&big) / s(&small)
        };
        let r = scott_bandwidth(&big).unwrap() / scott_bandwidth(&small).unwrap();
        assert!((r - sd_ratio * 32f64.powf(-0.2)).abs() < 1e-12);
    }

    #[test]
    fn report_identity_and_schema() {
        let g = grid5();
        let test = vec![
            level_track([100.0, 101.0, 102.0, 103.0, 104.0]),
            level_track([110.0, 109.0, 112.0, 113.0, 118.0]),
        ];
        let bada = level_track([105.0; 5]);
        let h_trans = g.levels()[2];
        let r = build_report(&test, &test, &bada, &g, h_trans).unwrap();
        assert_eq!(r.time_to_bottom, DistanceTriple { ks: 0.0, wasserstein: 0.0, mae: 0.0 });
        for t in [r.cas_above, r.cas_below, r.rocd_above, r.rocd_below] {
            assert_eq!(t, Some(DistanceTriple { ks: 0.0, wasserstein: 0.0, mae: 0.0 }));
        }
        let expected_cas_below = [100.0, 101.0, 102.0]
            .iter()
            .zip([110.0, 109.0, 112.0])
            .map(|(a, b)| ((a + b) / 2.0 - 105.0f64).abs())
            .sum::<f64>()
            / 3.0;
        assert!((r.cas_bada_mae_below.unwrap() - expected_cas_below).abs() < 1e-12);
        let rows = r.rows("SYN1");
        assert_eq!(rows.len(), 5 * 4);
        let mut buf = Vec::new();
        write_report_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert_eq!(text.lines().count(), 21);

        let all_below = build_report(&test, &test, &bada, &g, g.h_f() + 1.0).unwrap();
        assert_eq!(all_below.cas_above, None);
        assert_eq!(all_below.rocd_bada_mae_above, None);
        assert!(all_below.rows("X").iter().any(|r| r.split == "above" && r.value.is_none()));
    }

    #[test]
    fn curves_emit_rows() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 2.5];
        let mut buf = Vec::new();
        write_curves(&mut buf, "time_to_bottom", &[("test", &a), ("generated", &b)], 11).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 22);
        let last_test = text.lines().nth(10).unwrap();
        assert!(last_test.split(',').nth(3).unwrap() == "1");
    }

    proptest! {
        #[test]
        fn ks_symmetric_bounded_order_invariant(
            a in proptest::collection::vec(-50.0f64..50.0, 1..30),
            b in proptest::collection::vec(-50.0f64..50.0, 1..30),
        ) {
            let d = ks_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, ks_distance(&b, &a).unwrap());
            prop_assert!((d - ks_brute(&a, &b)).abs() < 1e-12);
            let mut r = a.clone();
            r.reverse();
            prop_assert_eq!(d, ks_distance(&r, &b).unwrap());
            prop_assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn w1_metric_properties(
            a in proptest::collection::vec(-50.0f64..50.0, 1..25),
            b in proptest::collection::vec(-50.0f64..50.0, 1..25),
            c in proptest::collection::vec(-50.0f64..50.0, 1..25),
            shift in -20.0f64..20.0,
        ) {
            let ab = wasserstein1(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() < 1e-9);
            let ac = wasserstein1(&a, &c).unwrap();
            let cb = wasserstein1(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-9);
            let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let am = wasserstein1(&a, &moved).unwrap();
            prop_assert!((am - shift.abs()).abs() < 1e-9);
            let bm = wasserstein1(&moved, &b).unwrap();
            prop_assert!((bm - ab).abs() <= shift.abs() + 1e-9);
        }

        #[test]
        fn w1_matches_order_statistics(
            pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..30),
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!((wasserstein1(&a, &b).unwrap() - w1_sorted_match(&a, &b)).abs() < 1e-9);
        }
    }
}
