//! Rejection-sampling generator: latent draw, reconstruction, plausibility
//! check, start-level draw and descent integration.

use std::io::Write;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fpca::{reconstruct, AltitudeGrid, FpcaBasis, FpcaError, GappyCurveMatrix, WeightVector};
use crate::latent::LatentModel;
use crate::physics::{DescentProfile, Integrator, PhysicsError, SimulatedTrajectory, TrajectorySample};
use crate::rng;

/// Consecutive rejections tolerated for one sample.
pub const MAX_ATTEMPTS: usize = 1000;
pub const LOWER_FACTOR: f64 = 0.95;
pub const UPPER_FACTOR: f64 = 1.05;
pub const TRAJECTORY_HEADER: &str = "traj_id,t_s,h_m,v_cas_mps,v_tas_mps,rocd_mps,drag_n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error(
        "sample {sample} stalled after {attempts} rejections \
         (drag bounds {drag}, cas bounds {cas}, non-descending {non_descending}); last: {last}"
    )]
    Stalled {
        sample: usize,
        attempts: usize,
        drag: usize,
        cas: usize,
        non_descending: usize,
        last: String,
    },
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error("no start level: the test set has no trajectory reaching the grid")]
    NoStartLevels,
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("trajectory file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Io(String),
}

/// Per-level envelopes `[0.95 min, 1.05 max]` of the observed training values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityBounds {
    pub grid: AltitudeGrid,
    pub drag_lower: Vec<f64>,
    pub drag_upper: Vec<f64>,
    pub cas_lower: Vec<f64>,
    pub cas_upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    DragBounds { level: usize },
    CasBounds { level: usize },
    NonDescending,
}

fn level_envelope(f: &GappyCurveMatrix) -> (Vec<f64>, Vec<f64>) {
    let n_g = f.n_levels();
    let mut lo = vec![f64::NAN; n_g];
    let mut hi = vec![f64::NAN; n_g];
    for j in 0..n_g {
        for r in 0..f.n_rows() {
            if f.mask()[(r, j)] {
                let v = f.values()[(r, j)];
                lo[j] = if lo[j].is_nan() { v } else { lo[j].min(v) };
                hi[j] = if hi[j].is_nan() { v } else { hi[j].max(v) };
            }
        }
    }
    let missing: Vec<usize> = (0..n_g).filter(|&j| lo[j].is_nan()).collect();
    if !missing.is_empty() && missing.len() < n_g {
        warn!("{} grid levels unobserved in training; bounds copied from the nearest observed level", missing.len());
        let observed: Vec<usize> = (0..n_g).filter(|&j| !lo[j].is_nan()).collect();
        for j in missing {
            let near = *observed
                .iter()
                .min_by_key(|&&o| (o as i64 - j as i64).abs())
                .expect("some level observed");
            lo[j] = lo[near];
            hi[j] = hi[near];
        }
    }
    (
        lo.iter().map(|v| LOWER_FACTOR * v).collect(),
        hi.iter().map(|v| UPPER_FACTOR * v).collect(),
    )
}

/// Bounds from the observed entries of the training drag and CAS matrices.
pub fn compute_bounds(
    drag: &GappyCurveMatrix,
    cas: &GappyCurveMatrix,
) -> Result<PlausibilityBounds, GenerationError> {
    if drag.grid() != cas.grid() {
        return Err(GenerationError::Mismatch("drag and CAS grids differ".into()));
    }
    if drag.n_rows() == 0 {
        return Err(GenerationError::Mismatch("no training rows".into()));
    }
    let (drag_lower, drag_upper) = level_envelope(drag);
    let (cas_lower, cas_upper) = level_envelope(cas);
    Ok(PlausibilityBounds {
        grid: drag.grid().clone(),
        drag_lower,
        drag_upper,
        cas_lower,
        cas_upper,
    })
}

impl PlausibilityBounds {
    /// First violated level, drag checked before CAS.
    pub fn check(&self, profile: &DescentProfile) -> Option<Rejection> {
        let outside = |v: &[f64], lo: &[f64], hi: &[f64]| {
            (0..v.len()).find(|&i| !(v[i] >= lo[i] && v[i] <= hi[i]))
        };
        if let Some(level) = outside(&profile.drag_values, &self.drag_lower, &self.drag_upper) {
            return Some(Rejection::DragBounds { level });
        }
        if let Some(level) = outside(&profile.cas_values, &self.cas_lower, &self.cas_upper) {
            return Some(Rejection::CasBounds { level });
        }
        None
    }

    pub fn contains(&self, profile: &DescentProfile) -> bool {
        self.check(profile).is_none()
    }
}

/// Empirical distribution of top-of-descent grid levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLevels {
    pub levels: Vec<f64>,
}

impl InitialLevels {
    /// Each top altitude is snapped down to the grid and capped at its top;
    /// tops below the grid are ignored.
    pub fn from_tops(tops: &[f64], grid: &AltitudeGrid) -> Result<Self, GenerationError> {
        let levels: Vec<f64> = tops.iter().filter_map(|&h| grid.snap_down(h)).collect();
        if levels.is_empty() {
            return Err(GenerationError::NoStartLevels);
        }
        Ok(Self { levels })
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> f64 {
        self.levels[rng.random_range(0..self.levels.len())]
    }
}

/// One start level from a fresh stream of `seed`.
pub fn sample_initial_level(levels: &InitialLevels, seed: u64) -> f64 {
    levels.sample(&mut rng::seeded(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub accepted: usize,
    /// All rejected latent draws.
    pub rejected: usize,
    /// `rejected / (rejected + accepted)`.
    pub resample_rate: f64,
    pub seed: u64,
    pub rejected_drag_bounds: usize,
    pub rejected_cas_bounds: usize,
    pub rejected_non_descending: usize,
}

impl GenerationReport {
    pub fn total_draws(&self) -> usize {
        self.accepted + self.rejected
    }
}

/// Everything needed to turn latent draws into descents.
#[derive(Debug, Clone)]
pub struct Generator<'a> {
    pub model: &'a LatentModel,
    pub basis_drag: &'a FpcaBasis,
    pub basis_cas: &'a FpcaBasis,
    pub bounds: &'a PlausibilityBounds,
    pub starts: &'a InitialLevels,
    pub integrator: &'a Integrator,
}

#[derive(Default)]
struct Tally {
    drag: usize,
    cas: usize,
    non_descending: usize,
}

impl Generator<'_> {
    fn validate(&self) -> Result<(), GenerationError> {
        let n_a = self.basis_drag.n_modes();
        let n_b = self.basis_cas.n_modes();
        if self.model.dim != n_a + n_b {
            return Err(GenerationError::Mismatch(format!(
                "model dimension {} but bases have {n_a} + {n_b} modes",
                self.model.dim
            )));
        }
        let n_g = self.bounds.grid.len();
        if self.basis_drag.n_levels() != n_g || self.basis_cas.n_levels() != n_g {
            return Err(GenerationError::Mismatch("bases and bounds use different grids".into()));
        }
        if self.starts.levels.is_empty() {
            return Err(GenerationError::NoStartLevels);
        }
        Ok(())
    }

    /// Draws latent weights until a profile passes the bounds and descends
    /// everywhere, then integrates it from a drawn start level.
    fn one(
        &self,
        k: usize,
        seed: u64,
        sampler: &crate::latent::Sampler<'_>,
    ) -> Result<(SimulatedTrajectory, Tally), GenerationError> {
        let mut rng = rng::substream(seed, k as u64);
        let h_start = self.starts.sample(&mut rng);
        let n_a = self.basis_drag.n_modes();
        let mut tally = Tally::default();
        let mut last = String::new();
        for _ in 0..MAX_ATTEMPTS {
            let w = sampler.draw(&mut rng);
            let weights = WeightVector::from_concatenated(&w, n_a);
            let profile = reconstruct(&weights, self.basis_drag, self.basis_cas, &self.bounds.grid)?;
            match self.bounds.check(&profile) {
                Some(Rejection::DragBounds { level }) => {
                    tally.drag += 1;
                    last = format!(
                        "drag {:.1} N outside [{:.1}, {:.1}] at {:.0} m",
                        profile.drag_values[level],
                        self.bounds.drag_lower[level],
                        self.bounds.drag_upper[level],
                        self.bounds.grid.levels()[level]
                    );
                    continue;
                }
                Some(Rejection::CasBounds { level }) => {
                    tally.cas += 1;
                    last = format!(
                        "cas {:.2} m/s outside [{:.2}, {:.2}] at {:.0} m",
                        profile.cas_values[level],
                        self.bounds.cas_lower[level],
                        self.bounds.cas_upper[level],
                        self.bounds.grid.levels()[level]
                    );
                    continue;
                }
                Some(Rejection::NonDescending) | None => {}
            }
            let sim = self
                .integrator
                .check_descending(&profile)
                .and_then(|_| self.integrator.integrate(&profile, h_start));
            match sim {
                Ok(sim) => return Ok((sim, tally)),
                Err(e) => {
                    tally.non_descending += 1;
                    last = e.to_string();
                }
            }
        }
        Err(GenerationError::Stalled {
            sample: k,
            attempts: MAX_ATTEMPTS,
            drag: tally.drag,
            cas: tally.cas,
            non_descending: tally.non_descending,
            last,
        })
    }

    /// `n` descents. Sample `k` uses substream `k` of `seed`, so the output
    /// does not depend on scheduling.
    pub fn generate(
        &self,
        n: usize,
        seed: u64,
    ) -> Result<(Vec<SimulatedTrajectory>, GenerationReport), GenerationError> {
        self.validate()?;
        let sampler = self.model.sampler();
        let results: Vec<Result<(SimulatedTrajectory, Tally), GenerationError>> = (0..n)
            .into_par_iter()
            .map(|k| self.one(k, seed, &sampler))
            .collect();
        let mut out = Vec::with_capacity(n);
        let mut report = GenerationReport {
            requested: n,
            accepted: 0,
            rejected: 0,
            resample_rate: 0.0,
            seed,
            rejected_drag_bounds: 0,
            rejected_cas_bounds: 0,
            rejected_non_descending: 0,
        };
        for r in results {
            let (sim, t) = r?;
            report.rejected_drag_bounds += t.drag;
            report.rejected_cas_bounds += t.cas;
            report.rejected_non_descending += t.non_descending;
            out.push(sim);
        }
        report.accepted = out.len();
        report.rejected =
            report.rejected_drag_bounds + report.rejected_cas_bounds + report.rejected_non_descending;
        let draws = report.total_draws();
        report.resample_rate = if draws == 0 {
            0.0
        } else {
            report.rejected as f64 / draws as f64
        };
        Ok((out, report))
    }
}

pub fn write_trajectories_to<W: Write>(mut w: W, trajs: &[SimulatedTrajectory]) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for (k, t) in trajs.iter().enumerate() {
        for s in &t.samples {
            writeln!(w, "{k},{},{},{},{},{},{}", s.t, s.h, s.v_cas, s.v_tas, s.rocd, s.drag)?;
        }
    }
    w.flush()
}

pub fn write_trajectories(path: &Path, trajs: &[SimulatedTrajectory]) -> Result<(), GenerationError> {
    let f = std::fs::File::create(path)
        .map_err(|e| GenerationError::Io(format!("{}: {e}", path.display())))?;
    write_trajectories_to(std::io::BufWriter::new(f), trajs)
        .map_err(|e| GenerationError::Io(format!("{}: {e}", path.display())))
}

/// Reads a trajectory CSV written by [`write_trajectories`]. Time to bottom
/// is the time of each trajectory's last sample.
pub fn parse_trajectories(text: &str) -> Result<Vec<SimulatedTrajectory>, GenerationError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAJECTORY_HEADER => {}
        other => {
            return Err(GenerationError::Parse {
                line: 1,
                msg: format!("expected header {TRAJECTORY_HEADER:?}, found {other:?}"),
            })
        }
    }
    let mut out: Vec<SimulatedTrajectory> = Vec::new();
    let mut current: Option<String> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(GenerationError::Parse {
                line: line_no,
                msg: format!("expected 7 columns, found {}", cols.len()),
            });
        }
        let v = cols[1..]
            .iter()
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| GenerationError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let sample = TrajectorySample {
            t: v[0],
            h: v[1],
            v_cas: v[2],
            v_tas: v[3],
            rocd: v[4],
            drag: v[5],
        };
        if current.as_deref() != Some(cols[0]) {
            current = Some(cols[0].to_string());
            out.push(SimulatedTrajectory {
                samples: Vec::new(),
                time_to_bottom: 0.0,
            });
        }
        let t = out.last_mut().expect("pushed above");
        t.samples.push(sample);
        t.time_to_bottom = sample.t - t.samples[0].t;
    }
    Ok(out)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<SimulatedTrajectory>, GenerationError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GenerationError::Io(format!("{}: {e}", path.display())))?;
    parse_trajectories(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{fit_gaussian, LatentParams, Scaler};
    use crate::physics::{AircraftConfig, DescentDynamics};
    use nalgebra::{DMatrix, DVector};

    fn aircraft() -> AircraftConfig {
        AircraftConfig::from_toml_str(
            r#"
            type_code = "GEN1"
            mass = 65000.0
            idle_thrust_coeffs = [5000.0, 40000.0, 0.0]
            cas_ref = 150.0
            mach_ref = 0.78
            max_fl = 377
            nominal_drag_coeffs = [40000.0, 0.0, 0.0]
            nominal_cas_schedule = [{ h_m = 4572.0, cas_mps = 140.0 }]
            "#,
        )
        .unwrap()
    }

    fn grid() -> AltitudeGrid {
        AltitudeGrid::from_flight_levels(150, 250).unwrap()
    }

    fn basis(mean: f64, n_g: usize) -> FpcaBasis {
        let mut modes = DMatrix::zeros(n_g, 1);
        modes.fill(1.0 / (n_g as f64).sqrt());
        FpcaBasis {
            mean: vec![mean; n_g],
            modes,
            eigenvalues: vec![1.0],
            explained_variance: 1.0,
            total_variance: 1.0,
        }
    }

    fn matrix(rows: &[Vec<f64>], g: &AltitudeGrid) -> GappyCurveMatrix {
        let n_g = g.len();
        let v = DMatrix::from_fn(rows.len(), n_g, |r, j| rows[r][j]);
        GappyCurveMatrix::new(v, DMatrix::from_element(rows.len(), n_g, true), g.clone()).unwrap()
    }

    fn point_mass(dim: usize) -> LatentModel {
        let mut m = fit_gaussian(&[vec![0.0; dim], vec![0.0; dim]], 0).unwrap();
        m.params = LatentParams::Gaussian {
            mean: DVector::zeros(dim),
            covariance: DMatrix::zeros(dim, dim),
        };
        m.scaler = Scaler::identity(dim);
        m
    }

    #[test]
    fn bounds_formula() {
        let g = AltitudeGrid::from_flight_levels(150, 151).unwrap();
        let d = matrix(&[vec![100.0, 150.0], vec![200.0, 150.0]], &g);
        let b = compute_bounds(&d, &d).unwrap();
        assert!((b.drag_lower[0] - 95.0).abs() < 1e-12 && (b.drag_upper[0] - 210.0).abs() < 1e-12);
        assert!((b.drag_lower[1] - 142.5).abs() < 1e-12 && (b.drag_upper[1] - 157.5).abs() < 1e-12);
    }

    #[test]
    fn training_rows_pass_their_own_bounds() {
        let g = grid();
        let n_g = g.len();
        let drag: Vec<Vec<f64>> = (0..20)
            .map(|r| (0..n_g).map(|j| 38_000.0 + 100.0 * r as f64 + 7.0 * j as f64).collect())
            .collect();
        let cas: Vec<Vec<f64>> = (0..20)
            .map(|r| (0..n_g).map(|j| 130.0 + 0.5 * r as f64 - 0.01 * j as f64).collect())
            .collect();
        let b = compute_bounds(&matrix(&drag, &g), &matrix(&cas, &g)).unwrap();
        for r in 0..20 {
            let p = DescentProfile::new(g.clone(), drag[r].clone(), cas[r].clone()).unwrap();
            assert!(b.contains(&p));
        }
    }

    #[test]
    fn unobserved_level_copies_nearest() {
        let g = AltitudeGrid::from_flight_levels(150, 153).unwrap();
        let v = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
        let m = DMatrix::from_row_slice(2, 4, &[true, true, false, false, true, true, false, false]);
        let f = GappyCurveMatrix::new(v, m, g).unwrap();
        let b = compute_bounds(&f, &f).unwrap();
        assert_eq!(b.drag_lower[3], b.drag_lower[1]);
        assert_eq!(b.drag_upper[2], b.drag_upper[1]);
    }

    #[test]
    fn initial_levels() {
        let g = grid();
        let only = InitialLevels::from_tops(&[crate::units::fl_to_m(200) + 10.0], &g).unwrap();
        for s in 0..20 {
            assert_eq!(sample_initial_level(&only, s), crate::units::fl_to_m(200));
        }
        let two = InitialLevels::from_tops(&[crate::units::fl_to_m(200), 9000.0], &g).unwrap();
        assert_eq!(two.levels[1], g.h_f());
        let mut rng = rng::seeded(3);
        let n = 10_000;
        let hits = (0..n).filter(|_| two.sample(&mut rng) == g.h_f()).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits - 5000.0).abs() < 3.0 * sigma);
        assert!(InitialLevels::from_tops(&[1000.0], &g).is_err());
        assert_eq!(sample_initial_level(&two, 9), sample_initial_level(&two, 9));
    }

    fn fixture() -> (FpcaBasis, FpcaBasis, PlausibilityBounds, InitialLevels, Integrator) {
        let g = grid();
        let n_g = g.len();
        let bd = basis(40_000.0, n_g);
        let bv = basis(140.0, n_g);
        let lo = |m: f64, s: f64| vec![m - s; n_g];
        let bounds = PlausibilityBounds {
            grid: g.clone(),
            drag_lower: lo(40_000.0, 2000.0),
            drag_upper: lo(40_000.0, -2000.0),
            cas_lower: lo(140.0, 10.0),
            cas_upper: lo(140.0, -10.0),
        };
        let starts = InitialLevels::from_tops(&[g.h_f()], &g).unwrap();
        let integ = Integrator::new(DescentDynamics::from_config(&aircraft()).unwrap());
        (bd, bv, bounds, starts, integ)
    }

    #[test]
    fn point_mass_never_rejects() {
        let (bd, bv, bounds, starts, integ) = fixture();
        let model = point_mass(2);
        let gen = Generator {
            model: &model,
            basis_drag: &bd,
            basis_cas: &bv,
            bounds: &bounds,
            starts: &starts,
            integrator: &integ,
        };
        let (trajs, rep) = gen.generate(25, 1).unwrap();
        assert_eq!(rep.resample_rate, 0.0);
        assert_eq!(rep.accepted, 25);
        for t in &trajs {
            assert_eq!(t, &trajs[0]);
        }
    }

    #[test]
    fn wide_model_rejects_and_accounts() {
        let (bd, bv, bounds, starts, integ) = fixture();
        let mut model = point_mass(2);
        let s = (bd.n_levels() as f64).sqrt();
        model.params = LatentParams::Gaussian {
            mean: DVector::zeros(2),
            covariance: DMatrix::from_diagonal(&DVector::from_vec(vec![
                (1500.0 * s).powi(2),
                (6.0 * s).powi(2),
            ])),
        };
        let gen = Generator {
            model: &model,
            basis_drag: &bd,
            basis_cas: &bv,
            bounds: &bounds,
            starts: &starts,
            integrator: &integ,
        };
        let (trajs, rep) = gen.generate(200, 5).unwrap();
        assert_eq!(trajs.len(), 200);
        assert!(rep.rejected > 0);
        assert_eq!(
            rep.rejected,
            rep.rejected_drag_bounds + rep.rejected_cas_bounds + rep.rejected_non_descending
        );
        assert!((rep.resample_rate - rep.rejected as f64 / rep.total_draws() as f64).abs() < 1e-15);
        for t in &trajs {
            for w in t.samples.windows(2) {
                assert!(w[1].h < w[0].h);
            }
            for s in &t.samples {
                let (i, _) = bounds.grid.locate(s.h);
                assert!(s.drag >= bounds.drag_lower[i] && s.drag <= bounds.drag_upper[i]);
            }
        }
        let (again, rep2) = gen.generate(200, 5).unwrap();
        assert_eq!(again, trajs);
        assert_eq!(rep2, rep);
    }

    #[test]
    fn impossible_bounds_stall() {
        let (bd, bv, mut bounds, starts, integ) = fixture();
        let model = point_mass(2);
        bounds.drag_upper.iter_mut().for_each(|v| *v = 30_000.0);
        bounds.drag_lower.iter_mut().for_each(|v| *v = 30_000.0);
        let gen = Generator {
            model: &model,
            basis_drag: &bd,
            basis_cas: &bv,
            bounds: &bounds,
            starts: &starts,
            integrator: &integ,
        };
        match gen.generate(3, 0) {
            Err(GenerationError::Stalled { attempts, drag, .. }) => {
                assert_eq!(attempts, MAX_ATTEMPTS);
                assert_eq!(drag, MAX_ATTEMPTS);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        let (bd, bv, bounds, starts, integ) = fixture();
        let model = point_mass(3);
        let gen = Generator {
            model: &model,
            basis_drag: &bd,
            basis_cas: &bv,
            bounds: &bounds,
            starts: &starts,
            integrator: &integ,
        };
        assert!(matches!(gen.generate(1, 0), Err(GenerationError::Mismatch(_))));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let (bd, bv, bounds, starts, integ) = fixture();
        let model = point_mass(2);
        let gen = Generator {
            model: &model,
            basis_drag: &bd,
            basis_cas: &bv,
            bounds: &bounds,
            starts: &starts,
            integrator: &integ,
        };
        let (trajs, _) = gen.generate(3, 1).unwrap();
        let mut buf = Vec::new();
        write_trajectories_to(&mut buf, &trajs).unwrap();
        let back = parse_trajectories(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&trajs) {
            assert_eq!(a.samples, b.samples);
            assert!((a.time_to_bottom - b.time_to_bottom).abs() < 1e-9);
        }
        assert!(parse_trajectories("bad\n").is_err());
    }
}
