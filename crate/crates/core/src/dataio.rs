//! Blip CSV ingestion, descent cleaning, train/test splitting, a synthetic
//! fleet with known ground truth, and versioned artifact files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere;
use crate::fpca::AltitudeGrid;
use crate::physics::{AircraftConfig, DescentDynamics, DescentProfile, Integrator, PhysicsError};
use crate::rng;
use crate::units::{fl_to_m, fpm_to_mps};

pub const BLIP_HEADER: [&str; 7] = ["traj_id", "type", "t_s", "h_m", "rocd_mps", "ias_mps", "mach"];
pub const ARTIFACT_FORMAT: &str = "descent-artifact";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("need at least {needed} trajectories, have {found}")]
    TooFewTrajectories { needed: usize, found: usize },
    #[error("invalid train fraction {0}")]
    InvalidFraction(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("artifact parse error: {0}")]
    Parse(String),
    #[error("artifact version {found} is incompatible with version {expected}")]
    Incompatible { found: u32, expected: u32 },
    #[error("artifact holds a {found} but a {expected} was requested")]
    WrongKind { found: String, expected: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One surveillance observation. `v_ias` is used as CAS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarBlip {
    pub t: f64,
    pub h: f64,
    pub rocd: f64,
    pub v_ias: f64,
    pub mach: f64,
}

impl RadarBlip {
    pub fn is_valid(&self) -> bool {
        [self.t, self.h, self.rocd, self.v_ias, self.mach]
            .iter()
            .all(|v| v.is_finite())
            && self.h > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub aircraft_type: String,
    pub blips: Vec<RadarBlip>,
}

impl Trajectory {
    /// Lowest and highest altitude observed.
    pub fn span(&self) -> (f64, f64) {
        self.blips
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| {
                (lo.min(b.h), hi.max(b.h))
            })
    }

    fn check(&self) -> Result<(), String> {
        if let Some(i) = self.blips.iter().position(|b| !b.is_valid()) {
            return Err(format!("blip {i} is not finite or has h <= 0"));
        }
        if let Some(i) = self.blips.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(format!("time not strictly increasing at blip {}", i + 1));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    #[serde(default)]
    pub quarantined: Vec<Quarantined>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self {
            trajectories,
            quarantined: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_blips(&self) -> usize {
        self.trajectories.iter().map(|t| t.blips.len()).sum()
    }

    pub fn ids(&self) -> Vec<String> {
        self.trajectories.iter().map(|t| t.id.clone()).collect()
    }

    /// Keeps only trajectories of one aircraft type.
    pub fn of_type(&self, aircraft_type: &str) -> Dataset {
        Dataset::new(
            self.trajectories
                .iter()
                .filter(|t| t.aircraft_type == aircraft_type)
                .cloned()
                .collect(),
        )
    }
}

pub fn read_blips(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_blips(file)
}

/// Parses blip CSV. Rows are grouped by `traj_id` in order of first
/// appearance. Trajectories with invalid values or non-increasing time are
/// quarantined rather than rejected.
pub fn parse_blips<R: Read>(reader: R) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| DataError::Malformed {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != BLIP_HEADER {
        return Err(DataError::Header {
            found: header.iter().map(String::from).collect(),
            expected: BLIP_HEADER.iter().map(|s| s.to_string()).collect(),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Trajectory> = HashMap::new();
    let mut type_clash: HashMap<String, String> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64, DataError> {
            record[k].parse::<f64>().map_err(|_| DataError::Malformed {
                line,
                msg: format!("column {} is not a number: {:?}", BLIP_HEADER[k], &record[k]),
            })
        };
        let blip = RadarBlip {
            t: num(2)?,
            h: num(3)?,
            rocd: num(4)?,
            v_ias: num(5)?,
            mach: num(6)?,
        };
        let id = record[0].to_string();
        let ty = record[1].to_string();
        let traj = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Trajectory {
                id: id.clone(),
                aircraft_type: ty.clone(),
                blips: Vec::new(),
            }
        });
        if traj.aircraft_type != ty {
            type_clash
                .entry(id)
                .or_insert_with(|| format!("line {line}: type {ty} differs from {}", traj.aircraft_type));
        }
        traj.blips.push(blip);
    }
    let mut out = Dataset::default();
    for id in order {
        let traj = groups.remove(&id).expect("grouped id");
        let problem = type_clash.remove(&id).map(Err).unwrap_or_else(|| traj.check());
        match problem {
            Ok(()) => out.trajectories.push(traj),
            Err(reason) => out.quarantined.push(Quarantined { id, reason }),
        }
    }
    if !out.quarantined.is_empty() {
        warn!("{} trajectories quarantined", out.quarantined.len());
        for q in &out.quarantined {
            warn!("  {}: {}", q.id, q.reason);
        }
    }
    Ok(out)
}

pub fn write_blips(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_blips_to(BufWriter::new(file), data).map_err(io_err(path))
}

pub fn write_blips_to<W: Write>(mut w: W, data: &Dataset) -> std::io::Result<()> {
    writeln!(w, "{}", BLIP_HEADER.join(","))?;
    for traj in &data.trajectories {
        for b in &traj.blips {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                traj.id, traj.aircraft_type, b.t, b.h, b.rocd, b.v_ias, b.mach
            )?;
        }
    }
    w.flush()
}

/// Thresholds for descent cleaning. Rates are in ft/min.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningParams {
    /// Blips descending slower than this are dropped.
    pub min_rocd_fpm: f64,
    /// Minimum length of a constant-ROCD run to remove.
    pub constant_run_len: usize,
    /// Half-width of the band around the run mean.
    pub constant_tol_fpm: f64,
}

impl Default for CleaningParams {
    fn default() -> Self {
        Self {
            min_rocd_fpm: 500.0,
            constant_run_len: 10,
            constant_tol_fpm: 25.0,
        }
    }
}

/// Boolean mask of blips lying in a constant-ROCD run. Runs are grown
/// greedily from each start while every value stays within `tol` of the
/// running mean; runs of at least `min_len` blips are marked.
fn constant_runs(rocd: &[f64], min_len: usize, tol: f64) -> Vec<bool> {
    let n = rocd.len();
    let mut marked = vec![false; n];
    let mut i = 0;
    while i < n {
        let (mut lo, mut hi, mut sum) = (rocd[i], rocd[i], rocd[i]);
        let mut j = i + 1;
        while j < n {
            let (lo2, hi2, sum2) = (lo.min(rocd[j]), hi.max(rocd[j]), sum + rocd[j]);
            let mean = sum2 / (j - i + 1) as f64;
            if hi2 - mean > tol || mean - lo2 > tol {
                break;
            }
            (lo, hi, sum) = (lo2, hi2, sum2);
            j += 1;
        }
        if j - i >= min_len.max(1) {
            marked[i..j].iter_mut().for_each(|m| *m = true);
            i = j;
        } else {
            i += 1;
        }
    }
    marked
}

fn clean_trajectory(traj: &Trajectory, p: &CleaningParams) -> Option<Trajectory> {
    let threshold = -fpm_to_mps(p.min_rocd_fpm);
    let tol = fpm_to_mps(p.constant_tol_fpm);
    let n = traj.blips.len();
    let mut keep: Vec<bool> = traj.blips.iter().map(|b| b.rocd <= threshold).collect();
    // Constant-ROCD runs are searched within each stretch of descending blips.
    let mut i = 0;
    while i < n {
        if !keep[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && keep[j] {
            j += 1;
        }
        let rocd: Vec<f64> = traj.blips[i..j].iter().map(|b| b.rocd).collect();
        for (k, m) in constant_runs(&rocd, p.constant_run_len, tol).into_iter().enumerate() {
            if m {
                keep[i + k] = false;
            }
        }
        i = j;
    }
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < n {
        if !keep[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && keep[j] {
            j += 1;
        }
        if best.is_none_or(|(a, b)| j - i > b - a) {
            best = Some((i, j));
        }
        i = j;
    }
    let (a, b) = best?;
    if b - a < 2 {
        return None;
    }
    Some(Trajectory {
        id: traj.id.clone(),
        aircraft_type: traj.aircraft_type.clone(),
        blips: traj.blips[a..b].to_vec(),
    })
}

/// Keeps descending blips, removes constant-ROCD runs, keeps the longest
/// remaining contiguous segment and drops trajectories left with fewer than
/// two blips. Idempotent.
pub fn clean_descents(data: &Dataset, params: &CleaningParams) -> Dataset {
    use rayon::prelude::*;
    let trajectories = data
        .trajectories
        .par_iter()
        .filter_map(|t| clean_trajectory(t, params))
        .collect();
    Dataset {
        trajectories,
        quarantined: data.quarantined.clone(),
    }
}

pub const MIN_SPLIT_TRAJECTORIES: usize = 5;

/// Shuffled trajectory-level split. Both parts keep the input order.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let n = data.len();
    if n < MIN_SPLIT_TRAJECTORIES {
        return Err(DataError::TooFewTrajectories {
            needed: MIN_SPLIT_TRAJECTORIES,
            found: n,
        });
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::InvalidFraction(train_frac));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |ix: &[usize]| Dataset::new(ix.iter().map(|&i| data.trajectories[i].clone()).collect());
    Ok((pick(&train_idx), pick(&test_idx)))
}

/// Ids of the two partitions, persisted next to fitted artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_frac: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// One diagonal Gaussian component of the true latent distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Top-of-descent truncation: with probability `full_span_prob` a
/// trajectory starts at the top of the truth grid, otherwise at a uniformly
/// drawn flight level in `[min_top_fl, top)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapModel {
    pub full_span_prob: f64,
    pub min_top_fl: u32,
}

/// Ground-truth description of a synthetic fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruthSpec {
    pub aircraft: AircraftConfig,
    pub grid: AltitudeGrid,
    pub drag_mean: Vec<f64>,
    pub cas_mean: Vec<f64>,
    /// `n_g x n_alpha`, orthonormal columns.
    pub drag_modes: DMatrix<f64>,
    /// `n_g x n_beta`, orthonormal columns.
    pub cas_modes: DMatrix<f64>,
    /// Mixture over the concatenated weights `[alpha, beta]`.
    pub latent: Vec<TruthComponent>,
    /// Per-level white noise added to the drag curve (N).
    pub noise_drag: f64,
    /// Per-level white noise added to the CAS curve (m/s).
    pub noise_cas: f64,
    pub gaps: GapModel,
    /// Level-flight blips emitted before the descent starts.
    pub lead_in_blips: usize,
    pub n_trajectories: usize,
    pub seed: u64,
}

/// Orthonormal columns spanning the polynomials `1, x, .., x^(k-1)` on the
/// grid, with `x` running from 0 at the bottom to 1 at the top.
pub fn polynomial_modes(grid: &AltitudeGrid, k: usize) -> DMatrix<f64> {
    let n = grid.len();
    let x = |i: usize| i as f64 / (n - 1) as f64;
    let mut q = DMatrix::from_fn(n, k, |i, j| (2.0 * x(i) - 1.0).powi(j as i32));
    // Modified Gram-Schmidt, applied twice for orthonormality to round-off.
    for _ in 0..2 {
        for j in 0..k {
            for p in 0..j {
                let d = q.column(p).dot(&q.column(j));
                let col_p = q.column(p).into_owned();
                let mut col_j = q.column_mut(j);
                col_j.axpy(-d, &col_p, 1.0);
            }
            let norm = q.column(j).norm();
            q.column_mut(j).unscale_mut(norm);
        }
    }
    for j in 0..k {
        let col = q.column(j);
        if col[col.iamax()] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl SynthTruthSpec {
    /// A two-cluster fleet on FL150..FL350 for the given aircraft: three
    /// drag modes, two CAS modes, one dominant mode per quantity.
    pub fn example(aircraft: AircraftConfig, n_trajectories: usize, seed: u64) -> Self {
        let top = aircraft.max_fl.min(350);
        let grid = AltitudeGrid::from_flight_levels(150, top).expect("top above FL150");
        let n = grid.len();
        let x = |i: usize| i as f64 / (n - 1) as f64;
        let s = (n as f64).sqrt();
        let drag_mean = (0..n).map(|i| 42_000.0 - 8_000.0 * x(i)).collect();
        let cas_mean = (0..n).map(|i| 148.0 - 14.0 * x(i)).collect();
        let amp = |v: &[f64]| v.iter().map(|a| a * s).collect::<Vec<_>>();
        let latent = vec![
            TruthComponent {
                weight: 0.6,
                mean: amp(&[2500.0, 500.0, 0.0, 4.0, 0.0]),
                std: amp(&[1500.0, 600.0, 300.0, 2.0, 1.0]),
            },
            TruthComponent {
                weight: 0.4,
                mean: amp(&[-3000.0, -500.0, 0.0, -5.0, 1.0]),
                std: amp(&[1500.0, 600.0, 300.0, 2.0, 1.0]),
            },
        ];
        Self {
            drag_modes: polynomial_modes(&grid, 3),
            cas_modes: polynomial_modes(&grid, 2),
            aircraft,
            grid,
            drag_mean,
            cas_mean,
            latent,
            noise_drag: 1500.0,
            noise_cas: 0.5,
            gaps: GapModel {
                full_span_prob: 0.5,
                min_top_fl: 200,
            },
            lead_in_blips: 3,
            n_trajectories,
            seed,
        }
    }

    pub fn n_latent(&self) -> usize {
        self.drag_modes.ncols() + self.cas_modes.ncols()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let n = self.grid.len();
        if self.drag_mean.len() != n || self.cas_mean.len() != n {
            return bad("mean functions must have one value per grid level".into());
        }
        if self.drag_modes.nrows() != n || self.cas_modes.nrows() != n {
            return bad("modes must have one row per grid level".into());
        }
        for (name, m) in [("drag", &self.drag_modes), ("cas", &self.cas_modes)] {
            let k = m.ncols();
            let err = (m.transpose() * m - DMatrix::identity(k, k)).amax();
            if err > 1e-10 {
                return bad(format!("{name} modes not orthonormal (error {err:e})"));
            }
        }
        if !(self.noise_drag >= 0.0 && self.noise_cas >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        if self.latent.is_empty() {
            return bad("latent mixture has no components".into());
        }
        let total: f64 = self.latent.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-10 || self.latent.iter().any(|c| !(c.weight >= 0.0)) {
            return bad(format!("mixture weights sum to {total}"));
        }
        let d = self.n_latent();
        if self
            .latent
            .iter()
            .any(|c| c.mean.len() != d || c.std.len() != d || c.std.iter().any(|s| !(*s >= 0.0)))
        {
            return bad(format!("each component needs {d} means and non-negative stds"));
        }
        let g = &self.gaps;
        if !(0.0..=1.0).contains(&g.full_span_prob) {
            return bad("full_span_prob outside [0, 1]".into());
        }
        if g.min_top_fl <= self.grid.fl_bottom() || g.min_top_fl > self.grid.fl_top() {
            return bad(format!(
                "min_top_fl {} outside (FL{}, FL{}]",
                g.min_top_fl,
                self.grid.fl_bottom(),
                self.grid.fl_top()
            ));
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be positive".into());
        }
        self.aircraft
            .validate()
            .map_err(|e| DataError::InvalidSpec(e.to_string()))
    }

    fn curve(&self, mean: &[f64], modes: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
        (0..mean.len())
            .map(|i| mean[i] + (0..w.len()).map(|l| w[l] * modes[(i, l)]).sum::<f64>())
            .collect()
    }
}

/// Hidden truth of one synthetic trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub component: usize,
    /// Concatenated `[alpha, beta]`.
    pub weights: Vec<f64>,
    pub h_start: f64,
    pub time_to_bottom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthTruthSpec,
    pub records: Vec<TruthRecord>,
}

/// Draws a synthetic fleet. Each trajectory samples latent weights, builds
/// its drag and CAS curves, adds per-level noise, draws a top of descent and
/// is integrated through the descent dynamics; blips sit at the start
/// altitude and every grid level below it.
pub fn synth_generate(spec: &SynthTruthSpec) -> Result<(Dataset, SynthTruth), DataError> {
    spec.validate()?;
    let dynamics = DescentDynamics::from_config(&spec.aircraft)
        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let integrator = Integrator::new(dynamics);
    let isa = spec.aircraft.isa;
    let n_alpha = spec.drag_modes.ncols();
    let weights_cdf: Vec<f64> = spec
        .latent
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.weight;
            Some(*acc)
        })
        .collect();
    let type_code = spec.aircraft.type_code.clone();
    let width = spec.n_trajectories.to_string().len();

    let results: Vec<Result<(Trajectory, TruthRecord), DataError>> = {
        use rayon::prelude::*;
        (0..spec.n_trajectories)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::substream(spec.seed, k as u64);
                let u: f64 = rng.random();
                let component = weights_cdf
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(spec.latent.len() - 1);
                let comp = &spec.latent[component];
                let w: Vec<f64> = comp
                    .mean
                    .iter()
                    .zip(&comp.std)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut drag = spec.curve(&spec.drag_mean, &spec.drag_modes, &w[..n_alpha]);
                let mut cas = spec.curve(&spec.cas_mean, &spec.cas_modes, &w[n_alpha..]);
                for d in drag.iter_mut() {
                    *d += spec.noise_drag * rng.sample::<f64, _>(StandardNormal);
                }
                for v in cas.iter_mut() {
                    *v += spec.noise_cas * rng.sample::<f64, _>(StandardNormal);
                }
                let h_start = if rng.random::<f64>() < spec.gaps.full_span_prob {
                    spec.grid.h_f()
                } else {
                    fl_to_m(rng.random_range(spec.gaps.min_top_fl..spec.grid.fl_top()))
                };
                let id = format!("{type_code}-{k:0width$}");
                let invalid = |e: PhysicsError| {
                    DataError::InvalidSpec(format!("trajectory {id}: {e}"))
                };
                let profile =
                    DescentProfile::new(spec.grid.clone(), drag, cas).map_err(invalid)?;
                let sim = integrator.integrate(&profile, h_start).map_err(invalid)?;
                let mut blips = Vec::with_capacity(sim.samples.len() + spec.lead_in_blips);
                let first = sim.samples[0];
                let a0 = atmosphere::speed_of_sound(first.h, &isa)
                    .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                for j in (1..=spec.lead_in_blips).rev() {
                    blips.push(RadarBlip {
                        t: -10.0 * j as f64,
                        h: first.h,
                        rocd: 0.0,
                        v_ias: first.v_cas,
                        mach: first.v_tas / a0,
                    });
                }
                for s in &sim.samples {
                    let a = atmosphere::speed_of_sound(s.h, &isa)
                        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                    blips.push(RadarBlip {
                        t: s.t,
                        h: s.h,
                        rocd: s.rocd,
                        v_ias: s.v_cas,
                        mach: s.v_tas / a,
                    });
                }
                Ok((
                    Trajectory {
                        id: id.clone(),
                        aircraft_type: type_code.clone(),
                        blips,
                    },
                    TruthRecord {
                        id,
                        component,
                        weights: w,
                        h_start,
                        time_to_bottom: sim.time_to_bottom,
                    },
                ))
            })
            .collect()
    };
    let mut trajectories = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        let (t, rec) = r?;
        trajectories.push(t);
        records.push(rec);
    }
    Ok((
        Dataset::new(trajectories),
        SynthTruth {
            spec: spec.clone(),
            records,
        },
    ))
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: &'a str,
    version: u32,
    kind: &'a str,
    payload: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    format: String,
    version: u32,
    kind: String,
    payload: serde_json::Value,
}

pub fn artifact_to_string<T: Serialize>(kind: &str, value: &T) -> String {
    let env = EnvelopeOut {
        format: ARTIFACT_FORMAT,
        version: ARTIFACT_VERSION,
        kind,
        payload: value,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn artifact_from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T, DataError> {
    let env: EnvelopeIn =
        serde_json::from_str(text).map_err(|e| DataError::Parse(e.to_string()))?;
    if env.format != ARTIFACT_FORMAT {
        return Err(DataError::Parse(format!("unknown format {:?}", env.format)));
    }
    if env.version != ARTIFACT_VERSION {
        return Err(DataError::Incompatible {
            found: env.version,
            expected: ARTIFACT_VERSION,
        });
    }
    if env.kind != kind {
        return Err(DataError::WrongKind {
            found: env.kind,
            expected: kind.to_string(),
        });
    }
    serde_json::from_value(env.payload).map_err(|e| DataError::Parse(e.to_string()))
}

/// Writes `value` wrapped in a versioned envelope.
pub fn save_artifact<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<(), DataError> {
    std::fs::write(path, artifact_to_string(kind, value)).map_err(io_err(path))
}

pub fn load_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    artifact_from_str(kind, &text)
}
