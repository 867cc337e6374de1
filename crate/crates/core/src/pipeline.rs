//! Stages shared by the command-line driver: synth, ingest, fit, sample,
//! evaluate and the explained-variance sweep. Each stage is a pure function
//! of its inputs and seed; the `cmd_*` wrappers add file IO.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::atmosphere::transition_altitude;
use crate::dataio::{
    clean_descents, load_artifact, read_blips, save_artifact, split, synth_generate, write_blips,
    CleaningParams, Dataset, Quarantined, SplitManifest, SynthTruthSpec, Trajectory,
};
use crate::fpca::{build_grid, gappy_fpca, interpolate_to_grid, AltitudeGrid, FpcaBasis, GappyCurveMatrix, GridRow};
use crate::generator::{
    compute_bounds, read_trajectories, write_trajectories, GenerationReport, Generator,
    InitialLevels, PlausibilityBounds,
};
use crate::latent::{fit as fit_latent, LatentModel, LatentOptions, ModelKind};
use crate::metrics::{
    build_report, level_values, per_level_distance, time_to_bottom_distribution, write_curves,
    write_report_rows, Measure, MetricsReport, Quantity, Track,
};
use crate::physics::{AircraftConfig, DescentDynamics, DescentProfile, EsfMode, Integrator, SimulatedTrajectory};
use crate::rng;

pub const FIT_FILE: &str = "fit.json";
pub const SPLIT_FILE: &str = "split.json";
pub const FIT_SUMMARY_FILE: &str = "fit_summary.json";
pub const GENERATED_FILE: &str = "generated.csv";
pub const GENERATION_REPORT_FILE: &str = "generation_report.json";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CLEANED_FILE: &str = "cleaned.csv";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const SWEEP_HEADER: &str = "fold,variance,measure,value";

/// Stage that failed. Each maps to its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Io,
    Data,
    Fpca,
    Latent,
    Generation,
    Evaluate,
    Sweep,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Io => 3,
            Stage::Data => 4,
            Stage::Fpca => 5,
            Stage::Latent => 6,
            Stage::Generation => 7,
            Stage::Evaluate => 8,
            Stage::Sweep => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Io => "io",
            Stage::Data => "data",
            Stage::Fpca => "fpca",
            Stage::Latent => "latent model",
            Stage::Generation => "generation",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage.name(), self.message)
    }
}

impl std::error::Error for PipelineError {}

fn fail<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        message: e.to_string(),
    }
}

pub type PipelineResult<T> = Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_trajectories: usize,
    pub noise_drag: Option<f64>,
    pub noise_cas: Option<f64>,
    pub full_span_prob: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 2000,
            noise_drag: None,
            noise_cas: None,
            full_span_prob: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub folds: usize,
    pub samples: usize,
    pub variances: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            samples: 1000,
            variances: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
        }
    }
}

/// Run configuration, read from TOML. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub aircraft: PathBuf,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub explained_variance: f64,
    pub model: ModelKind,
    pub count: usize,
    pub coverage_frac: f64,
    pub train_frac: f64,
    /// Overrides the aircraft file's mode when set.
    pub esf_mode: Option<EsfMode>,
    pub cleaning: CleaningParams,
    pub latent: LatentOptions,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            aircraft: PathBuf::from("aircraft.toml"),
            dataset: PathBuf::from("blips.csv"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            explained_variance: 0.8,
            model: ModelKind::Gmm,
            count: 10_000,
            coverage_frac: 0.25,
            train_frac: 0.8,
            esf_mode: None,
            cleaning: CleaningParams::default(),
            latent: LatentOptions::default(),
            synth: SynthConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> PipelineResult<Self> {
        let cfg: Self = toml::from_str(s).map_err(fail(Stage::Config))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> PipelineResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| fail(Stage::Config)(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.aircraft, &mut cfg.dataset, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> PipelineResult<()> {
        let bad = |m: String| Err(fail(Stage::Config)(m));
        if !(self.explained_variance > 0.0 && self.explained_variance <= 1.0) {
            return bad(format!("explained_variance {} outside (0, 1]", self.explained_variance));
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if !(self.coverage_frac > 0.0 && self.coverage_frac <= 1.0) {
            return bad(format!("coverage_frac {} outside (0, 1]", self.coverage_frac));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad(format!("train_frac {} outside (0, 1)", self.train_frac));
        }
        if self.sweep.folds < 2 {
            return bad("sweep needs at least 2 folds".into());
        }
        if self.sweep.samples == 0 {
            return bad("sweep samples must be at least 1".into());
        }
        if let Some(v) = self
            .sweep
            .variances
            .iter()
            .find(|v| !(**v > 0.0 && **v <= 1.0))
        {
            return bad(format!("sweep variance {v} outside (0, 1]"));
        }
        Ok(())
    }

    /// Aircraft file with the configured share-factor mode applied.
    pub fn load_aircraft(&self) -> PipelineResult<AircraftConfig> {
        let mut a = AircraftConfig::load(&self.aircraft).map_err(fail(Stage::Config))?;
        if let Some(m) = self.esf_mode {
            a.esf_mode = m;
        }
        Ok(a)
    }
}

/// Options of the fit stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub explained_variance: f64,
    pub model: ModelKind,
    pub coverage_frac: f64,
    pub seed: u64,
    pub latent: LatentOptions,
}

impl FitOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            explained_variance: cfg.explained_variance,
            model: cfg.model,
            coverage_frac: cfg.coverage_frac,
            seed: cfg.seed,
            latent: cfg.latent,
        }
    }
}

/// Everything needed to generate descents for one aircraft type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub aircraft: AircraftConfig,
    pub grid: AltitudeGrid,
    pub explained_variance: f64,
    pub basis_drag: FpcaBasis,
    pub basis_cas: FpcaBasis,
    pub model: LatentModel,
    pub bounds: PlausibilityBounds,
    pub starts: InitialLevels,
    pub summary: FitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub n_rows: usize,
    pub skipped: Vec<Quarantined>,
    pub drag_modes: usize,
    pub cas_modes: usize,
    pub drag_iterations: usize,
    pub cas_iterations: usize,
    pub drag_converged: bool,
    pub cas_converged: bool,
}

/// Drag and CAS rows of one trajectory on the grid.
pub fn trajectory_rows(
    tr: &Trajectory,
    dynamics: &DescentDynamics,
    grid: &AltitudeGrid,
) -> Result<(GridRow, GridRow), String> {
    let drag = dynamics
        .infer_drag_series(&tr.blips)
        .map_err(|e| e.to_string())?;
    let hs: Vec<f64> = tr.blips.iter().map(|b| b.h).collect();
    let cas: Vec<f64> = tr.blips.iter().map(|b| b.v_ias).collect();
    let d = interpolate_to_grid(&hs, &drag, grid);
    let v = interpolate_to_grid(&hs, &cas, grid);
    if d.observed() < 2 {
        return Err(format!("only {} grid levels observed", d.observed()));
    }
    Ok((d, v))
}

fn descent_tops(data: &Dataset) -> Vec<f64> {
    data.trajectories.iter().map(|t| t.span().1).collect()
}

/// Grid, gappy fPCA of drag and CAS, latent model and bounds from the
/// training split; start levels from the test split.
pub fn fit_stage(
    aircraft: &AircraftConfig,
    train: &Dataset,
    test: &Dataset,
    opts: &FitOptions,
) -> PipelineResult<FittedModel> {
    let dynamics = DescentDynamics::from_config(aircraft).map_err(fail(Stage::Config))?;
    let spans: Vec<(f64, f64)> = train.trajectories.iter().map(Trajectory::span).collect();
    let grid = build_grid(&spans, opts.coverage_frac, Some(aircraft.max_fl)).map_err(fail(Stage::Fpca))?;
    info!("grid FL{}..FL{} ({} levels)", grid.fl_bottom(), grid.fl_top(), grid.len());

    let mut drag_rows = Vec::new();
    let mut cas_rows = Vec::new();
    let mut skipped = Vec::new();
    for tr in &train.trajectories {
        match trajectory_rows(tr, &dynamics, &grid) {
            Ok((d, v)) => {
                drag_rows.push(d);
                cas_rows.push(v);
            }
            Err(reason) => skipped.push(Quarantined {
                id: tr.id.clone(),
                reason,
            }),
        }
    }
    if !skipped.is_empty() {
        warn!("{} training trajectories left out of the fPCA", skipped.len());
    }
    let drag_m = GappyCurveMatrix::from_rows(&drag_rows, grid.clone()).map_err(fail(Stage::Fpca))?;
    let cas_m = GappyCurveMatrix::from_rows(&cas_rows, grid.clone()).map_err(fail(Stage::Fpca))?;
    let fd = gappy_fpca(&drag_m, opts.explained_variance).map_err(fail(Stage::Fpca))?;
    let fc = gappy_fpca(&cas_m, opts.explained_variance).map_err(fail(Stage::Fpca))?;
    info!(
        "fpca: {} drag modes ({} iterations), {} cas modes ({} iterations)",
        fd.basis.n_modes(),
        fd.iterations,
        fc.basis.n_modes(),
        fc.iterations
    );

    let rows: Vec<Vec<f64>> = (0..drag_m.n_rows())
        .map(|r| {
            fd.weights
                .row(r)
                .iter()
                .chain(fc.weights.row(r).iter())
                .copied()
                .collect()
        })
        .collect();
    let model = fit_latent(opts.model, &rows, opts.seed, &opts.latent).map_err(fail(Stage::Latent))?;
    let bounds = compute_bounds(&drag_m, &cas_m).map_err(fail(Stage::Generation))?;
    let starts = InitialLevels::from_tops(&descent_tops(test), &grid).map_err(fail(Stage::Generation))?;

    Ok(FittedModel {
        aircraft: aircraft.clone(),
        explained_variance: opts.explained_variance,
        summary: FitSummary {
            n_train: train.len(),
            n_test: test.len(),
            n_rows: rows.len(),
            skipped,
            drag_modes: fd.basis.n_modes(),
            cas_modes: fc.basis.n_modes(),
            drag_iterations: fd.iterations,
            cas_iterations: fc.iterations,
            drag_converged: fd.converged,
            cas_converged: fc.converged,
        },
        grid,
        basis_drag: fd.basis,
        basis_cas: fc.basis,
        model,
        bounds,
        starts,
    })
}

pub fn sample_stage(
    fit: &FittedModel,
    count: usize,
    seed: u64,
) -> PipelineResult<(Vec<SimulatedTrajectory>, GenerationReport)> {
    let dynamics = DescentDynamics::from_config(&fit.aircraft).map_err(fail(Stage::Config))?;
    let integrator = Integrator::new(dynamics);
    let gen = Generator {
        model: &fit.model,
        basis_drag: &fit.basis_drag,
        basis_cas: &fit.basis_cas,
        bounds: &fit.bounds,
        starts: &fit.starts,
        integrator: &integrator,
    };
    gen.generate(count, seed).map_err(fail(Stage::Generation))
}

/// The deterministic baseline flown from the grid top.
pub fn baseline_trajectory(
    aircraft: &AircraftConfig,
    grid: &AltitudeGrid,
) -> PipelineResult<SimulatedTrajectory> {
    let profile = DescentProfile::nominal(aircraft, grid).map_err(fail(Stage::Evaluate))?;
    let dynamics = DescentDynamics::from_config(aircraft).map_err(fail(Stage::Config))?;
    Integrator::new(dynamics)
        .integrate(&profile, grid.h_f())
        .map_err(fail(Stage::Evaluate))
}

pub fn transition_of(aircraft: &AircraftConfig) -> PipelineResult<f64> {
    transition_altitude(aircraft.cas_ref, aircraft.mach_ref, &aircraft.isa).map_err(fail(Stage::Evaluate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub test_tracks: Vec<Track>,
    pub generated_tracks: Vec<Track>,
}

pub fn evaluate_stage(
    fit: &FittedModel,
    test: &Dataset,
    generated: &[SimulatedTrajectory],
) -> PipelineResult<Evaluation> {
    let test_tracks: Vec<Track> = test.trajectories.iter().map(Track::from_trajectory).collect();
    let generated_tracks: Vec<Track> = generated.iter().map(Track::from_simulated).collect();
    let bada = Track::from_simulated(&baseline_trajectory(&fit.aircraft, &fit.grid)?);
    let h_trans = transition_of(&fit.aircraft)?;
    let report = build_report(&test_tracks, &generated_tracks, &bada, &fit.grid, h_trans)
        .map_err(fail(Stage::Evaluate))?;
    Ok(Evaluation {
        report,
        test_tracks,
        generated_tracks,
    })
}

/// Splits by the ids of a manifest, in manifest order.
pub fn apply_manifest(data: &Dataset, m: &SplitManifest) -> PipelineResult<(Dataset, Dataset)> {
    let by_id: std::collections::HashMap<&str, &Trajectory> =
        data.trajectories.iter().map(|t| (t.id.as_str(), t)).collect();
    let pick = |ids: &[String]| -> PipelineResult<Dataset> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|t| (*t).clone())
                    .ok_or_else(|| fail(Stage::Data)(format!("trajectory {id} missing from dataset")))
            })
            .collect::<PipelineResult<Vec<_>>>()
            .map(Dataset::new)
    };
    Ok((pick(&m.train)?, pick(&m.test)?))
}

pub fn manifest(train: &Dataset, test: &Dataset, seed: u64, train_frac: f64) -> SplitManifest {
    SplitManifest {
        seed,
        train_frac,
        train: train.ids(),
        test: test.ids(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fold: usize,
    pub variance: f64,
    pub measure: String,
    pub value: f64,
}

/// K-fold explained-variance sweep: for each fold and variance, fit a GMM
/// on the other folds, generate `samples` descents and record the ROCD
/// per-level distances averaged over all grid levels.
pub fn sweep_stage(
    aircraft: &AircraftConfig,
    data: &Dataset,
    cfg: &SweepConfig,
    opts: &FitOptions,
) -> PipelineResult<Vec<SweepRow>> {
    let n = data.len();
    let k = cfg.folds;
    if k < 2 || n < k * crate::dataio::MIN_SPLIT_TRAJECTORIES {
        return Err(fail(Stage::Sweep)(format!(
            "{n} trajectories are too few for {k} folds of at least {}",
            crate::dataio::MIN_SPLIT_TRAJECTORIES
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(opts.seed));
    let mut rows = Vec::new();
    for fold in 0..k {
        let mut test_idx: Vec<usize> = idx.iter().copied().skip(fold).step_by(k).collect();
        test_idx.sort_unstable();
        let in_test: std::collections::HashSet<usize> = test_idx.iter().copied().collect();
        let pick = |f: &dyn Fn(usize) -> bool| {
            Dataset::new((0..n).filter(|&i| f(i)).map(|i| data.trajectories[i].clone()).collect())
        };
        let test = pick(&|i| in_test.contains(&i));
        let train = pick(&|i| !in_test.contains(&i));
        let test_tracks: Vec<Track> = test.trajectories.iter().map(Track::from_trajectory).collect();
        for &variance in &cfg.variances {
            let fo = FitOptions {
                explained_variance: variance,
                model: ModelKind::Gmm,
                ..*opts
            };
            let in_sweep = |e: PipelineError| PipelineError {
                stage: Stage::Sweep,
                message: format!("fold {fold}, variance {variance}: {e}"),
            };
            let fit = fit_stage(aircraft, &train, &test, &fo).map_err(in_sweep)?;
            let seed = opts.seed.wrapping_add(fold as u64);
            let (gen, _) = sample_stage(&fit, cfg.samples, seed).map_err(in_sweep)?;
            let gen_tracks: Vec<Track> = gen.iter().map(Track::from_simulated).collect();
            for m in Measure::ALL {
                let (_, all) = per_level_distance(&test_tracks, &gen_tracks, &fit.grid, Quantity::Rocd, m, f64::INFINITY)
                    .map_err(fail(Stage::Sweep))?;
                let value = all.ok_or_else(|| fail(Stage::Sweep)("no comparable level"))?;
                rows.push(SweepRow {
                    fold,
                    variance,
                    measure: m.name().to_string(),
                    value,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_rows<W: std::io::Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.fold, r.variance, r.measure, r.value)?;
    }
    w.flush()
}

fn io<E: fmt::Display>(path: &Path) -> impl Fn(E) -> PipelineError + '_ {
    move |e| fail(Stage::Io)(format!("{}: {e}", path.display()))
}

fn ensure_dir(dir: &Path) -> PipelineResult<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn write_with<F>(path: &Path, f: F) -> PipelineResult<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
{
    let file = std::fs::File::create(path).map_err(io(path))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).map_err(io(path))
}

fn load_dataset(path: &Path) -> PipelineResult<Dataset> {
    read_blips(path).map_err(fail(Stage::Io))
}

fn cleaned_for(cfg: &RunConfig, aircraft: &AircraftConfig) -> PipelineResult<Dataset> {
    let data = load_dataset(&cfg.dataset)?.of_type(&aircraft.type_code);
    if !data.quarantined.is_empty() {
        warn!("{} trajectories quarantined on ingest", data.quarantined.len());
    }
    let cleaned = clean_descents(&data, &cfg.cleaning);
    if cleaned.is_empty() {
        return Err(fail(Stage::Data)(format!(
            "no {} descents left after cleaning",
            aircraft.type_code
        )));
    }
    Ok(cleaned)
}

/// Writes a synthetic fleet to the dataset path and its truth to the output
/// directory.
pub fn cmd_synth(cfg: &RunConfig) -> PipelineResult<SynthTruthSpec> {
    let aircraft = cfg.load_aircraft()?;
    let mut spec = SynthTruthSpec::example(aircraft, cfg.synth.n_trajectories, cfg.seed);
    if let Some(v) = cfg.synth.noise_drag {
        spec.noise_drag = v;
    }
    if let Some(v) = cfg.synth.noise_cas {
        spec.noise_cas = v;
    }
    if let Some(v) = cfg.synth.full_span_prob {
        spec.gaps.full_span_prob = v;
    }
    let (data, truth) = synth_generate(&spec).map_err(fail(Stage::Data))?;
    if let Some(parent) = cfg.dataset.parent() {
        ensure_dir(parent)?;
    }
    ensure_dir(&cfg.out_dir)?;
    write_blips(&cfg.dataset, &data).map_err(fail(Stage::Io))?;
    save_artifact(&cfg.out_dir.join(TRUTH_FILE), "synth-truth", &truth).map_err(fail(Stage::Io))?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub trajectories_read: usize,
    pub blips_read: usize,
    pub trajectories_kept: usize,
    pub blips_kept: usize,
    pub quarantined: Vec<Quarantined>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> PipelineResult<IngestReport> {
    let aircraft = cfg.load_aircraft()?;
    let raw = load_dataset(&cfg.dataset)?;
    let data = raw.of_type(&aircraft.type_code);
    let cleaned = clean_descents(&data, &cfg.cleaning);
    let report = IngestReport {
        trajectories_read: data.len(),
        blips_read: data.n_blips(),
        trajectories_kept: cleaned.len(),
        blips_kept: cleaned.n_blips(),
        quarantined: raw.quarantined.clone(),
    };
    ensure_dir(&cfg.out_dir)?;
    write_blips(&cfg.out_dir.join(CLEANED_FILE), &cleaned).map_err(fail(Stage::Io))?;
    save_artifact(&cfg.out_dir.join(INGEST_REPORT_FILE), "ingest-report", &report).map_err(fail(Stage::Io))?;
    Ok(report)
}

pub fn cmd_fit(cfg: &RunConfig) -> PipelineResult<FittedModel> {
    let aircraft = cfg.load_aircraft()?;
    let cleaned = cleaned_for(cfg, &aircraft)?;
    let (train, test) = split(&cleaned, cfg.train_frac, cfg.seed).map_err(fail(Stage::Data))?;
    let fit = fit_stage(&aircraft, &train, &test, &FitOptions::from_config(cfg))?;
    for w in &fit.model.report.warnings {
        warn!("{w}");
    }
    ensure_dir(&cfg.out_dir)?;
    let m = manifest(&train, &test, cfg.seed, cfg.train_frac);
    save_artifact(&cfg.out_dir.join(SPLIT_FILE), "split", &m).map_err(fail(Stage::Io))?;
    save_artifact(&cfg.out_dir.join(FIT_FILE), "fit", &fit).map_err(fail(Stage::Io))?;
    save_artifact(&cfg.out_dir.join(FIT_SUMMARY_FILE), "fit-summary", &(&fit.summary, &fit.model.report))
        .map_err(fail(Stage::Io))?;
    Ok(fit)
}

pub fn load_fit(cfg: &RunConfig) -> PipelineResult<FittedModel> {
    load_artifact(&cfg.out_dir.join(FIT_FILE), "fit").map_err(fail(Stage::Io))
}

pub fn cmd_sample(cfg: &RunConfig) -> PipelineResult<GenerationReport> {
    let fit = load_fit(cfg)?;
    let (trajs, report) = sample_stage(&fit, cfg.count, cfg.seed)?;
    ensure_dir(&cfg.out_dir)?;
    write_trajectories(&cfg.out_dir.join(GENERATED_FILE), &trajs).map_err(fail(Stage::Io))?;
    save_artifact(&cfg.out_dir.join(GENERATION_REPORT_FILE), "generation-report", &report)
        .map_err(fail(Stage::Io))?;
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> PipelineResult<MetricsReport> {
    let fit = load_fit(cfg)?;
    let m: SplitManifest = load_artifact(&cfg.out_dir.join(SPLIT_FILE), "split").map_err(fail(Stage::Io))?;
    let cleaned = cleaned_for(cfg, &fit.aircraft)?;
    let (_, test) = apply_manifest(&cleaned, &m)?;
    let generated = read_trajectories(&cfg.out_dir.join(GENERATED_FILE)).map_err(fail(Stage::Io))?;
    let ev = evaluate_stage(&fit, &test, &generated)?;

    let rows = ev.report.rows(&fit.aircraft.type_code);
    write_with(&cfg.out_dir.join(METRICS_CSV_FILE), |w| write_report_rows(w, &rows))?;
    save_artifact(&cfg.out_dir.join(METRICS_JSON_FILE), "metrics", &ev.report).map_err(fail(Stage::Io))?;

    let h_trans = ev.report.transition_altitude_used;
    let ttb_test = time_to_bottom_distribution(&ev.test_tracks, &fit.grid).map_err(fail(Stage::Evaluate))?;
    let ttb_gen = time_to_bottom_distribution(&ev.generated_tracks, &fit.grid).map_err(fail(Stage::Evaluate))?;
    let pooled = |tracks: &[Track], q: Quantity, above: bool| -> Vec<f64> {
        level_values(tracks, &fit.grid, q)
            .into_iter()
            .zip(fit.grid.levels())
            .filter(|(_, &h)| (h > h_trans) == above)
            .flat_map(|(v, _)| v)
            .collect()
    };
    write_with(&cfg.out_dir.join(CURVES_FILE), |w| {
        writeln!(w, "{}", crate::metrics::CURVE_HEADER)?;
        write_curves(&mut *w, "time_to_bottom", &[("test", &ttb_test), ("generated", &ttb_gen)], 200)?;
        for q in [Quantity::Cas, Quantity::Rocd] {
            for (side, above) in [("above", true), ("below", false)] {
                let t = pooled(&ev.test_tracks, q, above);
                let g = pooled(&ev.generated_tracks, q, above);
                write_curves(&mut *w, &format!("{}_{side}", q.name()), &[("test", &t), ("generated", &g)], 200)?;
            }
        }
        Ok(())
    })?;
    Ok(ev.report)
}

pub fn cmd_sweep(cfg: &RunConfig) -> PipelineResult<Vec<SweepRow>> {
    let aircraft = cfg.load_aircraft()?;
    let cleaned = cleaned_for(cfg, &aircraft)?;
    let rows = sweep_stage(&aircraft, &cleaned, &cfg.sweep, &FitOptions::from_config(cfg))?;
    ensure_dir(&cfg.out_dir)?;
    write_with(&cfg.out_dir.join(SWEEP_FILE), |w| write_sweep_rows(w, &rows))?;
    Ok(rows)
}
