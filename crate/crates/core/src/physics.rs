//! Total-energy descent kernel.
//!
//! The rate of climb or descent follows the total-energy equation with the
//! temperature-offset factor fixed at one:
//!
//! ```text
//! dh/dt = (T_HR - D) * V_TAS / (m * g0) * f(M)
//! ```
//!
//! and drag is inferred from an observed descent rate by inverting it:
//!
//! ```text
//! D = T_HR - (dh/dt) * m * g0 / (f(M) * V_TAS)
//! ```
//!
//! Energy share factors, with `k = kappa`, `b = lapse_rate` and
//! `q(M) = (1 + (k-1)/2 M^2)`:
//!
//! | regime                         | f(M)                                                        |
//! |--------------------------------|-------------------------------------------------------------|
//! | constant Mach, above tropopause| `1`                                                         |
//! | constant Mach, below tropopause| `1 / (1 + k R b M^2 / (2 g0))`                              |
//! | constant CAS, above tropopause | `1 / (1 + q^(-1/(k-1)) (q^(k/(k-1)) - 1))`                  |
//! | constant CAS, below tropopause | `1 / (1 + k R b M^2 / (2 g0) + q^(-1/(k-1)) (q^(k/(k-1)) - 1))` |
//!
//! Above the CAS/Mach transition altitude the aircraft is taken to hold Mach,
//! below it CAS. Optionally ([`EsfMode::ExactProfile`]) the share factor is
//! computed from the actual speed profile as `1 / (1 + V/g0 dV/dh)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::{self, AtmosphereError, IsaConstants};
use crate::dataio::RadarBlip;
use crate::fpca::AltitudeGrid;
use crate::units::METRES_PER_FL;

/// A profile whose ROCD is at or above this value (m/s) cannot be integrated.
pub const MIN_DESCENT_RATE: f64 = -1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error(transparent)]
    Atmosphere(#[from] AtmosphereError),
    #[error("Mach number {0} outside (0, 1)")]
    MachOutOfRange(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("f(M) * V_TAS is zero at h = {h} m; drag cannot be inferred")]
    Singularity { h: f64 },
    #[error("profile is not descending at h = {h:.1} m (rocd = {rocd:.6} m/s)")]
    NonDescending { h: f64, rocd: f64 },
    #[error("invalid aircraft config: {0}")]
    InvalidConfig(String),
    #[error("invalid descent profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EsfRegime {
    ConstCasBelowTrop,
    ConstCasAboveTrop,
    ConstMachBelowTrop,
    ConstMachAboveTrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsfMode {
    /// Segment-based share factors selected by transition altitude and tropopause.
    #[default]
    BadaRegimes,
    /// Share factor from the speed gradient of the profile being flown.
    ExactProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePoint {
    pub h_m: f64,
    pub cas_mps: f64,
}

/// Per-type aircraft parameters. One TOML file per aircraft type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AircraftConfig {
    pub type_code: String,
    /// Reference mass (kg).
    pub mass: f64,
    /// `[c1, c2, c3]` of `T_HR(h) = c1 * (1 - h/c2 + c3 h^2)`.
    pub idle_thrust_coeffs: [f64; 3],
    /// Nominal descent CAS (m/s).
    pub cas_ref: f64,
    /// Nominal descent Mach.
    pub mach_ref: f64,
    /// Highest flight level modelled for this type.
    pub max_fl: u32,
    /// Deterministic baseline CAS against altitude, linearly interpolated and
    /// clamped at the ends.
    pub nominal_cas_schedule: Vec<SchedulePoint>,
    /// `[d0, d1, d2]` of the baseline drag `D(h) = d0 + d1 h + d2 h^2` (N).
    pub nominal_drag_coeffs: [f64; 3],
    #[serde(default)]
    pub esf_mode: EsfMode,
    #[serde(default)]
    pub isa: IsaConstants,
}

impl AircraftConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |msg: String| Err(PhysicsError::InvalidConfig(msg));
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return bad(format!("mass must be > 0, got {}", self.mass));
        }
        if self.max_fl <= 150 {
            return bad(format!("max_fl must exceed 150, got {}", self.max_fl));
        }
        if !(self.mach_ref > 0.0 && self.mach_ref < 1.0) {
            return bad(format!("mach_ref must be in (0, 1), got {}", self.mach_ref));
        }
        if !(self.cas_ref.is_finite() && self.cas_ref > 0.0) {
            return bad(format!("cas_ref must be > 0, got {}", self.cas_ref));
        }
        if self.idle_thrust_coeffs.iter().any(|c| c.is_nan()) || self.idle_thrust_coeffs[1] <= 0.0
        {
            return bad("idle_thrust_coeffs must be [c1, c2 > 0, c3]".into());
        }
        if self.nominal_cas_schedule.is_empty() {
            return bad("nominal_cas_schedule is empty".into());
        }
        if self
            .nominal_cas_schedule
            .windows(2)
            .any(|w| w[1].h_m <= w[0].h_m)
        {
            return bad("nominal_cas_schedule altitudes must be strictly increasing".into());
        }
        if self
            .nominal_cas_schedule
            .iter()
            .any(|p| !(p.cas_mps.is_finite() && p.cas_mps > 0.0 && p.h_m.is_finite()))
        {
            return bad("nominal_cas_schedule speeds must be positive".into());
        }
        if self.nominal_drag_coeffs.iter().any(|c| !c.is_finite()) {
            return bad("nominal_drag_coeffs must be finite".into());
        }
        self.isa.validate()?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PhysicsError> {
        let cfg: AircraftConfig =
            toml::from_str(s).map_err(|e| PhysicsError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PhysicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PhysicsError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("aircraft config serializes")
    }

    pub fn nominal_cas(&self, h: f64) -> f64 {
        let pts = &self.nominal_cas_schedule;
        if h <= pts[0].h_m {
            return pts[0].cas_mps;
        }
        for w in pts.windows(2) {
            if h <= w[1].h_m {
                let s = (h - w[0].h_m) / (w[1].h_m - w[0].h_m);
                return w[0].cas_mps + s * (w[1].cas_mps - w[0].cas_mps);
            }
        }
        pts[pts.len() - 1].cas_mps
    }

    pub fn nominal_drag(&self, h: f64) -> f64 {
        let [d0, d1, d2] = self.nominal_drag_coeffs;
        d0 + d1 * h + d2 * h * h
    }
}

/// Energy share factor for a regime.
pub fn energy_share_factor(
    mach: f64,
    regime: EsfRegime,
    c: &IsaConstants,
) -> Result<f64, PhysicsError> {
    if !(mach > 0.0 && mach < 1.0) {
        return Err(PhysicsError::MachOutOfRange(mach));
    }
    let m2 = mach * mach;
    let temp_term = c.kappa * c.r * c.lapse_rate * m2 / (2.0 * c.g0);
    let compress_term = || {
        let k = c.kappa;
        let q = 1.0 + 0.5 * (k - 1.0) * m2;
        q.powf(-1.0 / (k - 1.0)) * (q.powf(k / (k - 1.0)) - 1.0)
    };
    let f = match regime {
        EsfRegime::ConstMachAboveTrop => 1.0,
        EsfRegime::ConstMachBelowTrop => 1.0 / (1.0 + temp_term),
        EsfRegime::ConstCasAboveTrop => 1.0 / (1.0 + compress_term()),
        EsfRegime::ConstCasBelowTrop => 1.0 / (1.0 + temp_term + compress_term()),
    };
    Ok(f)
}

/// Share factor implied by the actual TAS gradient along the path.
pub fn exact_share_factor(v_tas: f64, dv_tas_dh: f64, g0: f64) -> f64 {
    1.0 / (1.0 + v_tas / g0 * dv_tas_dh)
}

/// Idle thrust `c1 * (1 - h/c2 + c3 h^2)`, clamped at zero.
pub fn idle_thrust(h: f64, cfg: &AircraftConfig) -> f64 {
    let [c1, c2, c3] = cfg.idle_thrust_coeffs;
    (c1 * (1.0 - h / c2 + c3 * h * h)).max(0.0)
}

/// The total-energy ROCD from its ingredients.
pub fn total_energy_rocd(thrust: f64, drag: f64, v_tas: f64, mass: f64, esf: f64, g0: f64) -> f64 {
    (thrust - drag) * v_tas / (mass * g0) * esf
}

fn finite(name: &str, v: f64) -> Result<f64, PhysicsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PhysicsError::InvalidInput(format!("{name} is not finite ({v})")))
    }
}

/// Everything derived from `rocd` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocdEval {
    pub v_tas: f64,
    pub mach: f64,
    pub esf: f64,
    pub thrust: f64,
    pub rocd: f64,
}

/// Aircraft + atmosphere with the transition altitude resolved once.
#[derive(Debug, Clone)]
pub struct DescentDynamics {
    pub cfg: AircraftConfig,
    pub isa: IsaConstants,
    /// Altitude above which constant-Mach share factors apply. `-inf` when the
    /// aircraft is Mach-limited everywhere, `+inf` when it never transitions.
    pub h_transition: f64,
    pub esf_mode: EsfMode,
}

impl DescentDynamics {
    pub fn new(cfg: &AircraftConfig, isa: &IsaConstants) -> Result<Self, PhysicsError> {
        let h_transition = match atmosphere::transition_altitude(cfg.cas_ref, cfg.mach_ref, isa) {
            Ok(h) => h,
            Err(AtmosphereError::NoTransition {
                mach_limited_everywhere,
                ..
            }) => {
                if mach_limited_everywhere {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                }
            }
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            cfg: cfg.clone(),
            isa: *isa,
            h_transition,
            esf_mode: cfg.esf_mode,
        })
    }

    pub fn from_config(cfg: &AircraftConfig) -> Result<Self, PhysicsError> {
        Self::new(cfg, &cfg.isa)
    }

    pub fn with_esf_mode(mut self, mode: EsfMode) -> Self {
        self.esf_mode = mode;
        self
    }

    pub fn regime(&self, h: f64) -> EsfRegime {
        let above_trop = h >= self.isa.h_trop;
        match (h > self.h_transition, above_trop) {
            (true, true) => EsfRegime::ConstMachAboveTrop,
            (true, false) => EsfRegime::ConstMachBelowTrop,
            (false, true) => EsfRegime::ConstCasAboveTrop,
            (false, false) => EsfRegime::ConstCasBelowTrop,
        }
    }

    /// ROCD with the regime-based share factor.
    pub fn rocd(&self, h: f64, drag: f64, v_cas: f64) -> Result<RocdEval, PhysicsError> {
        let s = atmosphere::isa_state(h, &self.isa)?;
        let v_tas = atmosphere::cas_to_tas_at(v_cas, &s, &self.isa);
        let mach = v_tas / s.speed_of_sound;
        let esf = energy_share_factor(mach, self.regime(h), &self.isa)?;
        Ok(self.eval_with_esf(h, drag, v_tas, mach, esf))
    }

    fn eval_with_esf(&self, h: f64, drag: f64, v_tas: f64, mach: f64, esf: f64) -> RocdEval {
        let thrust = idle_thrust(h, &self.cfg);
        let rocd = total_energy_rocd(thrust, drag, v_tas, self.cfg.mass, esf, self.isa.g0);
        RocdEval {
            v_tas,
            mach,
            esf,
            thrust,
            rocd,
        }
    }

    /// Drag implied by an observed descent rate; the blip's measured Mach
    /// selects the share factor.
    pub fn infer_drag_with_esf(&self, blip: &RadarBlip, esf: f64) -> Result<f64, PhysicsError> {
        for (name, v) in [
            ("h", blip.h),
            ("rocd", blip.rocd),
            ("v_ias", blip.v_ias),
            ("mach", blip.mach),
        ] {
            finite(name, v)?;
        }
        let v_tas = atmosphere::cas_to_tas(blip.v_ias, blip.h, &self.isa)?;
        let denom = esf * v_tas;
        if denom == 0.0 || !denom.is_finite() {
            return Err(PhysicsError::Singularity { h: blip.h });
        }
        let thrust = idle_thrust(blip.h, &self.cfg);
        Ok(thrust - blip.rocd * self.cfg.mass * self.isa.g0 / denom)
    }

    pub fn infer_drag(&self, blip: &RadarBlip) -> Result<f64, PhysicsError> {
        finite("mach", blip.mach)?;
        let esf = energy_share_factor(blip.mach, self.regime(blip.h), &self.isa)?;
        self.infer_drag_with_esf(blip, esf)
    }

    /// Drag for every blip of a time-ordered descent, honouring the ESF mode.
    /// In exact mode the TAS gradient comes from neighbouring blips.
    pub fn infer_drag_series(&self, blips: &[RadarBlip]) -> Result<Vec<f64>, PhysicsError> {
        match self.esf_mode {
            EsfMode::BadaRegimes => blips.iter().map(|b| self.infer_drag(b)).collect(),
            EsfMode::ExactProfile => {
                let v_tas = blips
                    .iter()
                    .map(|b| atmosphere::cas_to_tas(b.v_ias, b.h, &self.isa))
                    .collect::<Result<Vec<_>, _>>()?;
                let hs: Vec<f64> = blips.iter().map(|b| b.h).collect();
                let grad = finite_difference(&hs, &v_tas);
                blips
                    .iter()
                    .zip(v_tas.iter().zip(&grad))
                    .map(|(b, (&v, &dv))| {
                        let esf = exact_share_factor(v, dv, self.isa.g0);
                        self.infer_drag_with_esf(b, esf)
                    })
                    .collect()
            }
        }
    }
}

/// dy/dx by central differences (one-sided at the ends); zero where two
/// neighbours share the same abscissa.
fn finite_difference(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                _ if i == n - 1 => (n - 2, n - 1),
                _ => (i - 1, i + 1),
            };
            let dx = x[b] - x[a];
            if dx == 0.0 {
                0.0
            } else {
                (y[b] - y[a]) / dx
            }
        })
        .collect()
}

/// ROCD from a drag value and CAS with regime-based share factors.
pub fn rocd(
    h: f64,
    drag: f64,
    v_cas: f64,
    cfg: &AircraftConfig,
    c: &IsaConstants,
) -> Result<f64, PhysicsError> {
    for (name, v) in [("h", h), ("drag", drag), ("v_cas", v_cas)] {
        finite(name, v)?;
    }
    if drag <= 0.0 || v_cas <= 0.0 {
        return Err(PhysicsError::InvalidInput(format!(
            "drag and v_cas must be positive (drag {drag}, v_cas {v_cas})"
        )));
    }
    Ok(DescentDynamics::new(cfg, c)?.rocd(h, drag, v_cas)?.rocd)
}

/// Drag inferred from a radar blip.
pub fn infer_drag(blip: &RadarBlip, cfg: &AircraftConfig, c: &IsaConstants) -> Result<f64, PhysicsError> {
    DescentDynamics::new(cfg, c)?.infer_drag(blip)
}

/// Drag and CAS as functions of altitude on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentProfile {
    pub grid: AltitudeGrid,
    pub drag_values: Vec<f64>,
    pub cas_values: Vec<f64>,
}

impl DescentProfile {
    pub fn new(
        grid: AltitudeGrid,
        drag_values: Vec<f64>,
        cas_values: Vec<f64>,
    ) -> Result<Self, PhysicsError> {
        let p = Self {
            grid,
            drag_values,
            cas_values,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let n = self.grid.len();
        if self.drag_values.len() != n || self.cas_values.len() != n {
            return Err(PhysicsError::InvalidProfile(format!(
                "grid has {n} levels, drag {} and cas {}",
                self.drag_values.len(),
                self.cas_values.len()
            )));
        }
        if let Some(i) = self
            .drag_values
            .iter()
            .position(|d| !(d.is_finite() && *d > 0.0))
        {
            return Err(PhysicsError::InvalidProfile(format!(
                "drag {} at level {i} is not positive",
                self.drag_values[i]
            )));
        }
        if let Some(i) = self
            .cas_values
            .iter()
            .position(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(PhysicsError::InvalidProfile(format!(
                "cas {} at level {i} is not positive",
                self.cas_values[i]
            )));
        }
        Ok(())
    }

    /// The deterministic baseline: nominal CAS schedule and nominal drag law.
    pub fn nominal(cfg: &AircraftConfig, grid: &AltitudeGrid) -> Result<Self, PhysicsError> {
        let drag = grid.levels().iter().map(|&h| cfg.nominal_drag(h)).collect();
        let cas = grid.levels().iter().map(|&h| cfg.nominal_cas(h)).collect();
        Self::new(grid.clone(), drag, cas)
    }

    /// Linear interpolation of (drag, cas) at `h` inside the grid.
    pub fn at(&self, h: f64) -> (f64, f64) {
        let (i, s) = self.grid.locate(h);
        let lerp = |v: &[f64]| {
            if s == 0.0 {
                v[i]
            } else {
                v[i] + s * (v[i + 1] - v[i])
            }
        };
        (lerp(&self.drag_values), lerp(&self.cas_values))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub h: f64,
    pub v_cas: f64,
    pub v_tas: f64,
    pub rocd: f64,
    pub drag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTrajectory {
    pub samples: Vec<TrajectorySample>,
    pub time_to_bottom: f64,
}

/// Altitude-stepped quadrature of `dt = dh / rocd(h)`.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub dynamics: DescentDynamics,
    /// Sub-intervals per grid step. 1 means one flight level per step.
    pub substeps: usize,
}

impl Integrator {
    pub fn new(dynamics: DescentDynamics) -> Self {
        Self {
            dynamics,
            substeps: 1,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps.max(1);
        self
    }

    fn tas_gradient(&self, profile: &DescentProfile) -> Result<Vec<f64>, PhysicsError> {
        let levels = profile.grid.levels();
        let v_tas = levels
            .iter()
            .zip(&profile.cas_values)
            .map(|(&h, &v)| atmosphere::cas_to_tas(v, h, &self.dynamics.isa))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(finite_difference(levels, &v_tas))
    }

    fn point(
        &self,
        profile: &DescentProfile,
        grad: Option<&[f64]>,
        h: f64,
    ) -> Result<(RocdEval, f64, f64), PhysicsError> {
        let (drag, v_cas) = profile.at(h);
        let eval = match grad {
            None => self.dynamics.rocd(h, drag, v_cas)?,
            Some(grad) => {
                let (i, s) = profile.grid.locate(h);
                let dv = if s == 0.0 {
                    grad[i]
                } else {
                    grad[i] + s * (grad[i + 1] - grad[i])
                };
                let st = atmosphere::isa_state(h, &self.dynamics.isa)?;
                let v_tas = atmosphere::cas_to_tas_at(v_cas, &st, &self.dynamics.isa);
                let esf = exact_share_factor(v_tas, dv, self.dynamics.isa.g0);
                if !(esf.is_finite() && esf > 0.0) {
                    return Err(PhysicsError::NonDescending { h, rocd: f64::NAN });
                }
                self.dynamics
                    .eval_with_esf(h, drag, v_tas, v_tas / st.speed_of_sound, esf)
            }
        };
        if !(eval.rocd < MIN_DESCENT_RATE) {
            return Err(PhysicsError::NonDescending { h, rocd: eval.rocd });
        }
        Ok((eval, drag, v_cas))
    }

    /// Checks that the profile descends at every grid level.
    pub fn check_descending(&self, profile: &DescentProfile) -> Result<(), PhysicsError> {
        let grad = match self.dynamics.esf_mode {
            EsfMode::BadaRegimes => None,
            EsfMode::ExactProfile => Some(self.tas_gradient(profile)?),
        };
        for &h in profile.grid.levels() {
            self.point(profile, grad.as_deref(), h)?;
        }
        Ok(())
    }

    pub fn integrate(
        &self,
        profile: &DescentProfile,
        h_start: f64,
    ) -> Result<SimulatedTrajectory, PhysicsError> {
        let grid = &profile.grid;
        let tol = 1e-6;
        if !(h_start >= grid.h_i() - tol && h_start <= grid.h_f() + tol) {
            return Err(PhysicsError::InvalidInput(format!(
                "h_start {h_start} m outside grid [{}, {}] m",
                grid.h_i(),
                grid.h_f()
            )));
        }
        let h_start = h_start.clamp(grid.h_i(), grid.h_f());
        let grad = match self.dynamics.esf_mode {
            EsfMode::BadaRegimes => None,
            EsfMode::ExactProfile => Some(self.tas_gradient(profile)?),
        };
        let grad = grad.as_deref();

        // Output nodes: h_start, then every grid level strictly below it.
        let mut nodes = vec![h_start];
        nodes.extend(
            grid.levels()
                .iter()
                .rev()
                .copied()
                .filter(|&h| h < h_start - tol),
        );

        let sample = |t: f64, h: f64, e: &RocdEval, drag: f64, v_cas: f64| TrajectorySample {
            t,
            h,
            v_cas,
            v_tas: e.v_tas,
            rocd: e.rocd,
            drag,
        };

        let (mut prev, drag0, cas0) = self.point(profile, grad, h_start)?;
        let mut samples = Vec::with_capacity(nodes.len());
        samples.push(sample(0.0, h_start, &prev, drag0, cas0));
        let mut t = 0.0;
        let mut h_prev = h_start;
        for &h_next in &nodes[1..] {
            let span = h_prev - h_next;
            let mut last = None;
            for k in 1..=self.substeps {
                let h = if k == self.substeps {
                    h_next
                } else {
                    h_prev - span * k as f64 / self.substeps as f64
                };
                let dh = span / self.substeps as f64;
                let (eval, drag, v_cas) = self.point(profile, grad, h)?;
                t += dh * 0.5 * (1.0 / prev.rocd.abs() + 1.0 / eval.rocd.abs());
                prev = eval;
                last = Some((eval, drag, v_cas));
            }
            let (eval, drag, v_cas) = last.expect("at least one substep");
            samples.push(sample(t, h_next, &eval, drag, v_cas));
            h_prev = h_next;
        }
        Ok(SimulatedTrajectory {
            samples,
            time_to_bottom: t,
        })
    }
}

/// Integrates a profile from `h_start` down to the bottom of its grid with
/// one-flight-level trapezoidal steps.
pub fn integrate_descent(
    profile: &DescentProfile,
    h_start: f64,
    cfg: &AircraftConfig,
    c: &IsaConstants,
) -> Result<SimulatedTrajectory, PhysicsError> {
    let dynamics = DescentDynamics::new(cfg, c)?;
    Integrator::new(dynamics).integrate(profile, h_start)
}

/// One grid step in metres.
pub const GRID_STEP_M: f64 = METRES_PER_FL;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_aircraft() -> AircraftConfig {
        AircraftConfig {
            type_code: "TEST".into(),
            mass: 65_000.0,
            idle_thrust_coeffs: [5000.0, 40_000.0, 0.0],
            cas_ref: 150.0,
            mach_ref: 0.78,
            max_fl: 390,
            nominal_cas_schedule: vec![
                SchedulePoint { h_m: 4572.0, cas_mps: 150.0 },
                SchedulePoint { h_m: 12_000.0, cas_mps: 150.0 },
            ],
            nominal_drag_coeffs: [40_000.0, 0.0, 0.0],
            esf_mode: EsfMode::BadaRegimes,
            isa: IsaConstants::default(),
        }
    }

    /// Independent evaluation of the constant-CAS, below-tropopause share
    /// factor written directly from the textbook expression, term by term.
    fn esf_cas_below_oracle(m: f64) -> f64 {
        let k: f64 = 1.4;
        let r: f64 = 287.05287;
        let b: f64 = -0.0065;
        let g: f64 = 9.80665;
        let a = 1.0 + (k - 1.0) / 2.0 * m * m;
        let t1 = k * r * b / (2.0 * g) * m * m;
        let t2 = a.powf(-1.0 / (k - 1.0)) * (a.powf(k / (k - 1.0)) - 1.0);
        1.0 / (1.0 + t1 + t2)
    }

    #[test]
    fn esf_const_mach_above_is_one() {
        let c = IsaConstants::default();
        for m in [0.1, 0.5, 0.78, 0.99] {
            assert_eq!(
                energy_share_factor(m, EsfRegime::ConstMachAboveTrop, &c).unwrap(),
                1.0
            );
        }
    }

    #[test]
    fn esf_low_speed_limit() {
        let c = IsaConstants::default();
        let f = energy_share_factor(1e-4, EsfRegime::ConstCasBelowTrop, &c).unwrap();
        assert!((f - 1.0).abs() < 1e-7);
    }

    #[test]
    fn esf_cas_below_at_m06() {
        let c = IsaConstants::default();
        let f = energy_share_factor(0.6, EsfRegime::ConstCasBelowTrop, &c).unwrap();
        let oracle = esf_cas_below_oracle(0.6);
        assert!((f - oracle).abs() < 1e-14);
        // frozen from an exact rational (sympy) evaluation of the closed form
        assert!((f - 0.844_878_982_847_084).abs() < 1e-12, "f = {f}");
    }

    #[test]
    fn esf_bounds_and_domain() {
        let c = IsaConstants::default();
        let regimes = [
            EsfRegime::ConstCasBelowTrop,
            EsfRegime::ConstCasAboveTrop,
            EsfRegime::ConstMachBelowTrop,
            EsfRegime::ConstMachAboveTrop,
        ];
        for r in regimes {
            for k in 1..100 {
                let f = energy_share_factor(k as f64 / 100.0, r, &c).unwrap();
                assert!(f > 0.0 && f <= 1.35, "{r:?} {k} {f}");
            }
            assert!(energy_share_factor(0.0, r, &c).is_err());
            assert!(energy_share_factor(1.0, r, &c).is_err());
        }
    }

    #[test]
    fn esf_continuous_within_regime() {
        let c = IsaConstants::default();
        for r in [EsfRegime::ConstCasBelowTrop, EsfRegime::ConstMachBelowTrop] {
            let mut prev = energy_share_factor(0.01, r, &c).unwrap();
            for k in 2..990 {
                let f = energy_share_factor(k as f64 / 1000.0, r, &c).unwrap();
                assert!((f - prev).abs() < 1e-3);
                prev = f;
            }
        }
    }

    #[test]
    fn idle_thrust_cases() {
        let mut cfg = test_aircraft();
        cfg.idle_thrust_coeffs = [7000.0, 1e300, 0.0];
        for h in [0.0, 5000.0, 12_000.0] {
            assert!((idle_thrust(h, &cfg) - 7000.0).abs() < 1e-9);
        }
        cfg.idle_thrust_coeffs = [5000.0, 20_000.0, 1e-9];
        assert_eq!(idle_thrust(0.0, &cfg), 5000.0);
        // hand values: 5000 * (1 - h/20000 + 1e-9 h^2)
        let expected = [(4000.0, 4080.0), (10_000.0, 3000.0), (16_000.0, 2280.0)];
        for (h, t) in expected {
            assert!((idle_thrust(h, &cfg) - t).abs() < 1e-9, "h={h}");
        }
        cfg.idle_thrust_coeffs = [5000.0, 1000.0, 0.0];
        assert_eq!(idle_thrust(5000.0, &cfg), 0.0);
    }

    #[test]
    fn rocd_hand_arithmetic() {
        let r = total_energy_rocd(0.0, 40_000.0, 200.0, 65_000.0, 0.7, 9.80665);
        assert!((r - (-8.785)).abs() < 5e-4, "{r}");
        assert_eq!(total_energy_rocd(3000.0, 3000.0, 200.0, 65_000.0, 0.7, 9.80665), 0.0);
    }

    #[test]
    fn inferred_drag_inverts_hand_example() {
        let cfg = AircraftConfig {
            idle_thrust_coeffs: [0.0, 1.0, 0.0],
            ..test_aircraft()
        };
        let dynamics = DescentDynamics::from_config(&cfg).unwrap();
        let v_tas = 200.0;
        let h = 0.0;
        let rocd = total_energy_rocd(0.0, 40_000.0, v_tas, cfg.mass, 0.7, 9.80665);
        // h = 0 makes CAS equal TAS.
        let blip = RadarBlip { t: 0.0, h, rocd, v_ias: v_tas, mach: 0.5 };
        let d = dynamics.infer_drag_with_esf(&blip, 0.7).unwrap();
        assert!((d - 40_000.0).abs() < 1e-9 * 40_000.0);
        let zero = RadarBlip { rocd: 0.0, ..blip };
        assert_eq!(dynamics.infer_drag_with_esf(&zero, 0.7).unwrap(), 0.0);
        assert!(matches!(
            dynamics.infer_drag_with_esf(&blip, 0.0),
            Err(PhysicsError::Singularity { .. })
        ));
    }

    #[test]
    fn rocd_scales_inverse_with_mass() {
        let cfg = test_aircraft();
        let c = IsaConstants::default();
        let r1 = rocd(8000.0, 45_000.0, 140.0, &cfg, &c).unwrap();
        let heavy = AircraftConfig { mass: 2.0 * cfg.mass, ..cfg.clone() };
        let r2 = rocd(8000.0, 45_000.0, 140.0, &heavy, &c).unwrap();
        assert!((r1 - 2.0 * r2).abs() < 1e-12);
        assert!(r1 < 0.0);
    }

    #[test]
    fn rocd_rejects_bad_inputs() {
        let cfg = test_aircraft();
        let c = IsaConstants::default();
        assert!(rocd(f64::NAN, 1.0, 100.0, &cfg, &c).is_err());
        assert!(rocd(5000.0, f64::INFINITY, 100.0, &cfg, &c).is_err());
        assert!(rocd(5000.0, 10.0, 0.0, &cfg, &c).is_err());
    }

    #[test]
    fn zero_excess_thrust_gives_zero_rocd() {
        let cfg = test_aircraft();
        let c = IsaConstants::default();
        let t = idle_thrust(7000.0, &cfg);
        assert_eq!(rocd(7000.0, t, 140.0, &cfg, &c).unwrap(), 0.0);
    }

    #[test]
    fn regime_selection() {
        let cfg = test_aircraft();
        let d = DescentDynamics::from_config(&cfg).unwrap();
        assert!(d.h_transition > 8000.0 && d.h_transition < 11_000.0);
        assert_eq!(d.regime(5000.0), EsfRegime::ConstCasBelowTrop);
        assert_eq!(d.regime(d.h_transition + 1.0), EsfRegime::ConstMachBelowTrop);
        assert_eq!(d.regime(11_500.0), EsfRegime::ConstMachAboveTrop);
        assert_eq!(d.regime(d.h_transition), EsfRegime::ConstCasBelowTrop);
    }

    fn constant_rate_profile(grid: &AltitudeGrid, dynamics: &DescentDynamics, rate: f64) -> DescentProfile {
        // Drag chosen per level so that rocd is exactly `rate`.
        let v_cas = 140.0;
        let drag = grid
            .levels()
            .iter()
            .map(|&h| {
                let e = dynamics.rocd(h, 1.0, v_cas).unwrap();
                e.thrust - rate * dynamics.cfg.mass * dynamics.isa.g0 / (e.esf * e.v_tas)
            })
            .collect();
        DescentProfile::new(grid.clone(), drag, vec![v_cas; grid.len()]).unwrap()
    }

    #[test]
    fn constant_rate_quadrature() {
        let cfg = test_aircraft();
        let dynamics = DescentDynamics::from_config(&cfg).unwrap();
        let grid = AltitudeGrid::from_flight_levels(150, 250).unwrap();
        let profile = constant_rate_profile(&grid, &dynamics, -10.0);
        let integ = Integrator::new(dynamics);
        let traj = integ.integrate(&profile, grid.h_f()).unwrap();
        let span = grid.h_f() - grid.h_i();
        assert!((traj.time_to_bottom - span / 10.0).abs() < 1e-9 * (span / 10.0));
        assert_eq!(traj.samples.len(), grid.len());
        for w in traj.samples.windows(2) {
            assert!(w[1].t > w[0].t && w[1].h < w[0].h);
        }
        // A 1000 m span starting mid-grid.
        let start = grid.h_i() + 1000.0;
        let traj = integ.integrate(&profile, start).unwrap();
        assert!((traj.time_to_bottom - 100.0).abs() < 1e-6, "{}", traj.time_to_bottom);
    }

    #[test]
    fn start_at_bottom_is_empty_descent() {
        let cfg = test_aircraft();
        let grid = AltitudeGrid::from_flight_levels(150, 200).unwrap();
        let profile = DescentProfile::nominal(&cfg, &grid).unwrap();
        let traj = integrate_descent(&profile, grid.h_i(), &cfg, &cfg.isa).unwrap();
        assert_eq!(traj.time_to_bottom, 0.0);
        assert_eq!(traj.samples.len(), 1);
    }

    #[test]
    fn non_descending_profile_rejected() {
        let cfg = test_aircraft();
        let grid = AltitudeGrid::from_flight_levels(150, 200).unwrap();
        let mut profile = DescentProfile::nominal(&cfg, &grid).unwrap();
        profile.drag_values[10] = 100.0;
        let err = integrate_descent(&profile, grid.h_f(), &cfg, &cfg.isa).unwrap_err();
        assert!(matches!(err, PhysicsError::NonDescending { .. }));
    }

    #[test]
    fn h_start_outside_grid() {
        let cfg = test_aircraft();
        let grid = AltitudeGrid::from_flight_levels(150, 200).unwrap();
        let profile = DescentProfile::nominal(&cfg, &grid).unwrap();
        assert!(integrate_descent(&profile, grid.h_f() + 10.0, &cfg, &cfg.isa).is_err());
    }

    #[test]
    fn refinement_changes_little() {
        let cfg = test_aircraft();
        let grid = AltitudeGrid::from_flight_levels(150, 380).unwrap();
        let drag = grid
            .levels()
            .iter()
            .map(|&h| 42_000.0 + 3000.0 * (h / 3000.0).sin())
            .collect();
        let cas = grid
            .levels()
            .iter()
            .map(|&h| 135.0 + 0.002 * (h - 4572.0))
            .collect();
        let profile = DescentProfile::new(grid.clone(), drag, cas).unwrap();
        let d = DescentDynamics::from_config(&cfg).unwrap();
        let coarse = Integrator::new(d.clone()).integrate(&profile, grid.h_f()).unwrap();
        let fine = Integrator::new(d)
            .with_substeps(2)
            .integrate(&profile, grid.h_f())
            .unwrap();
        let rel = (coarse.time_to_bottom - fine.time_to_bottom).abs() / fine.time_to_bottom;
        assert!(rel < 1e-3, "rel change {rel}");
    }

    #[test]
    fn integration_is_additive() {
        let cfg = test_aircraft();
        let grid = AltitudeGrid::from_flight_levels(150, 350).unwrap();
        let profile = DescentProfile::nominal(&cfg, &grid).unwrap();
        let integ = Integrator::new(DescentDynamics::from_config(&cfg).unwrap());
        let whole = integ.integrate(&profile, grid.h_f()).unwrap();
        let mid = grid.levels()[100];
        let upper_part = whole
            .samples
            .iter()
            .find(|s| (s.h - mid).abs() < 1e-9)
            .unwrap()
            .t;
        let lower = integ.integrate(&profile, mid).unwrap();
        let sum = upper_part + lower.time_to_bottom;
        assert!((sum - whole.time_to_bottom).abs() < 1e-9 * whole.time_to_bottom);
    }

    #[test]
    fn exact_mode_matches_regime_free_limit() {
        // Constant TAS gradient zero => exact share factor 1.
        assert_eq!(exact_share_factor(200.0, 0.0, 9.80665), 1.0);
        let cfg = AircraftConfig { esf_mode: EsfMode::ExactProfile, ..test_aircraft() };
        let grid = AltitudeGrid::from_flight_levels(150, 300).unwrap();
        let profile = DescentProfile::nominal(&cfg, &grid).unwrap();
        let traj = integrate_descent(&profile, grid.h_f(), &cfg, &cfg.isa).unwrap();
        assert!(traj.time_to_bottom > 0.0);
    }

    #[test]
    fn aircraft_config_toml_round_trip() {
        let cfg = test_aircraft();
        let text = cfg.to_toml_string();
        let back = AircraftConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = text.replace("mass = 65000.0", "mass = -1.0");
        assert!(AircraftConfig::from_toml_str(&bad).is_err());
    }
}
