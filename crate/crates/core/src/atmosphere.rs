//! International Standard Atmosphere and airspeed conversions.
//!
//! Temperature falls linearly up to the tropopause and is constant above it.
//! Pressure and density follow the hydrostatic law in each layer and are
//! continuous at the tropopause. Temperature offsets are always zero.
//!
//! CAS and TAS are related through the impact pressure using the full
//! compressible-flow (Saint-Venant) expressions:
//!
//! ```text
//! mu    = (kappa - 1) / kappa
//! V_TAS = sqrt( 2/mu * p/rho  * [ (1 + p0/p * ((1 + mu/2 * rho0/p0 * V_CAS^2)^(1/mu) - 1))^mu - 1 ] )
//! V_CAS = sqrt( 2/mu * p0/rho0 * [ (1 + p/p0 * ((1 + mu/2 * rho/p  * V_TAS^2)^(1/mu) - 1))^mu - 1 ] )
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest altitude the atmosphere model accepts (m).
pub const MAX_ALTITUDE_M: f64 = 20_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtmosphereError {
    #[error("altitude {0} m outside [0, {MAX_ALTITUDE_M}] m")]
    AltitudeOutOfRange(f64),
    #[error("{what} must be finite and non-negative, got {value}")]
    InvalidSpeed { what: &'static str, value: f64 },
    #[error("invalid ISA constants: {0}")]
    InvalidConstants(String),
    #[error("invalid transition reference (cas_ref {cas_ref} m/s, mach_ref {mach_ref})")]
    InvalidReference { cas_ref: f64, mach_ref: f64 },
    #[error(
        "no CAS/Mach transition in [0, {MAX_ALTITUDE_M}] m for cas_ref {cas_ref} m/s, mach_ref {mach_ref} ({})",
        if *.mach_limited_everywhere { "Mach-limited from sea level" } else { "CAS-limited throughout" }
    )]
    NoTransition {
        cas_ref: f64,
        mach_ref: f64,
        /// True when the CAS schedule already exceeds the Mach schedule at sea level.
        mach_limited_everywhere: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsaConstants {
    /// Sea-level temperature (K).
    pub t0: f64,
    /// Sea-level pressure (Pa).
    pub p0: f64,
    /// Sea-level density (kg/m^3).
    pub rho0: f64,
    /// Gravitational acceleration (m/s^2).
    pub g0: f64,
    /// Ratio of specific heats.
    pub kappa: f64,
    /// Specific gas constant of air (J/(kg K)).
    pub r: f64,
    /// Tropospheric temperature gradient (K/m), negative.
    pub lapse_rate: f64,
    /// Tropopause altitude (m).
    pub h_trop: f64,
}

impl Default for IsaConstants {
    fn default() -> Self {
        Self {
            t0: 288.15,
            p0: 101_325.0,
            rho0: 1.225,
            g0: 9.80665,
            kappa: 1.4,
            r: 287.05287,
            lapse_rate: -0.0065,
            h_trop: 11_000.0,
        }
    }
}

impl IsaConstants {
    pub fn validate(&self) -> Result<(), AtmosphereError> {
        let positive = [
            ("t0", self.t0),
            ("p0", self.p0),
            ("rho0", self.rho0),
            ("g0", self.g0),
            ("kappa", self.kappa),
            ("r", self.r),
            ("h_trop", self.h_trop),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(AtmosphereError::InvalidConstants(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if !(self.lapse_rate.is_finite() && self.lapse_rate < 0.0) {
            return Err(AtmosphereError::InvalidConstants(format!(
                "lapse_rate must be strictly negative, got {}",
                self.lapse_rate
            )));
        }
        if self.kappa <= 1.0 {
            return Err(AtmosphereError::InvalidConstants(format!(
                "kappa must exceed 1, got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// Temperature at the tropopause (K).
    pub fn t_trop(&self) -> f64 {
        self.t0 + self.lapse_rate * self.h_trop
    }

    /// Hydrostatic exponent `-g0 / (lapse_rate * R)` of the tropospheric pressure law.
    fn pressure_exponent(&self) -> f64 {
        -self.g0 / (self.lapse_rate * self.r)
    }

    fn mu(&self) -> f64 {
        (self.kappa - 1.0) / self.kappa
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtmosphereState {
    pub temperature: f64,
    pub pressure: f64,
    pub density: f64,
    pub speed_of_sound: f64,
}

fn check_altitude(h: f64) -> Result<(), AtmosphereError> {
    if h.is_finite() && (0.0..=MAX_ALTITUDE_M).contains(&h) {
        Ok(())
    } else {
        Err(AtmosphereError::AltitudeOutOfRange(h))
    }
}

fn check_speed(what: &'static str, v: f64) -> Result<(), AtmosphereError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(AtmosphereError::InvalidSpeed { what, value: v })
    }
}

/// ISA state at geodetic altitude `h` (m).
pub fn isa_state(h: f64, c: &IsaConstants) -> Result<AtmosphereState, AtmosphereError> {
    check_altitude(h)?;
    let n = c.pressure_exponent();
    let (temperature, pressure, density) = if h <= c.h_trop {
        let t = c.t0 + c.lapse_rate * h;
        let ratio = t / c.t0;
        (t, c.p0 * ratio.powf(n), c.rho0 * ratio.powf(n - 1.0))
    } else {
        let t_trop = c.t_trop();
        let ratio = t_trop / c.t0;
        let p_trop = c.p0 * ratio.powf(n);
        let rho_trop = c.rho0 * ratio.powf(n - 1.0);
        let decay = (-c.g0 * (h - c.h_trop) / (c.r * t_trop)).exp();
        (t_trop, p_trop * decay, rho_trop * decay)
    };
    Ok(AtmosphereState {
        temperature,
        pressure,
        density,
        speed_of_sound: (c.kappa * c.r * temperature).sqrt(),
    })
}

pub fn speed_of_sound(h: f64, c: &IsaConstants) -> Result<f64, AtmosphereError> {
    Ok(isa_state(h, c)?.speed_of_sound)
}

/// Converts calibrated airspeed to true airspeed at altitude `h`.
pub fn cas_to_tas(v_cas: f64, h: f64, c: &IsaConstants) -> Result<f64, AtmosphereError> {
    check_speed("v_cas", v_cas)?;
    let s = isa_state(h, c)?;
    Ok(cas_to_tas_at(v_cas, &s, c))
}

/// Converts true airspeed to calibrated airspeed at altitude `h`.
pub fn tas_to_cas(v_tas: f64, h: f64, c: &IsaConstants) -> Result<f64, AtmosphereError> {
    check_speed("v_tas", v_tas)?;
    let s = isa_state(h, c)?;
    Ok(tas_to_cas_at(v_tas, &s, c))
}

/// Same as [`cas_to_tas`] with a precomputed atmosphere state.
pub fn cas_to_tas_at(v_cas: f64, s: &AtmosphereState, c: &IsaConstants) -> f64 {
    let mu = c.mu();
    let impact = (1.0 + 0.5 * mu * c.rho0 / c.p0 * v_cas * v_cas).powf(1.0 / mu) - 1.0;
    let inner = (1.0 + c.p0 / s.pressure * impact).powf(mu) - 1.0;
    (2.0 / mu * s.pressure / s.density * inner).sqrt()
}

/// Same as [`tas_to_cas`] with a precomputed atmosphere state.
pub fn tas_to_cas_at(v_tas: f64, s: &AtmosphereState, c: &IsaConstants) -> f64 {
    let mu = c.mu();
    let impact = (1.0 + 0.5 * mu * s.density / s.pressure * v_tas * v_tas).powf(1.0 / mu) - 1.0;
    let inner = (1.0 + s.pressure / c.p0 * impact).powf(mu) - 1.0;
    (2.0 / mu * c.p0 / c.rho0 * inner).sqrt()
}

pub fn mach_number(v_tas: f64, h: f64, c: &IsaConstants) -> Result<f64, AtmosphereError> {
    check_speed("v_tas", v_tas)?;
    Ok(v_tas / speed_of_sound(h, c)?)
}

/// Altitude at which a constant-CAS schedule at `cas_ref` reaches `mach_ref`.
///
/// Found by bisection on `cas_to_tas(cas_ref, h) - mach_ref * a(h)`, which is
/// increasing in `h`. The bracket is shrunk well below 0.1 m so the speed
/// residual at the returned altitude is negligible.
pub fn transition_altitude(
    cas_ref: f64,
    mach_ref: f64,
    c: &IsaConstants,
) -> Result<f64, AtmosphereError> {
    if !(cas_ref.is_finite() && cas_ref > 0.0 && mach_ref > 0.0 && mach_ref < 1.0) {
        return Err(AtmosphereError::InvalidReference { cas_ref, mach_ref });
    }
    let gap = |h: f64| -> Result<f64, AtmosphereError> {
        let s = isa_state(h, c)?;
        Ok(cas_to_tas_at(cas_ref, &s, c) - mach_ref * s.speed_of_sound)
    };
    let mut lo = 0.0;
    let mut hi = MAX_ALTITUDE_M;
    if gap(lo)? >= 0.0 || gap(hi)? < 0.0 {
        return Err(AtmosphereError::NoTransition {
            cas_ref,
            mach_ref,
            mach_limited_everywhere: gap(lo)? >= 0.0,
        });
    }
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
