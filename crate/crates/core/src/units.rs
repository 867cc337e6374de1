//! Unit conversions. Everything internal is SI.

/// Metres per flight level (100 ft).
pub const METRES_PER_FL: f64 = 30.48;

/// Metres per second in one foot per minute.
pub const MPS_PER_FPM: f64 = 0.3048 / 60.0;

/// Metres per second in one knot.
pub const MPS_PER_KNOT: f64 = 1852.0 / 3600.0;

pub fn fl_to_m(fl: u32) -> f64 {
    fl as f64 * METRES_PER_FL
}

/// Flight level at or below `h`, tolerant to rounding in `fl * 30.48`.
pub fn m_to_fl_floor(h: f64) -> i64 {
    (h / METRES_PER_FL + 1e-9).floor() as i64
}

pub fn fpm_to_mps(fpm: f64) -> f64 {
    fpm * MPS_PER_FPM
}

pub fn mps_to_fpm(v: f64) -> f64 {
    v / MPS_PER_FPM
}

pub fn knots_to_mps(kt: f64) -> f64 {
    kt * MPS_PER_KNOT
}
