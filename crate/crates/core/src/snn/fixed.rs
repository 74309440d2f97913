//! Fixed-point representation used for synaptic weights, currents and
//! membrane potentials. Sums of fixed-point values are exact and independent
//! of delivery order, which is what lets the readout current balance to
//! exactly 1 and the simulator agree bit-for-bit with the closed-form oracle.

use crate::error::{QuartzError, Result};

pub const FRAC_BITS: u32 = 32;
pub const ONE: i64 = 1 << FRAC_BITS;

/// Largest magnitude accepted for a single weight or bias.
pub const MAX_MAGNITUDE: f64 = (1u64 << 24) as f64;

pub fn to_fixed(x: f64) -> Result<i64> {
    if !x.is_finite() || x.abs() >= MAX_MAGNITUDE {
        return Err(QuartzError::Unsupported(format!(
            "parameter {x} is outside the fixed-point range ±2^24"
        )));
    }
    Ok((x * ONE as f64).round() as i64)
}

pub fn to_f64(x: i64) -> f64 {
    x as f64 / ONE as f64
}

/// Rounds `x` onto the fixed-point grid; the result is exactly representable.
pub fn snap(x: f64) -> Result<f64> {
    Ok(to_f64(to_fixed(x)?))
}
