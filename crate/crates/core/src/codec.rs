//! Latency coding: values in [0, 1] become spike times, spike times in a
//! neuron's decoding window become values on the `1/T_max` grid.

use serde::{Deserialize, Serialize};

use crate::error::{QuartzError, Result};

/// A spike on the global clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub neuron_id: usize,
    pub time: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub t_max: u32,
}

impl CodecConfig {
    pub fn new(t_max: u32) -> Result<Self> {
        if t_max == 0 {
            return Err(QuartzError::InvalidArgument("T_max must be at least 1".into()));
        }
        Ok(CodecConfig { t_max })
    }
}

/// Spike time `floor(T_max * (1 - p))` of an input value; brighter fires earlier.
///
/// Evaluated as `T_max - ceil(T_max * p)`, which is the same integer and
/// rounds `T_max * p` once, so the represented value is exactly
/// `ceil(T_max * p) / T_max`.
pub fn encode_value(p: f64, t_max: u32) -> Result<u32> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(QuartzError::OutOfRange { value: p });
    }
    let t = f64::from(t_max);
    Ok((t - grid_ceil(t * p)) as u32)
}

/// `ceil(x)`, except that an `x` within a few ulps of an integer counts as
/// that integer, so decimal inputs such as `25 * 0.28` land on their level.
pub fn grid_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Value carried by an encoded input spike at time `s`: `(T_max - s) / T_max`.
pub fn input_value(s: u32, t_max: u32) -> f64 {
    f64::from(t_max - s.min(t_max)) / f64::from(t_max)
}

/// Value represented by a spike at local time `t_local` of a neuron's
/// window: `2 - t_local / T_max`. Spikes before `T_max` are early and must
/// be handled by the caller.
pub fn decode_spike_time(t_local: i64, t_max: u32) -> Result<f64> {
    if t_local < i64::from(t_max) {
        return Err(QuartzError::EarlySpikeTime { t_local, t_max });
    }
    let t = i64::from(t_max);
    Ok((2 * t - t_local) as f64 / t as f64)
}

/// The input quantizer `ceil(T_max * p) / T_max`.
pub fn quantize_input(p: f64, t_max: u32) -> Result<f64> {
    Ok(input_value(encode_value(p, t_max)?, t_max))
}

/// The value a spiking neuron represents for an activation `a`:
/// `1 - ceil(T_max * (1 - a)) / T_max`, clipped at zero when rectified.
/// Activations above 1 cannot be represented (the neuron fires early).
pub fn quantize_value(a: f64, t_max: u32, rectify: bool) -> Result<f64> {
    if !a.is_finite() {
        return Err(QuartzError::NonFinite(format!("activation {a}")));
    }
    if a > 1.0 {
        return Err(QuartzError::OutOfRange { value: a });
    }
    let t = f64::from(t_max);
    let q = (t - grid_ceil(t * (1.0 - a))) / t;
    Ok(if rectify { q.max(0.0) } else { q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_boundaries() {
        assert_eq!(encode_value(1.0, 7).unwrap(), 0);
        assert_eq!(encode_value(0.0, 16).unwrap(), 16);
        assert_eq!(encode_value(0.75, 4).unwrap(), 1);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        assert!(encode_value(1.0001, 4).is_err());
        assert!(encode_value(-0.1, 4).is_err());
        assert!(encode_value(f64::NAN, 4).is_err());
    }

    #[test]
    fn decode_window() {
        assert_eq!(decode_spike_time(32, 16).unwrap(), 0.0);
        assert_eq!(decode_spike_time(16, 16).unwrap(), 1.0);
        assert_eq!(decode_spike_time(24, 16).unwrap(), 0.5);
        assert_eq!(decode_spike_time(40, 16).unwrap(), -0.5);
        assert!(matches!(
            decode_spike_time(15, 16),
            Err(QuartzError::EarlySpikeTime { .. })
        ));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.5, 4, true).unwrap(), 0.5);
        assert_eq!(quantize_value(0.3, 4, true).unwrap(), 0.25);
        assert_eq!(quantize_value(-0.2, 10, true).unwrap(), 0.0);
        assert!((quantize_value(-0.2, 10, false).unwrap() + 0.2).abs() < 1e-12);
        assert!(quantize_value(1.5, 10, true).is_err());
    }

    #[test]
    fn near_integer_products_keep_their_level() {
        assert_eq!(encode_value(0.28, 25).unwrap(), 18);
        assert_eq!(encode_value(0.02, 50).unwrap(), 49);
        assert_eq!(grid_ceil(7.2), 8.0);
    }

    proptest! {
        #[test]
        fn roundtrip_is_ceil_quantizer(p in 0.0f64..=1.0, t_max in 1u32..=128) {
            let s = encode_value(p, t_max).unwrap();
            prop_assert!(s <= t_max);
            let v = decode_spike_time(i64::from(s + t_max), t_max).unwrap();
            let t = f64::from(t_max);
            let level = (v * t).round();
            prop_assert_eq!(v, level / t);
            prop_assert!(level >= t * p - 1e-9 && level < t * p + 1.0);
        }

        #[test]
        fn decimal_grid_levels(i in 0u32..=10_000, t_max in 1u32..=64) {
            let s = encode_value(f64::from(i) / 10_000.0, t_max).unwrap();
            prop_assert_eq!(t_max - s, (t_max * i).div_ceil(10_000));
        }

        #[test]
        fn quantization_error_is_below_one_step(a in 0.0f64..=1.0, t_max in 1u32..=128) {
            let q = quantize_value(a, t_max, true).unwrap();
            prop_assert!((q - a).abs() <= 1.0 / f64::from(t_max) + 1e-12);
            prop_assert!(q <= a + 1e-12);
        }

        #[test]
        fn encode_is_non_increasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t_max in 1u32..=64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(encode_value(hi, t_max).unwrap() <= encode_value(lo, t_max).unwrap());
        }

        #[test]
        fn decode_is_strictly_decreasing(t in 16i64..80, t_max in 16u32..=16) {
            prop_assert!(decode_spike_time(t + 1, t_max).unwrap() < decode_spike_time(t, t_max).unwrap());
        }
    }
}
