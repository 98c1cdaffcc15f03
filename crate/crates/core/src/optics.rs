//! Kolmogorov phase statistics and Fried-parameter conversions.

use crate::error::{invalid, Result};
use std::f64::consts::PI;

pub const STRUCTURE_COEFF: f64 = 6.88;

/// Phase structure function `6.88 (r / r0)^{5/3}` in rad².
pub fn structure_function(r: f64, r0: f64) -> Result<f64> {
    if !(r0 > 0.0) {
        return invalid(format!("r0 must be positive, got {r0}"));
    }
    if !(r >= 0.0) {
        return invalid(format!("separation must be non-negative, got {r}"));
    }
    Ok(STRUCTURE_COEFF * (r / r0).powf(5.0 / 3.0))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(format!("{name} must be positive and finite, got {v}"))
    }
}

/// Plane-wave Fried parameter for a constant-Cn² path of length `l`.
pub fn fried_from_cn2(cn2: f64, wavelength: f64, l: f64) -> Result<f64> {
    check_positive("cn2", cn2)?;
    check_positive("wavelength", wavelength)?;
    check_positive("path length", l)?;
    let k = 2.0 * PI / wavelength;
    Ok((0.423 * k * k * cn2 * l).powf(-3.0 / 5.0))
}

pub fn cn2_from_fried(r0: f64, wavelength: f64, l: f64) -> Result<f64> {
    check_positive("r0", r0)?;
    check_positive("wavelength", wavelength)?;
    check_positive("path length", l)?;
    let k = 2.0 * PI / wavelength;
    Ok(r0.powf(-5.0 / 3.0) / (0.423 * k * k * l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn structure_function_values() {
        assert_eq!(structure_function(0.05, 0.05).unwrap(), 6.88);
        assert_eq!(structure_function(0.0, 0.05).unwrap(), 0.0);
        assert_relative_eq!(structure_function(0.1, 0.05).unwrap(), 21.848, max_relative = 5e-4);
        assert!(structure_function(1.0, 0.0).is_err());
        assert!(structure_function(1.0, -1.0).is_err());
    }

    #[test]
    fn fried_conversions() {
        let r1 = fried_from_cn2(1e-15, 525e-9, 1000.0).unwrap();
        let r2 = fried_from_cn2(2e-15, 525e-9, 1000.0).unwrap();
        assert_relative_eq!(r2 / r1, 2f64.powf(-0.6), max_relative = 1e-12);
        assert_relative_eq!(r2 / r1, 0.6598, max_relative = 1e-4);
        assert!(fried_from_cn2(1e-40, 525e-9, 1000.0).unwrap() > 1e9);
        assert!(fried_from_cn2(0.0, 525e-9, 1000.0).is_err());
        assert!(cn2_from_fried(0.05, -1.0, 1000.0).is_err());
    }

    proptest! {
        #[test]
        fn cn2_round_trip(log_c in -18.0f64..-12.0, lam in 400e-9f64..2e-6, l in 10.0f64..2e4) {
            let c = 10f64.powf(log_c);
            let back = cn2_from_fried(fried_from_cn2(c, lam, l).unwrap(), lam, l).unwrap();
            prop_assert!(((back - c) / c).abs() < 1e-12);
        }

        #[test]
        fn structure_function_homogeneous(r in 0.0f64..5.0, r0 in 0.01f64..1.0, t in 0.1f64..10.0) {
            let a = structure_function(t * r, t * r0).unwrap();
            let b = structure_function(r, r0).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
            let scaled = structure_function(t * r, r0).unwrap();
            prop_assert!((scaled - t.powf(5.0 / 3.0) * b).abs() <= 1e-9 * scaled.max(1e-12));
            let bigger = structure_function(r + 0.01, r0).unwrap();
            prop_assert!(bigger > b);
        }
    }
}
