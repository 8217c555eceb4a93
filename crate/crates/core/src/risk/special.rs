//! Error-function inverses polished to full double precision.
//!
//! `libm` supplies `erf`/`erfc` (accurate to about an ulp); `statrs` supplies
//! rational initial guesses for the inverses, each polished by two Newton
//! steps against the forward function.

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

pub use libm::{erf, erfc};

/// Inverse of `erf` on `(-1, 1)`; `±∞` at the endpoints.
pub fn erf_inv(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= -1.0 {
        return f64::NEG_INFINITY;
    }
    if x >= 1.0 {
        return f64::INFINITY;
    }
    if x.abs() > 0.5 {
        // 1 - |x| is exact here.
        return x.signum() * erfc_inv(1.0 - x.abs());
    }
    let mut y = statrs::function::erf::erf_inv(x);
    for _ in 0..2 {
        let d = FRAC_2_SQRT_PI * (-y * y).exp();
        y -= (erf(y) - x) / d;
    }
    y
}

/// Inverse of `erfc` on `(0, 2)`; `±∞` at the endpoints.
pub fn erfc_inv(q: f64) -> f64 {
    if q.is_nan() {
        return f64::NAN;
    }
    if q <= 0.0 {
        return f64::INFINITY;
    }
    if q >= 2.0 {
        return f64::NEG_INFINITY;
    }
    if q > 1.0 {
        return -erfc_inv(2.0 - q);
    }
    if q > 0.5 {
        return erf_inv(1.0 - q);
    }
    let mut y = statrs::function::erf::erfc_inv(q);
    let ln_q = q.ln();
    for _ in 0..2 {
        // Newton on ln erfc(y) - ln q keeps full relative accuracy in the tail.
        let c = erfc(y);
        if !(c > 0.0) {
            break;
        }
        let d = -FRAC_2_SQRT_PI * (-y * y).exp() / c;
        if !(d < 0.0) {
            break;
        }
        y -= (c.ln() - ln_q) / d;
    }
    y
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}
