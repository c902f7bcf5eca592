//! Gaussian tail helpers used by the ex-Gaussian channel densities.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Below this argument `exp(x^2) * erfc(x)` stays in the normal range of f64.
const ERFCX_PRODUCT_LIMIT: f64 = 26.0;

/// `exp(x^2)` with the rounding error of `x*x` carried separately.
fn exp_square(x: f64) -> f64 {
    let hi = x * x;
    let lo = x.mul_add(x, -hi);
    hi.exp() * lo.exp()
}

/// Scaled complementary error function `exp(x^2) * erfc(x)`.
///
/// Finite for every `x > -26.6`; large positive arguments use the asymptotic
/// expansion so the result never underflows.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 * exp_square(x) - erfcx(-x);
    }
    if x < ERFCX_PRODUCT_LIMIT {
        return exp_square(x) * libm::erfc(x);
    }
    if x.is_infinite() {
        return 0.0;
    }
    // 1/(x sqrt(pi)) * sum_k (-1)^k (2k-1)!! / (2x^2)^k
    let inv2x2 = 1.0 / (2.0 * x * x);
    let mut term: f64 = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term.abs() > 1e-18 {
        term *= -(2.0 * k - 1.0) * inv2x2;
        sum += term;
        k += 1.0;
    }
    sum / (x * PI.sqrt())
}

/// Standard normal tail probability `Q(x) = P(Z > x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal CDF `P(Z <= x)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `exp(x^2 / 2) * Q(x)`, bounded for all `x >= 0`.
pub fn scaled_normal_sf(x: f64) -> f64 {
    0.5 * erfcx(x * FRAC_1_SQRT_2)
}
