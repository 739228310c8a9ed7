//! Normal-distribution helpers with tail-safe evaluation.
//!
//! Everything here works in `f64`. The tail regime (`x < -5` for the
//! standard normal CDF) goes through the scaled complementary error
//! function `erfcx(t) = exp(t²)·erfc(t)` so that ratios such as
//! `φ(x)/Φ(x)` stay finite and accurate far past the point where `Φ(x)`
//! underflows.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `1/sqrt(2π)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// `ln(sqrt(2π))`
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// `1/sqrt(π)`
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Below this argument the Mills-ratio and log-CDF evaluations switch from
/// the direct `erfc` form to the scaled `erfcx` form.
pub const TAIL_SWITCH: f64 = -5.0;

/// Above this argument `erfcx` is evaluated by continued fraction.
const ERFCX_CF_SWITCH: f64 = 5.0;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `exp(x²)` with the square split into a head and an exact tail, so the
/// exponent carries no rounding error from forming `x*x`.
fn exp_square(x: f64) -> f64 {
    let hi = x * x;
    let lo = x.mul_add(x, -hi);
    hi.exp() * lo.exp()
}

/// Scaled complementary error function `exp(x²)·erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        // erfcx(-t) = 2exp(t²) - erfcx(t)
        if x < -26.7 {
            return f64::INFINITY;
        }
        return 2.0 * exp_square(x) - erfcx(-x);
    }
    if x < ERFCX_CF_SWITCH {
        return erfc(x) * exp_square(x);
    }
    if x > 1e8 {
        return INV_SQRT_PI / x;
    }
    INV_SQRT_PI / laplace_fraction(x).k1
}

/// Leading partial denominators of the Laplace continued fraction
/// `erfcx(t) = (1/√π)/K₁`, `K_j = t + (j/2)/K_{j+1}`.
///
/// Only meaningful (and fast to converge) for `t ≥ 5`.
#[derive(Debug, Clone, Copy)]
pub struct LaplaceFraction {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

pub fn laplace_fraction(t: f64) -> LaplaceFraction {
    let mut tail = t;
    let mut k = [t; 4];
    for j in (1..=80).rev() {
        tail = t + (j as f64 * 0.5) / tail;
        if j <= 3 {
            k[j] = tail;
        }
    }
    LaplaceFraction {
        k1: k[1],
        k2: k[2],
        k3: k[3],
    }
}

/// Argument `t = -x/√2` above which the tail forms use the continued fraction.
pub const LAPLACE_SWITCH: f64 = ERFCX_CF_SWITCH;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn norm_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF `Φ(x)`, relative-accurate in both tails until
/// underflow.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)` for any finite `x`.
pub fn norm_log_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        let t = -x * FRAC_1_SQRT_2;
        (0.5 * erfcx(t)).ln() - t * t
    } else if x > 0.0 {
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        norm_cdf(x).ln()
    }
}

/// Inverse Mills ratio `R(x) = φ(x)/Φ(x)`.
///
/// Direct ratio for `x ≥ -5`, `sqrt(2/π)/erfcx(-x/√2)` below.
pub fn mills_ratio(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        let t = -x * FRAC_1_SQRT_2;
        (2.0 / PI).sqrt() / erfcx(t)
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

/// Log of the Gaussian density `N(x; mean, var)`.
pub fn gauss_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * r * r / var - 0.5 * var.ln() - LN_SQRT_2PI
}

/// `ln(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
