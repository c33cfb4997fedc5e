//! Scalar special functions used by the likelihood.

use statrs::function::gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_2: f64 = std::f64::consts::LN_2;

/// Counts at or below this use an exact product for Γ(w + y) / Γ(w).
const RISING_EXACT_MAX: u32 = 32;

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    gamma::digamma(x)
}

/// `ln Γ(w + y) − ln Γ(w)`.
pub fn ln_rising(w: f64, y: u32) -> f64 {
    if y <= RISING_EXACT_MAX {
        (0..y).map(|j| (w + j as f64).ln()).sum()
    } else {
        ln_gamma(w + y as f64) - ln_gamma(w)
    }
}

/// `ψ(w + y) − ψ(w)`.
pub fn digamma_rising(w: f64, y: u32) -> f64 {
    if y <= RISING_EXACT_MAX {
        (0..y).map(|j| 1.0 / (w + j as f64)).sum()
    } else {
        digamma(w + y as f64) - digamma(w)
    }
}

/// `ln y!`
pub fn ln_factorial(y: u32) -> f64 {
    if y <= RISING_EXACT_MAX {
        (2..=y).map(|j| (j as f64).ln()).sum()
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

/// `ln(1 + eˣ)` together with the logistic `1 / (1 + e⁻ˣ)`, sharing one exp.
#[inline]
pub fn softplus_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let p = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, p)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    softplus_sigmoid(x).0
}

/// Log density of the half-normal with scale `s` at `x ≥ 0`.
pub fn half_normal_ln_pdf(x: f64, s: f64) -> f64 {
    LN_2 - 0.5 * LN_2PI - s.ln() - x * x / (2.0 * s * s)
}
