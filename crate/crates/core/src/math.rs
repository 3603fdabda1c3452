//! Standard normal kernels and the per-entry censored (Tobit) likelihood.
//!
//! Targets are lower-censored at zero: an entry at or below the censor
//! threshold contributes `-log Φ(-mu/σ)`, any other entry contributes the full
//! Gaussian negative log-density `(y-mu)²/(2σ²) + log σ + ½ log 2π`.

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this standardized argument `log Φ` switches from `erfc` to the
/// asymptotic expansion of the Gaussian tail.
const ASYMPTOTIC_CUTOFF: f64 = -30.0;

/// Standardized arguments are clamped to `±Z_CAP` before evaluation. Beyond it
/// the term is reported as saturated; values stay finite.
pub const Z_CAP: f64 = 1.0e6;

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::InvalidArgument(format!("std_normal_pdf of {z}")));
    }
    Ok(INV_SQRT_2PI * (-0.5 * z * z).exp())
}

/// Upper tail `P(Z > z)` of the standard normal, through `erfc`.
pub fn std_normal_tail(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::InvalidArgument(format!("std_normal_tail of {z}")));
    }
    Ok(tail(z))
}

#[inline]
fn tail(z: f64) -> f64 {
    0.5 * libm::erfc(z * std::f64::consts::FRAC_1_SQRT_2)
}

/// `1 - 1/z² + 3/z⁴ - 15/z⁶ + …`, the correction factor in
/// `Φ(z) ≈ φ(z)/(-z) · S(z)` for large negative `z`.
#[inline]
fn mills_series(z: f64) -> f64 {
    let w = 1.0 / (z * z);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=8 {
        term *= -((2 * k - 1) as f64) * w;
        sum += term;
    }
    sum
}

/// `log Φ(z)`, accurate across the whole real line.
#[inline]
pub fn log_std_normal_cdf(z: f64) -> f64 {
    if z >= 0.0 {
        (-tail(z)).ln_1p()
    } else if z >= ASYMPTOTIC_CUTOFF {
        tail(-z).ln()
    } else {
        -0.5 * z * z - (-z).ln() - HALF_LN_2PI + mills_series(z).ln()
    }
}

/// Inverse Mills ratio `φ(z)/Φ(z)`.
#[inline]
pub fn inverse_mills(z: f64) -> f64 {
    if z >= ASYMPTOTIC_CUTOFF {
        (-0.5 * z * z - HALF_LN_2PI - log_std_normal_cdf(z)).exp()
    } else {
        -z / mills_series(z)
    }
}

/// One entry of the censored likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensoredNllTerm {
    pub y: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl CensoredNllTerm {
    pub fn new(y: f64, mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if !(y.is_finite() && y >= 0.0) {
            return Err(Error::InvalidArgument(format!("target must be nonnegative, got {y}")));
        }
        if !mu.is_finite() {
            return Err(Error::InvalidArgument(format!("predictor must be finite, got {mu}")));
        }
        Ok(Self { y, mu, sigma })
    }
}

/// A likelihood evaluation plus a flag raised when the standardized argument
/// had to be clamped to `±Z_CAP`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllValue {
    pub value: f64,
    pub saturated: bool,
}

/// Negative log-likelihood of one entry, censored iff `y == 0`.
pub fn censored_nll(term: &CensoredNllTerm) -> NllValue {
    censored_nll_at(term, 0.0)
}

/// As [`censored_nll`], treating `y <= threshold` as censored.
pub fn censored_nll_at(term: &CensoredNllTerm, threshold: f64) -> NllValue {
    let (value, _, saturated) = nll_and_grad(term.y, term.mu, term.sigma, threshold);
    NllValue { value, saturated }
}

/// `d(censored_nll)/d(mu)`.
pub fn grad_mu_censored_nll(term: &CensoredNllTerm) -> NllValue {
    grad_mu_censored_nll_at(term, 0.0)
}

pub fn grad_mu_censored_nll_at(term: &CensoredNllTerm, threshold: f64) -> NllValue {
    let (_, value, saturated) = nll_and_grad(term.y, term.mu, term.sigma, threshold);
    NllValue { value, saturated }
}

/// Unchecked kernel returning `(nll, d nll/d mu, saturated)`. Callers are
/// responsible for `sigma > 0` and finite inputs.
#[inline]
pub fn nll_and_grad(y: f64, mu: f64, sigma: f64, threshold: f64) -> (f64, f64, bool) {
    if y > threshold {
        let r = y - mu;
        let s2 = sigma * sigma;
        (0.5 * r * r / s2 + sigma.ln() + HALF_LN_2PI, -r / s2, false)
    } else {
        let raw = -mu / sigma;
        let z = raw.clamp(-Z_CAP, Z_CAP);
        let nll = -log_std_normal_cdf(z);
        let grad = inverse_mills(z) / sigma;
        (nll, grad, z != raw)
    }
}

/// Gradient only; skips the log-CDF where it is not needed.
#[inline]
pub(crate) fn grad_only(y: f64, mu: f64, sigma: f64, threshold: f64) -> f64 {
    if y > threshold {
        -(y - mu) / (sigma * sigma)
    } else {
        let z = (-mu / sigma).clamp(-Z_CAP, Z_CAP);
        inverse_mills(z) / sigma
    }
}
