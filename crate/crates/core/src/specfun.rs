//! Log-gamma, digamma and trigamma on the positive reals, plus the curvature
//! function of the quadratic bound on `ln Γ(· + 1)`.
//!
//! Arguments below [`ASYMPTOTIC_THRESHOLD`] are shifted upward with the
//! recurrence relations, then the Stirling-type expansions are applied.
//! The `*_pos` variants skip argument validation and are meant for inner
//! loops whose inputs are already known to be positive.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Below this the recurrence shifts the argument before the asymptotic series.
pub const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// B_2, B_4, ..., B_18.
const BERNOULLI: [f64; 9] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
];

fn check(function: &'static str, x: f64) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Domain { function, value: x })
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64> {
    check("ln_gamma", x).map(ln_gamma_pos)
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check("digamma", x).map(digamma_pos)
}

/// `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check("trigamma", x).map(trigamma_pos)
}

/// Curvature of the tangent quadratic bound on `φ = ln Γ(· + 1)` at `t ≥ 0`:
/// `φ''(0)` at zero, `2(φ(0) − φ(t) + φ'(t) t) / t²` elsewhere.
pub fn curvature(t: f64) -> Result<f64> {
    if t >= 0.0 && t.is_finite() {
        Ok(curvature_pos(t))
    } else {
        Err(Error::Domain {
            function: "curvature",
            value: t,
        })
    }
}

pub fn ln_gamma_pos(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut shift = 1.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv;
    for (k, b) in BERNOULLI.iter().enumerate().take(8) {
        let two_k = 2.0 * (k as f64 + 1.0);
        series += b / (two_k * (two_k - 1.0)) * power;
        power *= inv2;
    }
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series - shift.ln()
}

pub fn digamma_pos(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    let mut power = inv2;
    for (k, b) in BERNOULLI.iter().enumerate().take(8) {
        let two_k = 2.0 * (k as f64 + 1.0);
        series += b / two_k * power;
        power *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

pub fn trigamma_pos(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut power = inv2 * inv;
    for b in BERNOULLI.iter().take(8) {
        series += b * power;
        power *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

pub fn curvature_pos(t: f64) -> f64 {
    curvature_and_digamma_1p(t).0
}

/// Below this argument the curvature is integrated instead of using the
/// closed form, whose numerator cancels to `O(t²)`.
const QUADRATURE_BELOW: f64 = 0.25;

/// `(c(t), ψ(1 + t))`, sharing the digamma evaluation of the closed form.
pub(crate) fn curvature_and_digamma_1p(t: f64) -> (f64, f64) {
    debug_assert!(t >= 0.0);
    let psi = digamma_pos(1.0 + t);
    if t == 0.0 {
        return (trigamma_pos(1.0), psi);
    }
    if t < QUADRATURE_BELOW {
        // t ψ(1+t) − ln Γ(1+t) = ∫₀ᵗ s ψ'(1+s) ds
        let (nodes, weights) = gauss_legendre_unit();
        let integral: f64 = nodes
            .iter()
            .zip(weights)
            .map(|(&v, &w)| w * v * trigamma_pos(1.0 + t * v))
            .sum();
        return (2.0 * integral, psi);
    }
    (2.0 * (t * psi - ln_gamma_pos(1.0 + t)) / (t * t), psi)
}

const GL_POINTS: usize = 16;

/// Gauss–Legendre nodes and weights mapped to `[0, 1]`.
fn gauss_legendre_unit() -> &'static ([f64; GL_POINTS], [f64; GL_POINTS]) {
    static RULE: OnceLock<([f64; GL_POINTS], [f64; GL_POINTS])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = [0.0; GL_POINTS];
        let mut weights = [0.0; GL_POINTS];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=n {
                    let j = j as f64;
                    let p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = 0.5 * (1.0 - x);
            weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}
