//! Fischer–Burmeister NCP function, its smoothed variant, and gradients.
//!
//! `fb(a, b) = sqrt(a^2 + b^2) - (a + b)` vanishes exactly on the
//! complementarity set `{a >= 0, b >= 0, ab = 0}`. The smoothed variant puts
//! `2 eps^2` under the root, which makes it continuously differentiable and
//! forces `ab = eps^2` at roots with positive arguments.

use nalgebra::DVector;
use thiserror::Error;

/// The generalized-gradient element used at the kink `(a, b) = (0, 0)` when
/// `eps = 0`: the limit along the diagonal direction, `xi = eta = 1/sqrt(2)`.
pub const KINK_ELEMENT: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("vector length mismatch: {left} vs {right}")]
pub struct LengthMismatch {
    pub left: usize,
    pub right: usize,
}

/// Overflow-safe `sqrt(a^2 + b^2 + 2 eps^2)` via scaling.
fn scaled_root(a: f64, b: f64, eps: f64) -> f64 {
    let s = a.abs().max(b.abs()).max(std::f64::consts::SQRT_2 * eps.abs());
    if s == 0.0 {
        return 0.0;
    }
    let (ar, br, er) = (a / s, b / s, eps / s);
    s * (ar * ar + br * br + 2.0 * er * er).sqrt()
}

/// Fischer–Burmeister function `phi_0(a, b) = sqrt(a^2 + b^2) - (a + b)`.
///
/// Zero if and only if `a >= 0`, `b >= 0`, `a b = 0`.
pub fn fb(a: f64, b: f64) -> f64 {
    a.hypot(b) - (a + b)
}

/// Smoothed Fischer–Burmeister function
/// `phi_eps(a, b) = sqrt(a^2 + b^2 + 2 eps^2) - (a + b)`.
///
/// Continuously differentiable for `eps > 0`; reduces to [`fb`] at `eps = 0`.
pub fn fb_smoothed(a: f64, b: f64, eps: f64) -> f64 {
    scaled_root(a, b, eps) - (a + b)
}

/// Partial derivatives `(d phi/d a, d phi/d b)` of the (smoothed) FB function.
///
/// For `eps = 0` at the kink `(0, 0)` this returns the designated
/// generalized-gradient element `(1/sqrt(2) - 1, 1/sqrt(2) - 1)`.
pub fn fb_gradient(a: f64, b: f64, eps: f64) -> (f64, f64) {
    let r = scaled_root(a, b, eps);
    if r == 0.0 {
        (KINK_ELEMENT - 1.0, KINK_ELEMENT - 1.0)
    } else {
        (a / r - 1.0, b / r - 1.0)
    }
}

/// Natural residual `|| min(v, f) ||_inf`, the componentwise-minimum measure of
/// NCP violation used as the stopping criterion of the leader solver.
pub fn natural_residual(v: &DVector<f64>, f: &DVector<f64>) -> Result<f64, LengthMismatch> {
    if v.len() != f.len() {
        return Err(LengthMismatch {
            left: v.len(),
            right: f.len(),
        });
    }
    Ok(v
        .iter()
        .zip(f.iter())
        .map(|(&vi, &fi)| vi.min(fi).abs())
        .fold(0.0, f64::max))
}
