//! Closed-form theory: Fisher information, bias of the ML estimate, the
//! total MSE lower bound with its optimal α, and pilot-signal bounds.
//!
//! α-dependence is always taken at fixed embedding power σ_W² = α²σ_Λ².

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Margin kept below the α for which TNLR reaches one.
pub const ALPHA_EPS: f64 = 1e-9;

/// Same parameters with α replaced, keeping σ_W² fixed.
pub fn with_alpha(p: &ModelParams, alpha: f64) -> Result<ModelParams> {
    let sw2 = p.sigma_w2();
    ModelParams::new(p.n, p.sigma_x2, p.sigma_n2, sw2 / (alpha * alpha), alpha, p.t0)
}

/// The three terms of the exact Fisher information (before the large-HLR
/// approximation): curvature of the residual term, of the log term, and of
/// the host term.
pub fn fisher_exact_terms(p: &ModelParams) -> (f64, f64, f64) {
    let n = p.n as f64;
    let (sx2, sn2, sl2, a, t0) = (p.sigma_x2, p.sigma_n2, p.sigma_lam2, p.alpha, p.t0);
    let b = (1.0 - a).powi(2);
    let t02 = t0 * t0;
    let s0 = sn2 + b * t02 * sl2;
    let sn4 = sn2 * sn2;
    let sl4 = sl2 * sl2;
    let num = sn4 * (sx2 + a * a * sl2) + b * b * sl4 * t02 * (t02 * sx2 + t02 * (3.0 * a - 2.0) * a.powi(3) * sl2 + 3.0 * sn2)
        - b * sl2
            * sn2
            * (3.0 * t02 * (sx2 + a * a * sl2) + sn2 - 6.0 * t02 * (sx2 + a.powi(3) * sl2) + t02 * (sx2 + a.powi(4) * sl2));
    let first = n * num / s0.powi(3);
    let second = n * (b * sl2 * sn2 - b * b * sl4 * t02) / (s0 * s0);
    let third = 3.0 * n * ((sx2 + a * a * sl2) * t02 + sn2) / (sx2 * t02 * t02);
    (first, second, third)
}

/// Expected curvature of −ln f at t0, modulo reduction neglected.
pub fn fisher_exact(p: &ModelParams) -> f64 {
    let (a, b, c) = fisher_exact_terms(p);
    a + b + c
}

/// nσ_X² / (σ_N² + ((1−α)²/α²)σ_W²t0²).
pub fn fisher_asymptotic(p: &ModelParams) -> f64 {
    let a = p.alpha;
    p.n as f64 * p.sigma_x2 / (p.sigma_n2 + (1.0 - a).powi(2) / (a * a) * p.sigma_w2() * p.t0 * p.t0)
}

/// The same quantity reached through the Erez-style embedding.
pub fn fisher_erez(p: &ModelParams) -> f64 {
    let a = p.alpha;
    p.n as f64 * a * a * p.sigma_x2 / (a * a * p.sigma_n2 + (1.0 - a).powi(2) * p.sigma_w2() * p.t0 * p.t0)
}

fn alpha_tnlr_bound(p: &ModelParams) -> f64 {
    let w = p.sigma_w2() * p.t0 * p.t0;
    2.0 * w / (p.sigma_n2 + w) - ALPHA_EPS
}

/// Supremum of α keeping TNLR below one, capped at 1.
pub fn alpha_sup_fi(p: &ModelParams) -> f64 {
    alpha_tnlr_bound(p).min(1.0)
}

/// Stationary point of the total MSE bound in α.
pub fn alpha_opt_unclamped(p: &ModelParams) -> f64 {
    let n = p.n as f64;
    let t02 = p.t0 * p.t0;
    let top = n * p.sigma_w2() * t02 + p.sigma_x2 * t02;
    top / (n * p.sigma_n2 + top)
}

pub fn alpha_opt(p: &ModelParams) -> f64 {
    alpha_opt_unclamped(p).min(alpha_tnlr_bound(p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasTaylor {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub t_min: f64,
}

/// Large-n approximation of L(t, z)/n inside the main lobe, good-lattice model.
pub fn surrogate_l_per_n(t: f64, p: &ModelParams) -> f64 {
    let (sx2, sn2, sl2, a, t0) = (p.sigma_x2, p.sigma_n2, p.sigma_lam2, p.alpha, p.t0);
    let s = sn2 + (1.0 - a).powi(2) * sl2 * t * t;
    let e = (t0 - t).powi(2) * sx2 + (t - a * t0).powi(2) * sl2 + sn2;
    let m = (sx2 + a * a * sl2) * t0 * t0 + sn2;
    e / s + (2.0 * std::f64::consts::PI * s).ln() + m / (sx2 * t * t)
}

/// Second-order expansion of the surrogate around t0 and its minimiser.
pub fn bias_taylor(p: &ModelParams) -> Result<BiasTaylor> {
    if !(p.t0 > ALPHA_EPS) {
        return Err(Error::Domain("t0 too close to zero for the expansion; use bias_t0_zero".into()));
    }
    let (sx2, sn2, sl2, a, t0) = (p.sigma_x2, p.sigma_n2, p.sigma_lam2, p.alpha, p.t0);
    let t02 = t0 * t0;
    let s0 = sn2 + (1.0 - a).powi(2) * sl2 * t02;
    let m = (sx2 + a * a * sl2) * t02 + sn2;
    let b0 = 2.0 + (sn2 + a * a * sl2 * t02) / (sx2 * t02) + (2.0 * std::f64::consts::PI * s0).ln();
    let b1 = 2.0 * (1.0 - a) * sl2 * t0 / s0 - 2.0 * m / (sx2 * t02 * t0);
    let b2 = (4.0 * (1.0 - a * a) * sl2 * sn2 + 2.0 * ((2.0 * a * a - 1.0) * sl2 + sx2) * s0) / (s0 * s0)
        + 6.0 * m / (sx2 * t02 * t02);
    Ok(BiasTaylor { b0, b1, b2, t_min: t0 - b1 / b2 })
}

/// (1/σ_X²)[σ_N²/t0 − (1−α)σ_W²t0/α].
pub fn bias_asymptotic(p: &ModelParams) -> f64 {
    (p.sigma_n2 / p.t0 - (1.0 - p.alpha) * p.sigma_w2() * p.t0 / p.alpha) / p.sigma_x2
}

/// Bias as t0 → 0.
pub fn bias_t0_zero(p: &ModelParams) -> f64 {
    (p.sigma_n2 / p.sigma_x2).sqrt()
}

/// ∂b/∂t0 of the asymptotic bias; neglected in the MSE bound.
pub fn bias_derivative(p: &ModelParams) -> f64 {
    let t02 = p.t0 * p.t0;
    -((1.0 - p.alpha) * p.alpha * p.sigma_lam2 * t02 + p.sigma_n2) / (p.sigma_x2 * t02)
}

/// 1/I(t0) + b(t0)².
pub fn mse_lower_bound(p: &ModelParams) -> f64 {
    1.0 / fisher_asymptotic(p) + bias_asymptotic(p).powi(2)
}

/// ∂(mse_lower_bound)/∂α at fixed σ_W².
pub fn mse_bound_alpha_derivative(p: &ModelParams) -> f64 {
    let n = p.n as f64;
    let (a, sw2, t02) = (p.alpha, p.sigma_w2(), p.t0 * p.t0);
    2.0 * sw2 * (n * a * p.sigma_n2 - (1.0 - a) * (n * sw2 + p.sigma_x2) * t02) / (n * a.powi(3) * p.sigma_x2 * p.sigma_x2)
}

/// Pilot-signal CRBs: σ_N²/(n(σ_X+σ_W)²) and σ_N²/(n(σ_X²+σ_W²)).
pub fn fundamental_bounds(p: &ModelParams) -> (f64, f64) {
    let n = p.n as f64;
    let (sx, sw) = (p.sigma_x2.sqrt(), p.sigma_w2().sqrt());
    (p.sigma_n2 / (n * (sx + sw).powi(2)), p.sigma_n2 / (n * (p.sigma_x2 + p.sigma_w2())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryReport {
    pub fisher_exact: f64,
    pub fisher_asymptotic: f64,
    pub bias: f64,
    pub bias_taylor: BiasTaylor,
    pub mse_lower: f64,
    pub alpha_opt: f64,
    pub alpha_no_bias: f64,
    pub alpha_sup_fi: f64,
    pub bound1: f64,
    pub bound2: f64,
}

pub fn theory_report(p: &ModelParams) -> Result<TheoryReport> {
    let (bound1, bound2) = fundamental_bounds(p);
    Ok(TheoryReport {
        fisher_exact: fisher_exact(p),
        fisher_asymptotic: fisher_asymptotic(p),
        bias: bias_asymptotic(p),
        bias_taylor: bias_taylor(p)?,
        mse_lower: mse_lower_bound(p),
        alpha_opt: alpha_opt(p),
        alpha_no_bias: p.alpha_no_bias(),
        alpha_sup_fi: alpha_sup_fi(p),
        bound1,
        bound2,
    })
}
