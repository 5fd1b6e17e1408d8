//! Initial estimates t1: the minimiser of the single-minimum surrogate L1
//! and the variance-based estimators with their approximate distributions.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::specfun::{erf, gamma, gauss_upper_tail, kummer_1f1};
use crate::target::TargetContext;

/// Coefficients (a0, a1, a2, a3) of the stationarity cubic of L1 in u = t².
pub fn l1_cubic(ctx: &TargetContext) -> [f64; 4] {
    let n = ctx.nf();
    let z2 = ctx.z2();
    let (sn2, sl2, sx2) = (ctx.sigma_n2, ctx.sigma_lam2, ctx.sigma_x2);
    let b = (1.0 - ctx.alpha).powi(2);
    [
        -z2 * sn2 * sn2,
        -2.0 * b * sl2 * sn2 * z2,
        sl2 * (n * (1.0 + b) * sn2 * sx2 - b * b * sl2 * z2),
        n * b * b * sl2 * sl2 * sx2,
    ]
}

/// (σ_N²t0²/((1+(1−α)²)σ_Λ²))^{1/4}, the large-n limit of the L1 minimiser.
pub fn l1_asymptotic(params: &ModelParams) -> f64 {
    let b = (1.0 - params.alpha).powi(2);
    (params.sigma_n2 * params.t0 * params.t0 / ((1.0 + b) * params.sigma_lam2)).powf(0.25)
}

fn poly(c: &[f64; 4], u: f64) -> f64 {
    ((c[3] * u + c[2]) * u + c[1]) * u + c[0]
}

fn dpoly(c: &[f64; 4], u: f64) -> f64 {
    (3.0 * c[3] * u + 2.0 * c[2]) * u + c[1]
}

/// Unique positive stationary point of L1.
pub fn t1_from_l1(ctx: &TargetContext) -> Result<f64> {
    let z2 = ctx.z2();
    if !(z2 > 0.0) {
        return Err(Error::Degenerate("t1_from_l1 needs a nonzero observation".into()));
    }
    let c = l1_cubic(ctx);
    // seed at the large-n root with ‖z‖²/n standing in for its mean
    let b = (1.0 - ctx.alpha).powi(2);
    let s = ctx.sigma_x2 + ctx.alpha * ctx.alpha * ctx.sigma_lam2;
    let t0_sq_guess = ((z2 / ctx.nf() - ctx.sigma_n2) / s).max(1e-12);
    let seed = (ctx.sigma_n2 * t0_sq_guess / ((1.0 + b) * ctx.sigma_lam2)).sqrt();
    let mut u = seed;
    for _ in 0..100 {
        let f = poly(&c, u);
        let df = dpoly(&c, u);
        if !(df > 0.0) {
            break;
        }
        let next = u - f / df;
        if !(next > 0.0) || !next.is_finite() {
            break;
        }
        if (next - u).abs() <= 1e-15 * next {
            return Ok(next.sqrt());
        }
        u = next;
    }
    // bisection: p(0) = a0 < 0 and p grows without bound
    let t2 = crate::interval::t2_of(ctx).unwrap_or_else(|_| var_estimate(ctx).t_hat);
    let mut hi = 10.0 * (t2 * t2).max(1.0);
    while poly(&c, hi) <= 0.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Runaway("no sign change of the L1 cubic".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if poly(&c, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarEstimate {
    pub t2_hat: f64,
    pub t_hat: f64,
    pub clamped: bool,
}

/// [(‖z‖²/n − σ_N²)/(σ_X² + α²σ_Λ²)]⁺ and its square root.
pub fn var_estimate(ctx: &TargetContext) -> VarEstimate {
    let raw = ctx.z2() / ctx.nf() - ctx.sigma_n2;
    let s = ctx.sigma_x2 + ctx.alpha * ctx.alpha * ctx.sigma_lam2;
    let t2_hat = (raw / s).max(0.0);
    VarEstimate { t2_hat, t_hat: t2_hat.sqrt(), clamped: raw < 0.0 }
}

/// Variance of the untruncated estimator of t0².
pub fn var_estimator_crb(params: &ModelParams) -> f64 {
    let s = params.s_var();
    let m = s * params.t0 * params.t0 + params.sigma_n2;
    2.0 * m * m / (params.n as f64 * s * s)
}

/// Mean of T = √X (T = j√(−X) for X < 0) with X ∼ N(μ, σ²), returned as
/// (re, im), together with E|T|² = E|X|.
pub fn sqrt_gaussian_moments(mu: f64, sigma2: f64) -> Result<((f64, f64), f64)> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")));
    }
    let sigma = sigma2.sqrt();
    let x = mu * mu / (2.0 * sigma2);
    let abs2 = (-x).exp() * (2.0 * sigma2 / std::f64::consts::PI).sqrt() + mu * erf(mu / (2.0 * sigma2).sqrt());
    if x > 700.0 {
        let m = if mu > 0.0 { (mu.sqrt(), 0.0) } else { (0.0, (-mu).sqrt()) };
        return Ok((m, abs2));
    }
    let pref = (-x).exp() / (2f64.powf(0.75) * std::f64::consts::PI.sqrt() * sigma.sqrt());
    let a = sigma * gamma(0.75) * kummer_1f1(0.75, 0.5, x)?;
    let b = 2f64.sqrt() * mu * gamma(1.25) * kummer_1f1(1.25, 1.5, x)?;
    // (1 + j)(a − j b)
    Ok(((pref * (a + b), pref * (a - b)), abs2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarScale {
    /// The estimator of t0².
    T2,
    /// The estimator of t0.
    T,
}

/// Approximate density of the truncated variance-based estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarPdf {
    /// Continuous density at the requested positive argument (0 otherwise).
    pub density: f64,
    /// Probability mass at zero.
    pub atom: f64,
}

pub fn var_estimate_pdf(value: f64, t0: f64, params: &ModelParams, which: VarScale) -> VarPdf {
    let s = params.s_var();
    let m = s * t0 * t0 + params.sigma_n2;
    let n = params.n as f64;
    let (mean, var) = match which {
        VarScale::T2 => (t0 * t0, 2.0 * m * m / (n * s * s)),
        VarScale::T => (t0, m * m / (2.0 * n * s * s * t0 * t0)),
    };
    let sd = var.sqrt();
    let density = if value > 0.0 {
        (-(value - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    } else {
        0.0
    };
    VarPdf { density, atom: gauss_upper_tail(mean / sd) }
}
