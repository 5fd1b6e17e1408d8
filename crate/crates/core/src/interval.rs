//! Search-interval bounds around the maximum-likelihood gain.

use crate::error::{Error, Result};
use crate::init_est::VarEstimate;
use crate::model::ModelParams;
use crate::specfun::{chi2_quantile, gauss_quantile, gauss_upper_tail, Probability};
use crate::target::TargetContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundMethod {
    DetI,
    DetIIUpper,
    PartProb,
    ProbUpper,
    VarBased,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalBounds {
    pub t_lower: f64,
    pub t_upper: f64,
    pub method: BoundMethod,
    pub pe_used: Option<Probability>,
    /// Minimiser of L2; absent for the variance-based bounds, which never see z.
    pub t2: Option<f64>,
    pub collapsed: bool,
}

impl IntervalBounds {
    pub fn contains(&self, t: f64) -> bool {
        self.t_lower <= t && t <= self.t_upper
    }

    pub fn width(&self) -> f64 {
        self.t_upper - self.t_lower
    }
}

/// Positive stationary point of L2.
pub fn t2_of(ctx: &TargetContext) -> Result<f64> {
    let z2 = ctx.z2();
    if !(z2 > 0.0) {
        return Err(Error::Degenerate("t2 needs a nonzero observation".into()));
    }
    let b = (1.0 - ctx.alpha).powi(2);
    if b == 0.0 {
        return Err(Error::Degenerate("L2 has no finite minimiser at alpha = 1".into()));
    }
    let n = ctx.nf();
    let r = z2 + 4.0 * n * ctx.sigma_n2 * ctx.sigma_x2 / (b * ctx.sigma_lam2);
    let t2sq = (z2 + z2.sqrt() * r.sqrt()) / (2.0 * n * ctx.sigma_x2);
    Ok(t2sq.sqrt())
}

/// Large-n value of t2 with ‖z‖²/n replaced by its mean.
pub fn t2_asymptotic(params: &ModelParams) -> f64 {
    let b = (1.0 - params.alpha).powi(2);
    let m = params.s_var() * params.t0 * params.t0 + params.sigma_n2;
    let r = m + 4.0 * params.sigma_n2 * params.sigma_x2 / (b * params.sigma_lam2);
    ((m + m.sqrt() * r.sqrt()) / (2.0 * params.sigma_x2)).sqrt()
}

/// High-HLR simplification of [`t2_asymptotic`].
pub fn t2_asymptotic_high_hlr(params: &ModelParams) -> f64 {
    let b = (1.0 - params.alpha).powi(2);
    let t0 = params.t0;
    let r = t0 * t0 + 4.0 * params.sigma_n2 / (b * params.sigma_lam2);
    ((t0 * t0 + t0 * r.sqrt()) / 2.0).sqrt()
}

enum Side {
    Below,
    Above,
}

// Solves L2(t) = level on one side of t2, where L2 is monotone. The returned
// end of the final bracket is the one with L2 ≥ level, so the bound is never
// tighter than the exact root.
fn solve_l2_level(ctx: &TargetContext, t2: f64, level: f64, side: Side) -> Result<f64> {
    let f = |t: f64| ctx.eval_l2(t).map(|v| v - level);
    let (mut lo, mut hi) = match side {
        Side::Below => {
            let mut eps = 1e-6 * t2;
            while f(eps)? < 0.0 {
                eps *= 0.5;
                if eps < f64::MIN_POSITIVE {
                    return Err(Error::Runaway("no lower crossing of L2".into()));
                }
            }
            (eps, t2)
        }
        Side::Above => {
            let mut big = 2.0 * t2;
            while f(big)? < 0.0 {
                big *= 2.0;
                if !big.is_finite() {
                    return Err(Error::Runaway("no upper crossing of L2".into()));
                }
            }
            (t2, big)
        }
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let above = f(mid)? >= 0.0;
        match side {
            Side::Below => {
                if above {
                    lo = mid
                } else {
                    hi = mid
                }
            }
            Side::Above => {
                if above {
                    hi = mid
                } else {
                    lo = mid
                }
            }
        }
    }
    Ok(match side {
        Side::Below => lo,
        Side::Above => hi,
    })
}

fn level_bounds(ctx: &TargetContext, level: f64, method: BoundMethod, pe: Option<Probability>) -> Result<IntervalBounds> {
    let t2 = t2_of(ctx)?;
    let floor = ctx.eval_l2(t2)?;
    if level - floor <= 1e-12 * floor.abs().max(1.0) {
        return Ok(IntervalBounds { t_lower: t2, t_upper: t2, method, pe_used: pe, t2: Some(t2), collapsed: true });
    }
    let t_lower = solve_l2_level(ctx, t2, level, Side::Below)?;
    let t_upper = solve_l2_level(ctx, t2, level, Side::Above)?;
    Ok(IntervalBounds { t_lower, t_upper, method, pe_used: pe, t2: Some(t2), collapsed: false })
}

/// Largest t ≤ t2 and smallest t ≥ t2 with L2(t) ≥ L(t1).
pub fn deterministic_bounds(ctx: &TargetContext, t1: f64) -> Result<IntervalBounds> {
    let level = ctx.eval_l(t1)?;
    level_bounds(ctx, level, BoundMethod::DetI, None)
}

/// F⁻¹_{χ²_n}(pe1), or its CLT form n − √(2n)Q⁻¹(pe1).
pub fn chi2_margin(n: usize, pe1: f64, use_clt: bool) -> Result<f64> {
    if pe1 == 0.0 {
        return Ok(0.0);
    }
    if use_clt {
        let nf = n as f64;
        Ok(nf - (2.0 * nf).sqrt() * gauss_quantile(pe1)?)
    } else {
        chi2_quantile(pe1, n as u32)
    }
}

/// Both crossings of L2(t) = L(t1) − F⁻¹_{χ²_n}(pe1).
pub fn partially_prob_bounds(ctx: &TargetContext, t1: f64, pe1: f64, use_clt: bool) -> Result<IntervalBounds> {
    let pe = Probability::new(pe1)?;
    if pe1 >= 1.0 {
        return Err(Error::Domain("pe1 must be below 1".into()));
    }
    let level = ctx.eval_l(t1)? - chi2_margin(ctx.n, pe1, use_clt)?;
    level_bounds(ctx, level, BoundMethod::PartProb, Some(pe))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBound {
    pub t_upper: f64,
    /// The closed form had a negative radicand and the DetI bound was used.
    pub fallback: bool,
}

fn l4_inverse(ctx: &TargetContext, level: f64) -> Option<f64> {
    let b = (1.0 - ctx.alpha).powi(2);
    let r = ((level / ctx.nf()).exp() / (2.0 * std::f64::consts::PI) - ctx.sigma_n2) / (b * ctx.sigma_lam2);
    if r >= 0.0 {
        Some(r.sqrt())
    } else if r > -1e-12 * ctx.sigma_n2 / (b * ctx.sigma_lam2) {
        Some(0.0)
    } else {
        None
    }
}

/// Closed-form upper bound from L4(t) = L(t1).
pub fn deterministic_upper_closed(ctx: &TargetContext, t1: f64) -> Result<UpperBound> {
    let level = ctx.eval_l(t1)?;
    match l4_inverse(ctx, level) {
        Some(t_upper) => Ok(UpperBound { t_upper, fallback: false }),
        None => Ok(UpperBound { t_upper: deterministic_bounds(ctx, t1)?.t_upper, fallback: true }),
    }
}

/// Upper bound from the χ²_{2n} model of L at the true gain.
pub fn prob_upper(ctx: &TargetContext, t1: f64, pe1: f64, use_clt: bool) -> Result<f64> {
    if !(pe1 > 0.0 && pe1 < 1.0) {
        return Err(Error::Domain(format!("pe1 must lie in (0, 1), got {pe1}")));
    }
    let n = ctx.nf();
    let margin = if use_clt {
        2.0 * n - (4.0 * n).sqrt() * gauss_quantile(pe1)?
    } else {
        chi2_quantile(pe1, 2 * ctx.n as u32)?
    };
    let b = (1.0 - ctx.alpha).powi(2);
    let r = (((ctx.eval_l(t1)? - margin) / n).exp() / (2.0 * std::f64::consts::PI) - ctx.sigma_n2) / (b * ctx.sigma_lam2);
    Ok(r.max(0.0).sqrt())
}

/// Pr(T̂²_var ≥ t1² | t0²) under the Gaussian approximation.
pub fn prob_var_above(t1: f64, t0: f64, params: &ModelParams) -> f64 {
    gauss_upper_tail((t1 * t1 - t0 * t0) / var_sd(t0, params))
}

/// Pr(T̂²_var ≤ t1² | t0²) under the Gaussian approximation.
pub fn prob_var_below(t1: f64, t0: f64, params: &ModelParams) -> f64 {
    gauss_upper_tail((t0 * t0 - t1 * t1) / var_sd(t0, params))
}

fn var_sd(t0: f64, params: &ModelParams) -> f64 {
    let s = params.s_var();
    (2.0 / params.n as f64).sqrt() * (s * t0 * t0 + params.sigma_n2) / s
}

/// Smallest reachable pe1 for the lower and the upper variance-based bounds.
pub fn var_based_floors(t1_sq: f64, params: &ModelParams) -> (f64, f64) {
    let h = (params.n as f64 / 2.0).sqrt();
    (gauss_upper_tail(h * t1_sq * params.s_var() / params.sigma_n2), gauss_upper_tail(h))
}

pub fn var_based_bounds(t1: &VarEstimate, params: &ModelParams, pe1: f64) -> Result<IntervalBounds> {
    let pe = Probability::new(pe1)?;
    if !(pe1 > 0.0 && pe1 < 1.0) {
        return Err(Error::Domain(format!("pe1 must lie in (0, 1), got {pe1}")));
    }
    let t1sq = t1.t2_hat;
    let (fl, fu) = var_based_floors(t1sq, params);
    let floor = fl.max(fu);
    if pe1 < floor {
        return Err(Error::InfeasibleProbability { floor });
    }
    let xi = gauss_quantile(pe1)?;
    let n = params.n as f64;
    if n <= 2.0 * xi * xi {
        return Err(Error::DegenerateN);
    }
    let s = params.s_var();
    let sn2 = params.sigma_n2;
    let base = 2.0 * xi * xi * sn2 + n * s * t1sq;
    let spread = (2.0 * n).sqrt() * xi * (s * t1sq + sn2);
    let den = (n - 2.0 * xi * xi) * s;
    let lower2 = ((base - spread) / den).max(0.0);
    let upper2 = (base + spread) / den;
    Ok(IntervalBounds {
        t_lower: lower2.sqrt(),
        t_upper: upper2.sqrt(),
        method: BoundMethod::VarBased,
        pe_used: Some(pe),
        t2: None,
        collapsed: false,
    })
}

/// Large-n analysis of the partially probabilistic bounds and of the
/// closed-form upper bound: the functions whose sign decides whether t0 is
/// covered.
pub mod asymptotics {
    /// σ_Λ² at which TNLR = 1 for the given α, t0 and σ_N².
    pub fn sigma_lam0_sq(alpha: f64, t0: f64, sn2: f64) -> f64 {
        sn2 / (t0 * t0 * (1.0 - (1.0 - alpha).powi(2)))
    }

    /// Value at t = t0 of the far-from-t0 crossing equation; t0 is covered
    /// when it is non-negative.
    pub fn f_far(t1: f64, sl2: f64, alpha: f64, t0: f64, sn2: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        let s1 = sn2 + b * t1 * t1 * sl2;
        let s0 = sn2 + b * t0 * t0 * sl2;
        t0 * t0 / (t1 * t1) - 2.0 + t1 * t1 * sl2 / s1 + (s1 / s0).ln()
    }

    /// Same function as [`f_far`] evaluated at TNLR = 1 in its reduced form.
    pub fn f_far_at_threshold(t1: f64, alpha: f64, t0: f64) -> f64 {
        let a = alpha * (2.0 - alpha);
        let (u, v) = (t1 * t1, t0 * t0);
        v / u - 2.0 + u / (u - a * (u - v)) + (a + (1.0 - alpha).powi(2) * u / v).ln()
    }

    /// √((1−α)²t0²/(1 + (1−α)²)).
    pub fn xi1(alpha: f64, t0: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        (b * t0 * t0 / (1.0 + b)).sqrt()
    }

    /// Minimiser over σ_Λ² of [`f_far`] at fixed t1 (negative above ξ1).
    pub fn sigma_t1_sq(t1: f64, alpha: f64, t0: f64, sn2: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        let (u, v) = (t1 * t1, t0 * t0);
        sn2 * (b * v - (1.0 + b) * u) / (b * u * ((2.0 - alpha) * alpha * (v - u) + u))
    }

    /// ∂f_far/∂σ_Λ².
    pub fn df_dsigma(t1: f64, sl2: f64, alpha: f64, t0: f64, sn2: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        let (u, v) = (t1 * t1, t0 * t0);
        let num = sn2 * (-b * sn2 * v + (1.0 + b) * sn2 * u + b * sl2 * u * ((2.0 - alpha) * alpha * (v - u) + u));
        let s1 = sn2 + b * u * sl2;
        num / ((sn2 + b * v * sl2) * s1 * s1)
    }

    /// g(t1) = min over σ_Λ² ≥ 0 of f_far, valid for t1 ≤ ξ1.
    pub fn g(t1: f64, alpha: f64, t0: f64, sn2: f64) -> f64 {
        f_far(t1, sigma_t1_sq(t1, alpha, t0, sn2), alpha, t0, sn2)
    }

    /// Value at t = t0 of the near-t0 crossing equation.
    pub fn f_near(t1: f64, sl2: f64, alpha: f64, t0: f64, sn2: f64, sx2: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        let s1 = sn2 + b * t1 * t1 * sl2;
        let s0 = sn2 + b * t0 * t0 * sl2;
        (t0 - t1).powi(2) * sx2 / s1 + (s1 / s0).ln()
    }

    /// t0 − √((σ_N² + (1−α)²t0²σ_Λ²)/σ_X²), the point below which the
    /// near-t0 interval is guaranteed to cover t0.
    pub fn t1_near_edge(sl2: f64, alpha: f64, t0: f64, sn2: f64, sx2: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        t0 - ((sn2 + b * t0 * t0 * sl2) / sx2).sqrt()
    }

    /// log(t1²/t0²) + σ_X²(t0−t1)²/(σ_N² + (1−α)²t1²σ_Λ²); t1 times the
    /// exponential factor exceeds t0 exactly when this is non-negative.
    pub fn gap_inequality(t1: f64, sl2: f64, alpha: f64, t0: f64, sn2: f64, sx2: f64) -> f64 {
        let b = (1.0 - alpha).powi(2);
        (t1 * t1 / (t0 * t0)).ln() + sx2 * (t0 - t1).powi(2) / (sn2 + b * t1 * t1 * sl2)
    }

    /// (t_{1,l}, t_{1,u}) bracketing the region where [`gap_inequality`] is
    /// certified non-negative; None when the inner radicand is negative.
    pub fn gap_points(sl2: f64, alpha: f64, t0: f64, sn2: f64, sx2: f64) -> Option<(f64, f64)> {
        let b = (1.0 - alpha).powi(2);
        let sx = sx2.sqrt();
        let r = sx * t0 - 4.0 * (sn2 + b * sl2 * t0 * t0).sqrt();
        if r < 0.0 {
            return None;
        }
        let w = (t0 / sx).sqrt() * r.sqrt();
        Some((0.5 * (t0 - w), 0.5 * (t0 + w)))
    }
}
