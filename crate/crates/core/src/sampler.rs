//! Candidate points over a search interval, chosen so that at least one of
//! them lands in the main lobe of L.

use crate::error::{Error, Result};
use crate::interval::IntervalBounds;
use crate::lattice::LatticeKind;
use crate::model::ModelParams;

pub const DEFAULT_K1: f64 = 0.5;
const MAX_CANDIDATES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingRule {
    /// Geometric steps from the self-noise variance constraint.
    LowDim { k1: f64 },
    /// Lobe-edge steps, falling back to `LowDim { DEFAULT_K1 }` where no lobe exists.
    HighDim,
    /// Lobe-edge steps with an explicit fallback K1.
    Hybrid { k1: f64 },
    /// Lobe-edge steps; below the lobe-existence threshold the next point
    /// jumps straight to the threshold.
    HighDimJump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Lower,
    Upper,
    T1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub points: Vec<f64>,
    pub rule: SamplingRule,
    pub anchored_at: Anchor,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Ratio t(i+1)/t(i) of the low-dimensional rule.
pub fn lowdim_ratio(params: &ModelParams, k1: f64, direction: Direction) -> Result<f64> {
    let (sx2, sl2, a) = (params.sigma_x2, params.sigma_lam2, params.alpha);
    let den = sx2 + sl2 * (1.0 - k1);
    if !(den > 0.0) || k1 < 0.0 {
        return Err(Error::Parameter(format!("K1 = {k1} outside [0, 1 + σ_X²/σ_Λ²)")));
    }
    let rad = sl2 * ((1.0 - a).powi(2) + k1 * (2.0 * a - 1.0)) + k1 * sx2;
    if rad < 0.0 {
        return Err(Error::Parameter(format!("K1 = {k1} gives a negative radicand")));
    }
    let root = sl2.sqrt() * rad.sqrt();
    Ok(match direction {
        Direction::Up => (a * sl2 + sx2 + root) / den,
        Direction::Down => (a * sl2 + sx2 - root) / den,
    })
}

/// Farthest neighbour of `t` (above or below) whose residual variance stays
/// within K1·t'²σ_Λ² of the variance at `t`.
pub fn next_lowdim(t: f64, params: &ModelParams, k1: f64, direction: Direction) -> Result<f64> {
    Ok(t * lowdim_ratio(params, k1, direction)?)
}

/// Smallest gain for which the main lobe exists.
pub fn lobe_threshold(params: &ModelParams) -> f64 {
    let (sx2, sl2, sn2, a) = (params.sigma_x2, params.sigma_lam2, params.sigma_n2, params.alpha);
    (sx2 * sn2 / (a * sl2 * (sx2 * (2.0 - a) + a * sl2))).sqrt()
}

/// Points where the unreduced residual variance reaches t²σ_Λ², assuming the
/// true gain is `t_hyp`. None when no such point exists.
pub fn lobe_edges(t_hyp: f64, params: &ModelParams) -> Option<(f64, f64)> {
    let (sx2, sl2, sn2, a) = (params.sigma_x2, params.sigma_lam2, params.sigma_n2, params.alpha);
    let lead = t_hyp * t_hyp * a * sl2 * (sx2 * (2.0 - a) + a * sl2);
    let mut disc = lead - sn2 * sx2;
    if disc < 0.0 {
        // rounding right at the existence threshold
        if disc < -1e-12 * lead {
            return None;
        }
        disc = 0.0;
    }
    let c = t_hyp * (sx2 + a * sl2);
    let r = disc.sqrt();
    Some(((c - r) / sx2, (c + r) / sx2))
}

fn step_up(t: f64, params: &ModelParams, rule: SamplingRule) -> Result<f64> {
    match rule {
        SamplingRule::LowDim { k1 } => next_lowdim(t, params, k1, Direction::Up),
        SamplingRule::HighDim | SamplingRule::Hybrid { .. } | SamplingRule::HighDimJump => match lobe_edges(t, params) {
            Some((_, up)) => Ok(up),
            None => match rule {
                SamplingRule::Hybrid { k1 } => next_lowdim(t, params, k1, Direction::Up),
                SamplingRule::HighDimJump if lobe_threshold(params) > t => Ok(lobe_threshold(params)),
                _ => next_lowdim(t, params, DEFAULT_K1, Direction::Up),
            },
        },
    }
}

fn step_down(t: f64, params: &ModelParams, rule: SamplingRule) -> Result<f64> {
    let k1 = match rule {
        SamplingRule::LowDim { k1 } | SamplingRule::Hybrid { k1 } => k1,
        _ => DEFAULT_K1,
    };
    next_lowdim(t, params, k1, Direction::Down)
}

/// Candidate set starting at the lower bound and stepping up until the
/// upper bound is reached or passed.
pub fn build_candidates(bounds: &IntervalBounds, params: &ModelParams, rule: SamplingRule) -> Result<CandidateSet> {
    build_candidates_anchored(bounds, params, rule, Anchor::Lower, None)
}

pub fn build_candidates_anchored(
    bounds: &IntervalBounds,
    params: &ModelParams,
    rule: SamplingRule,
    anchor: Anchor,
    t1: Option<f64>,
) -> Result<CandidateSet> {
    if !(bounds.t_lower > 0.0 && bounds.t_lower <= bounds.t_upper) {
        return Err(Error::Domain(format!("invalid bounds [{}, {}]", bounds.t_lower, bounds.t_upper)));
    }
    let up = |start: f64, pts: &mut Vec<f64>| -> Result<()> {
        let mut t = start;
        while t < bounds.t_upper {
            let next = step_up(t, params, rule)?;
            if !(next > t) {
                return Err(Error::Runaway(format!("candidate step stalled at t = {t}")));
            }
            pts.push(next);
            if pts.len() > MAX_CANDIDATES {
                return Err(Error::Runaway("more than 10^6 candidates".into()));
            }
            t = next;
        }
        Ok(())
    };
    let down = |start: f64, pts: &mut Vec<f64>| -> Result<()> {
        let mut t = start;
        while t > bounds.t_lower {
            let next = step_down(t, params, rule)?;
            if !(next < t) || !(next > 0.0) {
                pts.push(bounds.t_lower);
                break;
            }
            pts.push(next);
            if pts.len() > MAX_CANDIDATES {
                return Err(Error::Runaway("more than 10^6 candidates".into()));
            }
            t = next;
        }
        Ok(())
    };
    let mut points = Vec::new();
    match anchor {
        Anchor::Lower => {
            points.push(bounds.t_lower);
            up(bounds.t_lower, &mut points)?;
        }
        Anchor::Upper => {
            points.push(bounds.t_upper);
            down(bounds.t_upper, &mut points)?;
            points.reverse();
        }
        Anchor::T1 => {
            let t1 = t1.ok_or_else(|| Error::Parameter("anchoring at t1 needs t1".into()))?;
            let mut below = Vec::new();
            down(t1, &mut below)?;
            below.reverse();
            points.extend(below);
            points.push(t1);
            up(t1, &mut points)?;
        }
    }
    Ok(CandidateSet { points, rule, anchored_at: anchor })
}

/// Number of gains in the open interval (a, b) at which some coordinate of
/// (z − t d) mod tΛ jumps, for a scalar lattice.
pub fn count_nondiff_points(interval: (f64, f64), z: &[f64], d: &[f64], lattice: &LatticeKind) -> Result<u64> {
    let delta = match lattice {
        LatticeKind::Scalar { delta } => *delta,
        _ => return Err(Error::Parameter("non-differentiable points are counted for scalar lattices only".into())),
    };
    let (a, b) = interval;
    if !(a > 0.0 && a < b) {
        return Err(Error::Domain(format!("need 0 < a < b, got ({a}, {b})")));
    }
    if z.len() != d.len() {
        return Err(Error::Shape(format!("z has {} samples, d {}", z.len(), d.len())));
    }
    let mut count = 0u64;
    for (&zj, &dj) in z.iter().zip(d) {
        if zj == 0.0 {
            continue;
        }
        // crossings are t = z/(d + Δ(k + 1/2)); z/t sweeps the open interval (lo, hi)
        let (lo, hi) = if zj > 0.0 { (zj / b, zj / a) } else { (zj / a, zj / b) };
        let kl = (lo - dj) / delta - 0.5;
        let ku = (hi - dj) / delta - 0.5;
        let first = kl.floor() as i64 + 1;
        let last = if ku == ku.floor() { ku as i64 - 1 } else { ku.floor() as i64 };
        if last >= first {
            count += (last - first + 1) as u64;
        }
    }
    Ok(count)
}
