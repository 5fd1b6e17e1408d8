//! Refinement of candidate points into a final gain estimate: the
//! derivative-based and decision-aided (DA) refiners, the progressively
//! widened DA search, and an on-line DA tracker.

use crate::error::{Error, Result};
use crate::init_est::{t1_from_l1, var_estimate};
use crate::interval::{deterministic_bounds, partially_prob_bounds, var_based_bounds, IntervalBounds};
use crate::lattice::{LatticeKind, Regime};
use crate::model::ModelParams;
use crate::sampler::{build_candidates_anchored, lowdim_ratio, Anchor, Direction, SamplingRule, DEFAULT_K1};
use crate::specfun::gauss_quantile;
use crate::target::{lobe_stats, FarMoments, LobeRegime, TargetContext};

pub const EPS1: f64 = 1e-5;
pub const EPS2: f64 = 1e-5;
pub const DEFAULT_PE: f64 = 1e-3;
pub const DEFAULT_PE_RELOCK: f64 = 1e-6;

const MAX_PROBES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum T1Method {
    L1,
    /// Variance-based estimate; the L1 root stands in when it clamps to zero.
    Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundsConfig {
    DetI,
    PartProb { pe1: f64 },
    VarBased { pe1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refiner {
    Derivative { eps1: f64, eps2: f64 },
    Da,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub t1: T1Method,
    pub bounds: BoundsConfig,
    pub rule: SamplingRule,
    pub anchor: Anchor,
    pub refiner: Refiner,
    /// Levels of the at-t0 and far tests reported for the final estimate.
    pub pe2: f64,
    pub pe3: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            t1: T1Method::Var,
            bounds: BoundsConfig::PartProb { pe1: DEFAULT_PE },
            rule: SamplingRule::LowDim { k1: DEFAULT_K1 },
            anchor: Anchor::Lower,
            refiner: Refiner::Da,
            pe2: DEFAULT_PE,
            pe3: DEFAULT_PE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateResult {
    pub t_start: f64,
    pub t_refined: f64,
    /// +∞ for rejected candidates.
    pub l_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TestFlags {
    pub at_t0: bool,
    pub far: bool,
}

impl TestFlags {
    pub fn both(&self) -> bool {
        self.at_t0 && self.far
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub t_hat: f64,
    pub t1_used: f64,
    pub bounds: IntervalBounds,
    pub candidates_evaluated: usize,
    pub per_candidate: Vec<CandidateResult>,
    pub tests_passed: TestFlags,
    pub fell_back_to_t1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauThresholds {
    pub tau_eq: f64,
    pub tau_neq: f64,
    pub pe2: f64,
    pub pe3: f64,
}

/// Initial estimate t1.
pub fn initial_t1(ctx: &TargetContext, method: T1Method) -> Result<f64> {
    match method {
        T1Method::L1 => t1_from_l1(ctx),
        T1Method::Var => {
            let v = var_estimate(ctx);
            if v.t_hat > 0.0 {
                Ok(v.t_hat)
            } else {
                t1_from_l1(ctx)
            }
        }
    }
}

pub fn search_bounds(ctx: &TargetContext, t1: f64, cfg: BoundsConfig) -> Result<IntervalBounds> {
    match cfg {
        BoundsConfig::DetI => deterministic_bounds(ctx, t1),
        BoundsConfig::PartProb { pe1 } => partially_prob_bounds(ctx, t1, pe1, false),
        BoundsConfig::VarBased { pe1 } => var_based_bounds(&var_estimate(ctx), &ctx.model_params(t1)?, pe1),
    }
}

/// Bounds usable for sampling: a zero lower end is raised to 10⁻³ of the upper end.
pub fn sampling_bounds(b: &IntervalBounds) -> IntervalBounds {
    let mut s = b.clone();
    s.t_lower = s.t_lower.max(1e-3 * s.t_upper);
    s
}

/// One DA step: decode the centroid assuming gain `t_start`, then rescale.
pub fn refine_da(t_start: f64, ctx: &TargetContext) -> Result<(f64, f64)> {
    if !(t_start > 0.0) {
        return Err(Error::Domain(format!("DA needs t > 0, got {t_start}")));
    }
    let v: Vec<f64> = ctx.z.iter().zip(&ctx.d).map(|(z, d)| z / t_start - d).collect();
    let q = ctx.lattice.quantize(&v)?;
    let dot: f64 = ctx.z.iter().zip(q.iter().zip(&ctx.d)).map(|(z, (q, d))| z * (q + d)).sum();
    if !(dot > 0.0) {
        return Ok((t_start, f64::INFINITY));
    }
    let t = ctx.z2() / dot;
    Ok((t, ctx.eval_l(t)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeRefinement {
    pub t_star: f64,
    pub l_star: f64,
    /// Final bisection bracket.
    pub bracket: (f64, f64),
}

/// Sign-change search on forward differences of `f`: doubling steps from
/// 10⁻³, then bisection down to width `eps2`.
pub fn refine_derivative_on<F: Fn(f64) -> Result<f64>>(f: F, t_start: f64, eps1: f64, eps2: f64) -> Result<DerivativeRefinement> {
    if !(t_start > 0.0 && eps1 > 0.0 && eps2 > 0.0) {
        return Err(Error::Domain("derivative refiner needs t, eps1, eps2 > 0".into()));
    }
    let sign = |t: f64| -> Result<f64> { Ok(if f(t + eps1)? - f(t)? > 0.0 { 1.0 } else { -1.0 }) };
    let s0 = sign(t_start)?;
    let mut step = 1e-3;
    let mut t_aux;
    loop {
        step *= 2.0;
        if step > 1e3 * t_start {
            return Err(Error::Runaway(format!("no slope sign change within 10^3 t from t = {t_start}")));
        }
        t_aux = (t_start - s0 * step).abs();
        if t_aux > 0.0 && sign(t_aux)? != s0 {
            break;
        }
    }
    let (mut tl, mut tu) = (t_start.min(t_aux), t_start.max(t_aux));
    t_aux = 0.5 * (tl + tu);
    while tu - tl > eps2 {
        t_aux = 0.5 * (tl + tu);
        if sign(t_aux)? > 0.0 {
            tu = t_aux;
        } else {
            tl = t_aux;
        }
    }
    Ok(DerivativeRefinement { t_star: t_aux, l_star: f(t_aux)?, bracket: (tl, tu) })
}

pub fn refine_derivative_bracketed(t_start: f64, ctx: &TargetContext, eps1: f64, eps2: f64) -> Result<DerivativeRefinement> {
    refine_derivative_on(|t| ctx.eval_l(t), t_start, eps1, eps2)
}

pub fn refine_derivative(t_start: f64, ctx: &TargetContext, eps1: f64, eps2: f64) -> Result<(f64, f64)> {
    let r = refine_derivative_bracketed(t_start, ctx, eps1, eps2)?;
    Ok((r.t_star, r.l_star))
}

fn refine(t: f64, ctx: &TargetContext, refiner: Refiner) -> Result<CandidateResult> {
    let r = match refiner {
        Refiner::Da => refine_da(t, ctx),
        Refiner::Derivative { eps1, eps2 } => refine_derivative(t, ctx, eps1, eps2),
    };
    match r {
        Ok((t_refined, l_value)) => Ok(CandidateResult { t_start: t, t_refined, l_value }),
        Err(Error::Runaway(_)) => Ok(CandidateResult { t_start: t, t_refined: t, l_value: f64::INFINITY }),
        Err(e) => Err(e),
    }
}

/// Thresholds of the at-t0 test (L above `tau_eq` rejects) and the far
/// test (L above `tau_neq` looks like a point away from t0).
///
/// `params.n` must match the observation length; `z2` is the observed ‖z‖².
pub fn tau_thresholds(t: f64, params: &ModelParams, z2: f64, pe2: f64, pe3: f64, regime: Regime) -> Result<TauThresholds> {
    let at = lobe_stats(t, params, LobeRegime::at_t0(regime), FarMoments::WithT0);
    let far = lobe_stats(t, params, LobeRegime::far(regime), FarMoments::Observed { z2 });
    Ok(TauThresholds {
        tau_eq: at.mean + at.variance.sqrt() * gauss_quantile(pe2)?,
        tau_neq: far.mean + far.variance.sqrt() * gauss_quantile(1.0 - pe3)?,
        pe2,
        pe3,
    })
}

fn run_tests(ctx: &TargetContext, t: f64, l: f64, pe_a: f64, pe_b: f64) -> Result<TestFlags> {
    if !l.is_finite() {
        return Ok(TestFlags::default());
    }
    let tau = tau_thresholds(t, &ctx.model_params(t)?, ctx.z2(), pe_a, pe_b, ctx.lattice.regime())?;
    Ok(TestFlags { at_t0: l < tau.tau_eq, far: l < tau.tau_neq })
}

fn best_of(results: &[CandidateResult]) -> Option<CandidateResult> {
    results
        .iter()
        .filter(|r| r.l_value.is_finite())
        .min_by(|a, b| a.l_value.total_cmp(&b.l_value))
        .copied()
}

fn finish(
    ctx: &TargetContext,
    t1: f64,
    bounds: IntervalBounds,
    per_candidate: Vec<CandidateResult>,
    pe2: f64,
    pe3: f64,
) -> Result<EstimateReport> {
    let l1 = ctx.eval_l(t1)?;
    let (t_hat, l_hat, fell_back_to_t1) = match best_of(&per_candidate) {
        Some(b) if b.l_value < l1 => (b.t_refined, b.l_value, false),
        _ => (t1, l1, true),
    };
    Ok(EstimateReport {
        t_hat,
        t1_used: t1,
        bounds,
        candidates_evaluated: per_candidate.len(),
        per_candidate,
        tests_passed: run_tests(ctx, t_hat, l_hat, pe2, pe3)?,
        fell_back_to_t1,
    })
}

/// Full pipeline: t1, search interval, candidate set, refinement of every
/// candidate, argmin, and fallback to t1 when nothing beats it.
pub fn estimate(ctx: &TargetContext, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let t1 = initial_t1(ctx, cfg.t1)?;
    let bounds = search_bounds(ctx, t1, cfg.bounds)?;
    estimate_within(ctx, cfg, t1, bounds)
}

/// As [`estimate`] with t1 and the search interval supplied.
pub fn estimate_within(ctx: &TargetContext, cfg: &EstimatorConfig, t1: f64, bounds: IntervalBounds) -> Result<EstimateReport> {
    let params = ctx.model_params(t1)?;
    let cands = build_candidates_anchored(&sampling_bounds(&bounds), &params, cfg.rule, cfg.anchor, Some(t1))?;
    let per_candidate = cands.points.iter().map(|&t| refine(t, ctx, cfg.refiner)).collect::<Result<Vec<_>>>()?;
    finish(ctx, t1, bounds, per_candidate, cfg.pe2, cfg.pe3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwdaConfig {
    pub t1: T1Method,
    pub bounds: BoundsConfig,
    pub pe2: f64,
    pub pe3: f64,
    pub k1: f64,
}

impl Default for PwdaConfig {
    fn default() -> Self {
        PwdaConfig { t1: T1Method::Var, bounds: BoundsConfig::PartProb { pe1: DEFAULT_PE }, pe2: DEFAULT_PE, pe3: DEFAULT_PE, k1: DEFAULT_K1 }
    }
}

/// Progressively widened DA: alternate DA probes above and below t1 with
/// the low-dimensional step rule, stopping as soon as the best probe passes
/// both tests.
///
/// The down-probe is skipped whenever the probe counter reads 2 at that
/// point, which in the first round avoids probing t1 twice.
pub fn estimate_pwda(ctx: &TargetContext, cfg: &PwdaConfig) -> Result<EstimateReport> {
    let t1 = initial_t1(ctx, cfg.t1)?;
    let bounds = search_bounds(ctx, t1, cfg.bounds)?;
    let sb = sampling_bounds(&bounds);
    let params = ctx.model_params(t1)?;
    let r_up = lowdim_ratio(&params, cfg.k1, Direction::Up)?;
    let r_down = lowdim_ratio(&params, cfg.k1, Direction::Down)?;
    let (mut tu, mut tl) = (t1, t1);
    let mut i = 1usize;
    let mut results = Vec::new();
    let mut found = false;
    while (tu <= sb.t_upper || tl >= sb.t_lower) && !found {
        if tu <= sb.t_upper {
            results.push(refine(tu, ctx, Refiner::Da)?);
            i += 1;
            tu *= r_up;
        }
        if tl >= sb.t_lower {
            if i != 2 {
                results.push(refine(tl, ctx, Refiner::Da)?);
                i += 1;
            }
            tl *= r_down;
        }
        if let Some(b) = best_of(&results) {
            found = run_tests(ctx, b.t_refined, b.l_value, cfg.pe2, cfg.pe3)?.both();
        }
        if results.len() > MAX_PROBES {
            return Err(Error::Runaway("more than 10^6 DA probes".into()));
        }
    }
    finish(ctx, t1, bounds, results, cfg.pe2, cfg.pe3)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineConfig {
    pub t1: T1Method,
    pub pe1: f64,
    pub pe2: f64,
    pub pe3: f64,
    pub pe4: f64,
    pub pe5: f64,
    pub rule: SamplingRule,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            t1: T1Method::Var,
            pe1: DEFAULT_PE,
            pe2: DEFAULT_PE,
            pe3: DEFAULT_PE,
            pe4: DEFAULT_PE_RELOCK,
            pe5: DEFAULT_PE_RELOCK,
            rule: SamplingRule::LowDim { k1: DEFAULT_K1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineStep {
    pub j: usize,
    pub t_estimate: f64,
    /// Starting point of this step: the t1 method while unlocked, the locked
    /// estimate otherwise.
    pub t1_used: f64,
    pub locked: bool,
}

/// Sample-by-sample DA tracker. While locked, each new sample costs one DA
/// step; a failed test triggers a full interval and candidate search on the
/// prefix seen so far.
#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    template: ModelParams,
    lattice: LatticeKind,
    cfg: OnlineConfig,
    z: Vec<f64>,
    d: Vec<f64>,
    locked: bool,
    t_online: f64,
    last: Option<OnlineStep>,
}

impl OnlineEstimator {
    /// `template` supplies the variances and α; its `n` and `t0` are ignored.
    pub fn new(template: ModelParams, lattice: LatticeKind, cfg: OnlineConfig) -> Self {
        OnlineEstimator { template, lattice, cfg, z: Vec::new(), d: Vec::new(), locked: false, t_online: f64::NAN, last: None }
    }

    pub fn locked(&self) -> bool {
        self.locked
    }

    pub fn push(&mut self, z: f64, d: f64) -> Result<OnlineStep> {
        self.z.push(z);
        self.d.push(d);
        let j = self.z.len();
        if self.lattice.check_dim(j).is_err() {
            // prefix not a whole number of lattice blocks yet
            let prev = self.last.unwrap_or(OnlineStep { j, t_estimate: f64::NAN, t1_used: f64::NAN, locked: false });
            let step = OnlineStep { j, ..prev };
            self.last = Some(step);
            return Ok(step);
        }
        let ctx = TargetContext::new(self.z.clone(), self.d.clone(), &self.template.with_n(j), self.lattice.clone())?;
        let c = self.cfg;
        let t1_used = if self.locked { self.t_online } else { initial_t1(&ctx, c.t1)? };
        let mut t1 = t1_used;
        let (t3, l3) = refine_da(t1, &ctx)?;
        if run_tests(&ctx, t3, l3, c.pe2, c.pe3)?.both() {
            self.locked = true;
            self.t_online = t3;
        } else {
            if let Ok(bounds) = partially_prob_bounds(&ctx, t3, c.pe1, false) {
                let params = ctx.model_params(t3)?;
                let cands = build_candidates_anchored(&sampling_bounds(&bounds), &params, c.rule, Anchor::Lower, None)?;
                let res = cands.points.iter().map(|&t| refine(t, &ctx, Refiner::Da)).collect::<Result<Vec<_>>>()?;
                if let Some(b) = best_of(&res) {
                    if b.l_value < ctx.eval_l(t1)? {
                        t1 = b.t_refined;
                    }
                }
            }
            let l1 = ctx.eval_l(t1)?;
            if run_tests(&ctx, t1, l1, c.pe4, c.pe5)?.both() {
                self.locked = true;
                self.t_online = t1;
            } else {
                self.locked = false;
            }
        }
        // t_online keeps the last locked value; before the first lock the
        // t1 method stands in for it
        let t_estimate = if self.t_online.is_nan() { t1_used } else { self.t_online };
        let step = OnlineStep { j, t_estimate, t1_used, locked: self.locked };
        self.last = Some(step);
        Ok(step)
    }
}

/// Runs the tracker over the samples of `ctx` in order.
pub fn estimate_online(ctx: &TargetContext, cfg: &OnlineConfig) -> Result<Vec<OnlineStep>> {
    let template = ctx.model_params(1.0)?;
    let mut est = OnlineEstimator::new(template, ctx.lattice.clone(), *cfg);
    ctx.z.iter().zip(&ctx.d).map(|(&z, &d)| est.push(z, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::fisher_asymptotic;
    use crate::model::{derive_params, make_trial};
    use crate::target::tests::{base_case, ctx_for};
    use proptest::prelude::*;
    use rayon::prelude::*;

    fn no_wrap(n: usize) -> (ModelParams, LatticeKind) {
        derive_params(40.0, 20.0, 0.95, 0.8, n, &LatticeKind::scalar(1.0).unwrap()).unwrap()
    }

    fn grid_argmin(ctx: &TargetContext, lo: f64, hi: f64, step: f64) -> f64 {
        let k = ((hi - lo) / step).round() as usize;
        (0..=k)
            .map(|i| lo + i as f64 * step)
            .map(|t| (t, ctx.eval_l(t).unwrap()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn derivative_refiner_finds_grid_minimum() {
        let (p, l) = base_case(1000);
        let sd = fisher_asymptotic(&p).powf(-0.5);
        let hits = (0..100u64)
            .into_par_iter()
            .filter(|&s| {
                let c = ctx_for(&p, &l, 500 + s);
                let (t_da, _) = refine_da(p.t0, &c).unwrap();
                let (t_star, _) = refine_derivative(t_da + 0.5 * sd, &c, EPS1, EPS2).unwrap();
                let g = grid_argmin(&c, t_da - 10.0 * sd, t_da + 10.0 * sd, 1e-6);
                (t_star - g).abs() < 2.0 * EPS2
            })
            .count();
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn derivative_refiner_on_l1_surrogate() {
        let (p, l) = base_case(1000);
        for s in 0..10 {
            let c = ctx_for(&p, &l, 700 + s);
            let root = t1_from_l1(&c).unwrap();
            let r = refine_derivative_on(|t| c.eval_l1(t), 1.3 * root, 1e-9, EPS2).unwrap();
            assert!((r.t_star - root).abs() < EPS2, "{} vs {root}", r.t_star);
        }
    }

    #[test]
    fn halving_eps2_halves_the_bracket() {
        let (p, l) = base_case(1000);
        let c = ctx_for(&p, &l, 3);
        let w = |e: f64| {
            let r = refine_derivative_bracketed(p.t0 * 1.01, &c, EPS1, e).unwrap();
            r.bracket.1 - r.bracket.0
        };
        let (a, b) = (w(1e-5), w(5e-6));
        assert!(a <= 1e-5 && (b / a - 0.5).abs() < 1e-9, "{a} {b}");
    }

    #[test]
    fn derivative_refiner_runaway() {
        let (p, l) = base_case(10);
        let c = ctx_for(&p, &l, 3);
        // strictly decreasing objective
        let r = refine_derivative_on(|t| Ok(-t), 1.0, EPS1, EPS2);
        assert!(matches!(r, Err(Error::Runaway(_))));
        assert!(refine_derivative(-1.0, &c, EPS1, EPS2).is_err());
    }

    #[test]
    fn da_locks_on_noiseless_input() {
        let (p, l) = base_case(64);
        let t = make_trial(&p, &l, 11).unwrap();
        let cent: Vec<f64> = {
            let v: Vec<f64> = t.x.iter().zip(&t.d).map(|(x, d)| x - d).collect();
            l.quantize(&v).unwrap().iter().zip(&t.d).map(|(q, d)| q + d).collect()
        };
        let z: Vec<f64> = cent.iter().map(|c| p.t0 * c).collect();
        let c = TargetContext::new(z, t.d.clone(), &p, l.clone()).unwrap();
        let (tr, lv) = refine_da(p.t0 * 1.0001, &c).unwrap();
        assert!((tr / p.t0 - 1.0).abs() < 1e-14 && lv.is_finite());
    }

    #[test]
    fn da_rejects_nonpositive_correlation() {
        let (p, l) = base_case(4);
        let c = TargetContext::new(vec![0.1, -0.1, 0.1, -0.1], vec![0.0; 4], &p, l).unwrap();
        // every coordinate decodes to the zero point
        let (tr, lv) = refine_da(1.0, &c).unwrap();
        assert_eq!((tr, lv), (1.0, f64::INFINITY));
    }

    #[test]
    fn da_bias_is_second_order() {
        // with error-free decoding from t0 the projection has mean
        // t0 + (σ_N²/t0 − α(1−α)σ_Λ²t0)/(σ_X² + σ_Λ²) up to O(1/n)
        let (p, l) = no_wrap(1000);
        let trials = 2000u64;
        let vals: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|s| {
                let t = make_trial(&p, &l, 900 + s).unwrap();
                let c = TargetContext::new(t.z.clone(), t.d.clone(), &p, l.clone()).unwrap();
                let v: Vec<f64> = t.x.iter().zip(&t.d).map(|(x, d)| x - d).collect();
                let truth = l.quantize(&v).unwrap();
                let dec: Vec<f64> = t.z.iter().zip(&t.d).map(|(z, d)| z / p.t0 - d).collect();
                assert_eq!(l.quantize(&dec).unwrap(), truth);
                refine_da(p.t0, &c).unwrap().0
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / trials as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        let (sx2, sl2, sn2, a, t0) = (p.sigma_x2, p.sigma_lam2, p.sigma_n2, p.alpha, p.t0);
        let predicted = t0 + (sn2 / t0 - a * (1.0 - a) * sl2 * t0) / (sx2 + sl2);
        assert!((mean - predicted).abs() < 3.0 * se, "mean {mean} predicted {predicted} se {se}");
        assert!((mean - t0).abs() < 1e-5);
    }

    #[test]
    fn wrong_lobe_start_fails_the_at_t0_test() {
        let (p, l) = base_case(100);
        let fails = (0..100)
            .filter(|&s| {
                let c = ctx_for(&p, &l, 1300 + s);
                let (t, lv) = refine_da(2.0 * p.t0, &c).unwrap();
                let tau = tau_thresholds(t, &c.model_params(t).unwrap(), c.z2(), DEFAULT_PE, DEFAULT_PE, Regime::Scalar).unwrap();
                lv > tau.tau_eq
            })
            .count();
        assert!(fails >= 99, "{fails}/100");
    }

    #[test]
    fn tau_median_level() {
        let (p, _) = base_case(100);
        let tau = tau_thresholds(p.t0, &p, 1.0, 0.5, 0.5, Regime::Scalar).unwrap();
        let at = lobe_stats(p.t0, &p, LobeRegime::AtT0Scalar, FarMoments::WithT0);
        let far = lobe_stats(p.t0, &p, LobeRegime::FarScalar, FarMoments::Observed { z2: 1.0 });
        assert_eq!(tau.tau_eq, at.mean);
        assert_eq!(tau.tau_neq, far.mean);
    }

    #[test]
    fn tau_levels_match_frequencies() {
        let (p, l) = no_wrap(100);
        let pe = 0.05;
        let trials = 10_000u64;
        let (above, below) = (0..trials)
            .into_par_iter()
            .map(|s| {
                let c = ctx_for(&p, &l, 20_000 + s);
                let tau0 = tau_thresholds(p.t0, &p, c.z2(), pe, pe, Regime::Scalar).unwrap();
                let t = 2.0 * p.t0;
                let tau2 = tau_thresholds(t, &p, c.z2(), pe, pe, Regime::Scalar).unwrap();
                ((c.eval_l(p.t0).unwrap() > tau0.tau_eq) as u32, (c.eval_l(t).unwrap() < tau2.tau_neq) as u32)
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let (fa, fb) = (above as f64 / trials as f64, below as f64 / trials as f64);
        assert!((fa / pe - 1.0).abs() < 0.5, "at t0: {fa}");
        assert!((fb / pe - 1.0).abs() < 0.5, "far: {fb}");
    }

    #[test]
    fn estimate_reaches_fisher_accuracy() {
        let (p, l) = base_case(1000);
        let sd = fisher_asymptotic(&p).powf(-0.5);
        let der = EstimatorConfig { refiner: Refiner::Derivative { eps1: EPS1, eps2: EPS2 }, ..Default::default() };
        let hits: Vec<(bool, bool)> = (0..100u64)
            .into_par_iter()
            .map(|s| {
                let c = ctx_for(&p, &l, 3000 + s);
                let a = estimate(&c, &EstimatorConfig::default()).unwrap();
                let b = estimate(&c, &der).unwrap();
                for r in [&a, &b] {
                    assert!(c.eval_l(r.t_hat).unwrap() <= c.eval_l(r.t1_used).unwrap());
                }
                ((a.t_hat - p.t0).abs() < 3.0 * sd, (b.t_hat - p.t0).abs() < 3.0 * sd)
            })
            .collect();
        let da = hits.iter().filter(|h| h.0).count();
        let derivative = hits.iter().filter(|h| h.1).count();
        assert!(derivative >= 99, "derivative refiner {derivative}/100");
        // the single DA projection from a candidate ~30σ away can stop at a
        // neighbouring kink minimum; about 83% land within 3σ here
        assert!(da >= 75, "DA refiner {da}/100");
    }

    #[test]
    fn noiseless_full_compensation_is_exact() {
        let (p, l) = derive_params(40.0, 120.0, 1.0, 0.8, 100, &LatticeKind::scalar(1.0).unwrap()).unwrap();
        let t = make_trial(&p, &l, 5).unwrap();
        let z: Vec<f64> = t.y.iter().map(|y| p.t0 * y).collect();
        let c = TargetContext::new(z, t.d, &p, l).unwrap();
        let cfg = EstimatorConfig { bounds: BoundsConfig::VarBased { pe1: DEFAULT_PE }, ..Default::default() };
        let r = estimate(&c, &cfg).unwrap();
        assert!((r.t_hat / p.t0 - 1.0).abs() < 1e-12, "{}", r.t_hat);
    }

    #[test]
    fn derivative_pipeline_runs() {
        let (p, l) = base_case(200);
        let cfg = EstimatorConfig { refiner: Refiner::Derivative { eps1: EPS1, eps2: EPS2 }, ..Default::default() };
        for s in 0..5 {
            let c = ctx_for(&p, &l, 40 + s);
            let r = estimate(&c, &cfg).unwrap();
            assert!(c.eval_l(r.t_hat).unwrap() <= c.eval_l(r.t1_used).unwrap());
            assert!((r.t_hat - p.t0).abs() < 0.05);
        }
    }

    #[test]
    fn estimates_are_deterministic_across_thread_counts() {
        let (p, l) = base_case(100);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                (0..32u64).into_par_iter().map(|s| estimate(&ctx_for(&p, &l, s), &EstimatorConfig::default()).unwrap()).collect::<Vec<_>>()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn pwda_stops_early_on_easy_instances() {
        let (p, l) = base_case(1000);
        let early = (0..100u64)
            .into_par_iter()
            .filter(|&s| estimate_pwda(&ctx_for(&p, &l, 5000 + s), &PwdaConfig::default()).unwrap().candidates_evaluated <= 3)
            .count();
        // about 73% stop within two rounds at these parameters
        assert!(early >= 65, "{early}/100");
    }

    #[test]
    fn pwda_exhaustion_matches_full_da_over_its_probes() {
        let (p, l) = base_case(100);
        // a test level that cannot be met
        let cfg = PwdaConfig { pe2: 1.0 - 1e-15, ..Default::default() };
        for s in 0..20 {
            let c = ctx_for(&p, &l, 6000 + s);
            let r = estimate_pwda(&c, &cfg).unwrap();
            let t1 = r.t1_used;
            let sb = sampling_bounds(&r.bounds);
            let q = c.model_params(t1).unwrap();
            let (ru, rd) = (lowdim_ratio(&q, cfg.k1, Direction::Up).unwrap(), lowdim_ratio(&q, cfg.k1, Direction::Down).unwrap());
            // expected probe starts: t1 r_up^k ≤ upper, then t1 r_down^k ≥ lower for k ≥ 1
            let mut ups = vec![];
            let mut t = t1;
            while t <= sb.t_upper {
                ups.push(t);
                t *= ru;
            }
            let mut downs = vec![];
            let mut t = t1 * rd;
            while t >= sb.t_lower {
                downs.push(t);
                t *= rd;
            }
            let mut starts: Vec<f64> = r.per_candidate.iter().map(|x| x.t_start).collect();
            let mut want: Vec<f64> = ups.into_iter().chain(downs).collect();
            starts.sort_by(|a, b| a.total_cmp(b));
            want.sort_by(|a, b| a.total_cmp(b));
            if t1 <= sb.t_upper {
                assert_eq!(starts, want);
            }
            let best = want
                .iter()
                .map(|&t| refine_da(t, &c).unwrap())
                .filter(|x| x.1.is_finite())
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let expect = match best {
                Some((t, lv)) if lv < c.eval_l(t1).unwrap() => t,
                _ => t1,
            };
            assert_eq!(r.t_hat, expect);
        }
    }

    fn mse<F: Fn(&TargetContext) -> f64 + Sync>(p: &ModelParams, l: &LatticeKind, trials: u64, seed: u64, f: F) -> f64 {
        (0..trials).into_par_iter().map(|s| (f(&ctx_for(p, l, seed + s)) - p.t0).powi(2)).sum::<f64>() / trials as f64
    }

    #[test]
    fn pwda_mse_between_full_da_and_t1() {
        let (p, l) = base_case(1000);
        let full = mse(&p, &l, 300, 8000, |c| estimate(c, &EstimatorConfig::default()).unwrap().t_hat);
        let pw = mse(&p, &l, 300, 8000, |c| estimate_pwda(c, &PwdaConfig::default()).unwrap().t_hat);
        let var = mse(&p, &l, 300, 8000, |c| var_estimate(c).t_hat);
        // the τ tests accept any DA point inside the main lobe, so early
        // stops cost accuracy: the ratio is near 8 here, not 1
        assert!(pw >= full && pw < 0.1 * var, "pwda {pw} full {full} var {var}");
    }

    #[test]
    fn pipeline_beats_variance_estimator() {
        for n in [100, 1000] {
            let (p, l) = base_case(n);
            let ml = mse(&p, &l, 1000, 10_000, |c| estimate(c, &EstimatorConfig::default()).unwrap().t_hat);
            let var = mse(&p, &l, 1000, 10_000, |c| var_estimate(c).t_hat);
            assert!(ml <= var, "n {n}: ml {ml} var {var}");
        }
    }

    #[test]
    fn online_first_step_uses_t1_method() {
        let (p, l) = base_case(50);
        for s in 0..10 {
            let c = ctx_for(&p, &l, 100 + s);
            let steps = estimate_online(&c, &OnlineConfig::default()).unwrap();
            assert_eq!(steps.len(), 50);
            let first = initial_t1(&c.prefix(1).unwrap(), T1Method::Var).unwrap();
            assert_eq!(steps[0].t1_used, first);
            if !steps[0].locked {
                assert_eq!(steps[0].t_estimate, first);
            }
            let mut ever = false;
            for w in steps.windows(2) {
                ever |= w[0].locked;
                if ever && !w[1].locked {
                    assert_eq!(w[1].t_estimate, w[0].t_estimate);
                }
            }
        }
    }

    #[test]
    fn online_lock_persists() {
        let (p, l) = base_case(600);
        let results: Vec<Option<bool>> = (0..100u64)
            .into_par_iter()
            .map(|s| {
                let steps = estimate_online(&ctx_for(&p, &l, 7000 + s), &OnlineConfig::default()).unwrap();
                let j_star = steps.iter().position(|x| x.locked)? + 1;
                if 5 * j_star > steps.len() {
                    return None;
                }
                Some(steps[j_star - 1..5 * j_star].iter().all(|x| x.locked))
            })
            .collect();
        let decided: Vec<bool> = results.iter().flatten().copied().collect();
        assert!(decided.len() >= 90, "only {} runs locked early enough", decided.len());
        let kept = decided.iter().filter(|&&b| b).count();
        // ~94% over 1000 streams: each locked step is a fresh pair of tests
        assert!(kept as f64 >= 0.9 * decided.len() as f64, "{kept}/{}", decided.len());
    }

    #[test]
    fn online_error_median_shrinks() {
        let (p, l) = base_case(640);
        let checkpoints = [20usize, 40, 80, 160, 320, 640];
        let errs: Vec<Vec<f64>> = (0..100u64)
            .into_par_iter()
            .map(|s| {
                let steps = estimate_online(&ctx_for(&p, &l, 9000 + s), &OnlineConfig::default()).unwrap();
                checkpoints.iter().map(|&j| (steps[j - 1].t_estimate - p.t0).abs()).collect()
            })
            .collect();
        let mut medians = vec![];
        for k in 0..checkpoints.len() {
            let mut col: Vec<f64> = errs.iter().map(|e| e[k]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            medians.push(0.5 * (col[49] + col[50]));
        }
        assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn da_constant_on_fixed_decoding(seed in 0u64..1000, a in -1e-3f64..1e-3, b in -1e-3f64..1e-3) {
            let (p, l) = base_case(64);
            let c = ctx_for(&p, &l, seed);
            let (ta, tb) = (p.t0 * (1.0 + a), p.t0 * (1.0 + b));
            let dec = |t: f64| {
                let v: Vec<f64> = c.z.iter().zip(&c.d).map(|(z, d)| z / t - d).collect();
                l.quantize(&v).unwrap()
            };
            prop_assume!(dec(ta) == dec(tb));
            prop_assert_eq!(refine_da(ta, &c).unwrap(), refine_da(tb, &c).unwrap());
        }
    }
}
