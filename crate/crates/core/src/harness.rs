//! Monte-Carlo experiment runner, key=value configuration, CSV and SVG output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::analysis::{alpha_opt, bias_asymptotic, fisher_asymptotic, mse_lower_bound, with_alpha};
use crate::error::{Error, Result};
use crate::init_est::{t1_from_l1, var_estimate, var_estimator_crb};
use crate::interval::IntervalBounds;
use crate::lattice::LatticeKind;
use crate::model::{alpha_no_bias, derive_params, make_trial, trial_seed, ModelParams};
use crate::optimizer::{
    estimate, estimate_pwda, initial_t1, sampling_bounds, search_bounds, BoundsConfig, EstimateReport, EstimatorConfig, PwdaConfig, Refiner, T1Method,
    DEFAULT_PE, EPS1, EPS2,
};
use crate::sampler::{build_candidates_anchored, count_nondiff_points, Anchor, SamplingRule, DEFAULT_K1};
use crate::target::TargetContext;

pub const CSV_HEADER: &str = "grid,mse,stderr,bound,crb,bias2,mean_candidates,mean_runtime_ms";
pub const THREADS_ENV: &str = "GAIN_EST_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Rows over t0 at fixed α rule.
    SweepT0,
    /// Rows over α at fixed t0.
    SweepAlpha,
    /// Rows over t0; `mse` holds the frequency with which the search
    /// interval misses t0.
    IntervalCoverage,
    /// Rows over n; `mse` holds the mean number of non-differentiable
    /// points in the 5σ interval around the variance-based estimate.
    NondiffScaling,
    /// Rows over t0 with closed-form quantities only.
    TheoryTable,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sweep_t0" | "sweep-t0" => Experiment::SweepT0,
            "sweep_alpha" | "sweep-alpha" => Experiment::SweepAlpha,
            "interval_coverage" | "coverage" => Experiment::IntervalCoverage,
            "nondiff_scaling" | "nondiff" => Experiment::NondiffScaling,
            "theory_table" | "theory" => Experiment::TheoryTable,
            _ => return Err(Error::Config(format!("unknown experiment '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeChoice {
    Scalar,
    ConvCoset,
}

impl LatticeChoice {
    pub fn family(self) -> LatticeKind {
        match self {
            LatticeChoice::Scalar => LatticeKind::Scalar { delta: 1.0 },
            LatticeChoice::ConvCoset => LatticeKind::ConvCoset { fine_step: 1.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaRule {
    /// Costa's α with the embedded power seen at the receiver (the bias-free α).
    Costa,
    Opt,
    Fixed(f64),
}

/// One estimator whose MSE is reported as a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorSpec {
    Full(EstimatorConfig),
    Pwda(PwdaConfig),
    Var,
    L1,
}

impl EstimatorSpec {
    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Full(c) => match c.refiner {
                Refiner::Da => "ml-da".into(),
                Refiner::Derivative { .. } => "ml-derivative".into(),
            },
            EstimatorSpec::Pwda(_) => "pwda".into(),
            EstimatorSpec::Var => "var".into(),
            EstimatorSpec::L1 => "l1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub dwr_db: f64,
    pub wnr_db: f64,
    pub n: usize,
    pub lattice: LatticeChoice,
    pub alpha: AlphaRule,
    /// t0 values, α values or n values depending on the experiment.
    pub grid: Vec<f64>,
    /// Gain used when the grid is not over t0.
    pub t0: f64,
    pub trials: usize,
    pub master_seed: u64,
    /// Estimator chain of the primary series.
    pub chain: EstimatorConfig,
    pub pwda: bool,
    /// Additional series reported next to the primary one.
    pub compare: Vec<EstimatorSpec>,
    /// Record wall-clock time per trial. Off by default so that output is
    /// reproducible byte for byte.
    pub timing: bool,
    pub out: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::SweepT0,
            dwr_db: 40.0,
            wnr_db: 3.0,
            n: 100,
            lattice: LatticeChoice::Scalar,
            alpha: AlphaRule::Costa,
            grid: vec![0.6, 0.8, 1.0, 1.2],
            t0: 0.8,
            trials: 200,
            master_seed: 42,
            chain: EstimatorConfig::default(),
            pwda: false,
            compare: vec![EstimatorSpec::Var],
            timing: false,
            out: None,
            svg: None,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{key}: '{v}' is not a count")))
}

/// `a:step:b` (inclusive, tolerant to rounding) or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let grid = if parts.len() == 3 {
        let (a, step, b) = (parse_f64("grid", parts[0])?, parse_f64("grid", parts[1])?, parse_f64("grid", parts[2])?);
        if !(step > 0.0) || b < a {
            return Err(Error::Config(format!("grid '{s}' needs step > 0 and start <= end")));
        }
        let k = ((b - a) / step + 1e-9).floor() as usize;
        (0..=k).map(|i| a + i as f64 * step).collect()
    } else {
        s.split(',').map(|x| parse_f64("grid", x)).collect::<Result<Vec<_>>>()?
    };
    Ok(grid)
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "experiment" => self.experiment = v.parse()?,
            "dwr" | "dwr_db" => self.dwr_db = parse_f64(key, v)?,
            "wnr" | "wnr_db" => self.wnr_db = parse_f64(key, v)?,
            "n" => self.n = parse_usize(key, v)?,
            "lattice" => {
                self.lattice = match v {
                    "scalar" => LatticeChoice::Scalar,
                    "conv" | "conv_coset" | "convcoset" => LatticeChoice::ConvCoset,
                    _ => return Err(Error::Config(format!("unknown lattice '{v}'"))),
                }
            }
            "alpha" => {
                self.alpha = match v {
                    "costa" => AlphaRule::Costa,
                    "opt" => AlphaRule::Opt,
                    _ => AlphaRule::Fixed(parse_f64(key, v)?),
                }
            }
            "grid" | "t0_grid" | "alpha_grid" | "n_grid" => self.grid = parse_grid(v)?,
            "t0" => self.t0 = parse_f64(key, v)?,
            "trials" => self.trials = parse_usize(key, v)?,
            "seed" | "master_seed" => self.master_seed = v.parse().map_err(|_| Error::Config(format!("seed: '{v}' is not a u64")))?,
            "t1" => {
                self.chain.t1 = match v {
                    "var" => T1Method::Var,
                    "l1" => T1Method::L1,
                    _ => return Err(Error::Config(format!("unknown t1 method '{v}'"))),
                }
            }
            "bounds" => {
                let pe1 = match self.chain.bounds {
                    BoundsConfig::PartProb { pe1 } | BoundsConfig::VarBased { pe1 } => pe1,
                    BoundsConfig::DetI => DEFAULT_PE,
                };
                self.chain.bounds = match v {
                    "det" | "deti" => BoundsConfig::DetI,
                    "partprob" => BoundsConfig::PartProb { pe1 },
                    "var" | "varbased" => BoundsConfig::VarBased { pe1 },
                    _ => return Err(Error::Config(format!("unknown bounds method '{v}'"))),
                }
            }
            "pe1" => {
                let p = parse_f64(key, v)?;
                match &mut self.chain.bounds {
                    BoundsConfig::PartProb { pe1 } | BoundsConfig::VarBased { pe1 } => *pe1 = p,
                    BoundsConfig::DetI => {}
                }
            }
            "pe2" => self.chain.pe2 = parse_f64(key, v)?,
            "pe3" => self.chain.pe3 = parse_f64(key, v)?,
            "rule" => {
                let k1 = match self.chain.rule {
                    SamplingRule::LowDim { k1 } | SamplingRule::Hybrid { k1 } => k1,
                    _ => DEFAULT_K1,
                };
                self.chain.rule = match v {
                    "lowdim" => SamplingRule::LowDim { k1 },
                    "highdim" => SamplingRule::HighDim,
                    "hybrid" => SamplingRule::Hybrid { k1 },
                    "highdim_jump" => SamplingRule::HighDimJump,
                    _ => return Err(Error::Config(format!("unknown sampling rule '{v}'"))),
                }
            }
            "k1" => {
                let k = parse_f64(key, v)?;
                match &mut self.chain.rule {
                    SamplingRule::LowDim { k1 } | SamplingRule::Hybrid { k1 } => *k1 = k,
                    _ => self.chain.rule = SamplingRule::LowDim { k1: k },
                }
            }
            "refiner" => {
                self.chain.refiner = match v {
                    "da" => Refiner::Da,
                    "derivative" => Refiner::Derivative { eps1: EPS1, eps2: EPS2 },
                    _ => return Err(Error::Config(format!("unknown refiner '{v}'"))),
                }
            }
            "pwda" => self.pwda = parse_bool(key, v)?,
            "compare" => {
                self.compare = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(|s| match s {
                        "var" => Ok(EstimatorSpec::Var),
                        "l1" => Ok(EstimatorSpec::L1),
                        "pwda" => Ok(EstimatorSpec::Pwda(PwdaConfig::default())),
                        "ml-da" => Ok(EstimatorSpec::Full(EstimatorConfig::default())),
                        "ml-derivative" => Ok(EstimatorSpec::Full(EstimatorConfig {
                            refiner: Refiner::Derivative { eps1: EPS1, eps2: EPS2 },
                            ..Default::default()
                        })),
                        _ => Err(Error::Config(format!("unknown estimator '{s}'"))),
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            "timing" => self.timing = parse_bool(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "svg" => self.svg = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.parse_kv(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("grid must be strictly increasing".into()));
        }
        if self.experiment == Experiment::NondiffScaling && self.lattice != LatticeChoice::Scalar {
            return Err(Error::Config("nondiff scaling needs the scalar lattice".into()));
        }
        Ok(())
    }

    /// Primary series first, then the comparison estimators.
    pub fn estimators(&self) -> Vec<EstimatorSpec> {
        let primary = if self.pwda {
            let c = self.chain;
            EstimatorSpec::Pwda(PwdaConfig { t1: c.t1, bounds: c.bounds, pe2: c.pe2, pe3: c.pe3, ..Default::default() })
        } else {
            EstimatorSpec::Full(self.chain)
        };
        let mut v = vec![primary];
        v.extend(self.compare.iter().copied().filter(|e| *e != primary));
        v
    }

    /// Parameters and scaled lattice of one grid point.
    pub fn point(&self, g: f64) -> Result<(ModelParams, LatticeKind)> {
        let (t0, n, alpha_given) = match self.experiment {
            Experiment::SweepAlpha => (self.t0, self.n, Some(g)),
            Experiment::NondiffScaling => (self.t0, g.round() as usize, None),
            _ => (g, self.n, None),
        };
        let alpha = match (alpha_given, self.alpha) {
            (Some(a), _) => a,
            (None, AlphaRule::Fixed(a)) => a,
            (None, AlphaRule::Costa) => alpha_no_bias(self.wnr_db, t0),
            (None, AlphaRule::Opt) => {
                let (p, _) = derive_params(self.dwr_db, self.wnr_db, 1.0, t0, n, &LatticeKind::Scalar { delta: 1.0 })?;
                alpha_opt(&with_alpha(&p, 0.5)?)
            }
        };
        derive_params(self.dwr_db, self.wnr_db, alpha, t0, n, &self.lattice.family())
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{v}' is not a boolean"))),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), msg: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultRow {
    pub grid: f64,
    pub mse: f64,
    pub stderr: f64,
    pub bound: f64,
    pub crb: f64,
    pub bias2: f64,
    pub mean_candidates: f64,
    pub mean_runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub rows: Vec<ResultRow>,
    /// Per row: trials whose configured search interval was infeasible and
    /// were rerun with the deterministic bounds.
    pub fallbacks: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct TrialOutcome {
    value: f64,
    candidates: f64,
    runtime_ms: f64,
    fallback: bool,
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::InfeasibleProbability { .. } | Error::DegenerateN)
}

fn run_estimator(ctx: &TargetContext, spec: &EstimatorSpec) -> Result<(f64, f64, bool)> {
    let report = |r: EstimateReport| (r.t_hat, r.candidates_evaluated as f64);
    Ok(match spec {
        EstimatorSpec::Var => (var_estimate(ctx).t_hat, 0.0, false),
        EstimatorSpec::L1 => (t1_from_l1(ctx)?, 0.0, false),
        EstimatorSpec::Full(c) => match estimate(ctx, c) {
            Ok(r) => {
                let (t, k) = report(r);
                (t, k, false)
            }
            Err(e) if recoverable(&e) => {
                let (t, k) = report(estimate(ctx, &EstimatorConfig { bounds: BoundsConfig::DetI, ..*c })?);
                (t, k, true)
            }
            Err(e) => return Err(e),
        },
        EstimatorSpec::Pwda(c) => match estimate_pwda(ctx, c) {
            Ok(r) => {
                let (t, k) = report(r);
                (t, k, false)
            }
            Err(e) if recoverable(&e) => {
                let (t, k) = report(estimate_pwda(ctx, &PwdaConfig { bounds: BoundsConfig::DetI, ..*c })?);
                (t, k, true)
            }
            Err(e) => return Err(e),
        },
    })
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Runs `f` on a rayon pool capped by `GAIN_EST_THREADS` when set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let k: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}='{v}' is not a count")))?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// One series per estimator, rows in grid order. Trial `k` of row `r` uses
/// seed `master_seed ^ (r·trials + k)`, shared by every estimator.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<Series>> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::SweepT0 | Experiment::SweepAlpha => run_mse(cfg),
        Experiment::IntervalCoverage => run_coverage(cfg),
        Experiment::NondiffScaling => run_nondiff(cfg),
        Experiment::TheoryTable => run_theory(cfg),
    }
}

fn seed_of(cfg: &ExperimentConfig, row: usize, k: usize) -> u64 {
    trial_seed(cfg.master_seed, (row * cfg.trials + k) as u64)
}

fn theory_columns(p: &ModelParams) -> (f64, f64, f64) {
    (mse_lower_bound(p), 1.0 / fisher_asymptotic(p), bias_asymptotic(p).powi(2))
}

fn run_mse(cfg: &ExperimentConfig) -> Result<Vec<Series>> {
    let specs = cfg.estimators();
    let mut series: Vec<Series> =
        specs.iter().map(|s| Series { label: s.label(), rows: Vec::new(), fallbacks: Vec::new() }).collect();
    for (row, &g) in cfg.grid.iter().enumerate() {
        let (p, lat) = cfg.point(g)?;
        let outcomes: Vec<Vec<TrialOutcome>> = (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let trial = make_trial(&p, &lat, seed_of(cfg, row, k))?;
                let ctx = TargetContext::new(trial.z, trial.d, &p, lat.clone())?;
                specs
                    .iter()
                    .map(|s| {
                        let start = cfg.timing.then(Instant::now);
                        let (t, candidates, fallback) = run_estimator(&ctx, s)?;
                        let runtime_ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);
                        Ok(TrialOutcome { value: (t - p.t0).powi(2), candidates, runtime_ms, fallback })
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?;
        let (bound, crb, bias2) = theory_columns(&p);
        for (i, s) in series.iter_mut().enumerate() {
            let col: Vec<TrialOutcome> = outcomes.iter().map(|o| o[i]).collect();
            s.rows.push(summarize(g, &col, bound, crb, bias2));
            s.fallbacks.push(col.iter().filter(|o| o.fallback).count());
        }
    }
    Ok(series)
}

fn summarize(grid: f64, col: &[TrialOutcome], bound: f64, crb: f64, bias2: f64) -> ResultRow {
    let vals: Vec<f64> = col.iter().map(|o| o.value).collect();
    let (mse, stderr) = mean_and_stderr(&vals);
    let k = col.len() as f64;
    ResultRow {
        grid,
        mse,
        stderr,
        bound,
        crb,
        bias2,
        mean_candidates: col.iter().map(|o| o.candidates).sum::<f64>() / k,
        mean_runtime_ms: col.iter().map(|o| o.runtime_ms).sum::<f64>() / k,
    }
}

fn bounds_for(ctx: &TargetContext, cfg: &EstimatorConfig) -> Result<(f64, IntervalBounds, bool)> {
    let t1 = initial_t1(ctx, cfg.t1)?;
    match search_bounds(ctx, t1, cfg.bounds) {
        Ok(b) => Ok((t1, b, false)),
        Err(e) if recoverable(&e) => Ok((t1, search_bounds(ctx, t1, BoundsConfig::DetI)?, true)),
        Err(e) => Err(e),
    }
}

/// `mse` = miss frequency of the configured interval, `bound` = its nominal
/// miss probability, `crb` = mean relative width, `mean_candidates` = mean
/// size of the candidate set built on it.
fn run_coverage(cfg: &ExperimentConfig) -> Result<Vec<Series>> {
    let mut s = Series { label: format!("{:?}", cfg.chain.bounds).to_lowercase(), rows: Vec::new(), fallbacks: Vec::new() };
    for (row, &g) in cfg.grid.iter().enumerate() {
        let (p, lat) = cfg.point(g)?;
        let res: Vec<(f64, f64, f64, bool)> = (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let trial = make_trial(&p, &lat, seed_of(cfg, row, k))?;
                let ctx = TargetContext::new(trial.z, trial.d, &p, lat.clone())?;
                let (t1, b, fb) = bounds_for(&ctx, &cfg.chain)?;
                let cands = build_candidates_anchored(&sampling_bounds(&b), &ctx.model_params(t1)?, cfg.chain.rule, Anchor::Lower, None)?.len() as f64;
                Ok((if b.contains(p.t0) { 0.0 } else { 1.0 }, b.width() / p.t0, cands, fb))
            })
            .collect::<Result<Vec<_>>>()?;
        let miss: Vec<f64> = res.iter().map(|r| r.0).collect();
        let (freq, se) = mean_and_stderr(&miss);
        let k = res.len() as f64;
        let nominal = match cfg.chain.bounds {
            BoundsConfig::DetI => 0.0,
            BoundsConfig::PartProb { pe1 } | BoundsConfig::VarBased { pe1 } => pe1,
        };
        s.rows.push(ResultRow {
            grid: g,
            mse: freq,
            stderr: se,
            bound: nominal,
            crb: res.iter().map(|r| r.1).sum::<f64>() / k,
            bias2: 0.0,
            mean_candidates: res.iter().map(|r| r.2).sum::<f64>() / k,
            mean_runtime_ms: 0.0,
        });
        s.fallbacks.push(res.iter().filter(|r| r.3).count());
    }
    Ok(vec![s])
}

/// Radius 5·√var of the variance-based estimate of t, evaluated at the
/// estimate itself.
pub fn nondiff_interval(ctx: &TargetContext) -> Result<Option<(f64, f64)>> {
    let v = var_estimate(ctx);
    if v.clamped {
        return Ok(None);
    }
    let q = ctx.model_params(v.t_hat)?;
    let r = 5.0 * (var_estimator_crb(&q) / (4.0 * v.t_hat * v.t_hat)).sqrt();
    Ok(Some(((v.t_hat - r).max(f64::MIN_POSITIVE), v.t_hat + r)))
}

/// `mse` = mean count of non-differentiable points, `crb` = mean interval
/// width, `mean_candidates` = mean count divided by √n.
fn run_nondiff(cfg: &ExperimentConfig) -> Result<Vec<Series>> {
    let mut s = Series { label: "nondiff".into(), rows: Vec::new(), fallbacks: Vec::new() };
    for (row, &g) in cfg.grid.iter().enumerate() {
        let (p, lat) = cfg.point(g)?;
        let res: Vec<Option<(f64, f64)>> = (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let trial = make_trial(&p, &lat, seed_of(cfg, row, k))?;
                let ctx = TargetContext::new(trial.z.clone(), trial.d.clone(), &p, lat.clone())?;
                let Some((a, b)) = nondiff_interval(&ctx)? else { return Ok(None) };
                Ok(Some((count_nondiff_points((a, b), &trial.z, &trial.d, &lat)? as f64, b - a)))
            })
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<(f64, f64)> = res.iter().flatten().copied().collect();
        let counts: Vec<f64> = ok.iter().map(|r| r.0).collect();
        let (mean, se) = if counts.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_stderr(&counts) };
        s.rows.push(ResultRow {
            grid: g,
            mse: mean,
            stderr: se,
            bound: 0.0,
            crb: ok.iter().map(|r| r.1).sum::<f64>() / ok.len().max(1) as f64,
            bias2: 0.0,
            mean_candidates: mean / (p.n as f64).sqrt(),
            mean_runtime_ms: 0.0,
        });
        s.fallbacks.push(res.len() - ok.len());
    }
    Ok(vec![s])
}

fn run_theory(cfg: &ExperimentConfig) -> Result<Vec<Series>> {
    let mut s = Series { label: "theory".into(), rows: Vec::new(), fallbacks: Vec::new() };
    for &g in &cfg.grid {
        let (p, _) = cfg.point(g)?;
        let (bound, crb, bias2) = theory_columns(&p);
        s.rows.push(ResultRow { grid: g, mse: bound, stderr: 0.0, bound, crb, bias2, mean_candidates: 0.0, mean_runtime_ms: 0.0 });
        s.fallbacks.push(0);
    }
    Ok(vec![s])
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv_string(rows: &[ResultRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let f = [r.grid, r.mse, r.stderr, r.bound, r.crb, r.bias2, r.mean_candidates, r.mean_runtime_ms];
        let line: Vec<String> = f.iter().map(|&x| fmt17(x)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Config("CSV header mismatch".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f = l.split(',').map(|x| parse_f64("csv", x)).collect::<Result<Vec<_>>>()?;
            if f.len() != 8 {
                return Err(Error::Config(format!("CSV row has {} fields", f.len())));
            }
            Ok(ResultRow {
                grid: f[0],
                mse: f[1],
                stderr: f[2],
                bound: f[3],
                crb: f[4],
                bias2: f[5],
                mean_candidates: f[6],
                mean_runtime_ms: f[7],
            })
        })
        .collect()
}

pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(rows)).map_err(|e| io_err(path, e))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Log-scale MSE curves, one `<path>` per series plus one for the bound of
/// the first series.
pub fn svg_string(series: &[Series]) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.rows.iter().flat_map(|r| [(r.grid, r.mse), (r.grid, r.bound)]))
        .filter(|&(x, y)| x.is_finite() && y > 0.0 && y.is_finite())
        .collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1.log10()), a.1.max(p.1.log10())));
    let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
    let (y0, y1) = if y1 > y0 { (y0, y1) } else { (y0 - 1.0, y0 + 1.0) };
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y.log10() - y0) / (y1 - y0) * (h - 2.0 * m);
    let path = |vals: Vec<(f64, f64)>| {
        let mut d = String::new();
        for (i, (x, y)) in vals.into_iter().filter(|&(x, y)| x.is_finite() && y > 0.0 && y.is_finite()).enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        d.trim_end().to_string()
    };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(s, "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#000\"/>", w - 2.0 * m, h - 2.0 * m);
    let _ = writeln!(s, "<text x=\"{m}\" y=\"{}\" font-size=\"11\">grid {x0:.4} .. {x1:.4}</text>", h - 15.0);
    let _ = writeln!(s, "<text x=\"5\" y=\"{}\" font-size=\"11\">log10 MSE {y0:.2} .. {y1:.2}</text>", m - 10.0);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let d = path(ser.rows.iter().map(|r| (r.grid, r.mse)).collect());
        let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\"><title>{}</title></path>", ser.label);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{c}\">{}</text>", w - m - 100.0, m + 15.0 + 14.0 * i as f64, ser.label);
    }
    if let Some(first) = series.first() {
        let d = path(first.rows.iter().map(|r| (r.grid, r.bound)).collect());
        let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"#000\" stroke-dasharray=\"4 3\"><title>bound</title></path>");
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg_plot(series: &[Series], path: &Path) -> Result<()> {
    std::fs::write(path, svg_string(series)).map_err(|e| io_err(path, e))
}

/// File name for series `i`: the configured path for the primary series,
/// `<stem>-<label>.<ext>` for the others.
pub fn series_path(base: &Path, label: &str, i: usize) -> PathBuf {
    if i == 0 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}-{label}.{ext}"))
}

/// Runs the experiment and writes every configured artifact.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<Vec<Series>> {
    let series = with_thread_cap(|| run_experiment(cfg))??;
    if let Some(out) = &cfg.out {
        for (i, s) in series.iter().enumerate() {
            emit_csv(&s.rows, &series_path(out, &s.label, i))?;
        }
    }
    if let Some(svg) = &cfg.svg {
        emit_svg_plot(&series, svg)?;
    }
    Ok(series)
}
