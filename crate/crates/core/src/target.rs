//! The target function L(t, z) and its relatives L1..L4, plus Gaussian
//! approximations of the distribution of L at and away from the true gain.

use crate::error::{Error, Result};
use crate::lattice::{round_even, LatticeKind, Regime};
use crate::model::ModelParams;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Everything an estimator may look at: the observation, the dither, the
/// lattice and the model variances. The true gain is deliberately absent.
#[derive(Debug, Clone)]
pub struct TargetContext {
    pub z: Vec<f64>,
    pub d: Vec<f64>,
    pub n: usize,
    pub sigma_x2: f64,
    pub sigma_n2: f64,
    pub sigma_lam2: f64,
    pub alpha: f64,
    pub lattice: LatticeKind,
    z2: f64,
}

impl TargetContext {
    pub fn new(z: Vec<f64>, d: Vec<f64>, params: &ModelParams, lattice: LatticeKind) -> Result<Self> {
        if z.len() != d.len() {
            return Err(Error::Shape(format!("z has {} samples, d {}", z.len(), d.len())));
        }
        lattice.check_dim(z.len())?;
        let z2 = z.iter().map(|v| v * v).sum();
        Ok(TargetContext {
            n: z.len(),
            z,
            d,
            sigma_x2: params.sigma_x2,
            sigma_n2: params.sigma_n2,
            sigma_lam2: params.sigma_lam2,
            alpha: params.alpha,
            lattice,
            z2,
        })
    }

    /// Context over the first `j` samples.
    pub fn prefix(&self, j: usize) -> Result<Self> {
        let p = ModelParams::new(j.max(1), self.sigma_x2, self.sigma_n2, self.sigma_lam2, self.alpha, 1.0)?;
        TargetContext::new(self.z[..j].to_vec(), self.d[..j].to_vec(), &p, self.lattice.clone())
    }

    /// ‖z‖², computed once.
    pub fn z2(&self) -> f64 {
        self.z2
    }

    /// Model parameters seen by the receiver, with `t0` as a stand-in for
    /// the unknown gain.
    pub fn model_params(&self, t0: f64) -> Result<ModelParams> {
        ModelParams::new(self.n, self.sigma_x2, self.sigma_n2, self.sigma_lam2, self.alpha, t0)
    }

    pub fn nf(&self) -> f64 {
        self.n as f64
    }

    fn one_minus_alpha2(&self) -> f64 {
        (1.0 - self.alpha).powi(2)
    }

    /// S(t) = σ_N² + (1−α)²t²σ_Λ².
    pub fn s_of(&self, t: f64) -> f64 {
        self.sigma_n2 + self.one_minus_alpha2() * t * t * self.sigma_lam2
    }

    /// ‖(z − t d) mod tΛ‖².
    pub fn residual(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        if let LatticeKind::Scalar { delta } = self.lattice {
            let td = t * delta;
            return Ok(self
                .z
                .iter()
                .zip(&self.d)
                .map(|(z, d)| {
                    let x = z - t * d;
                    let r = x - td * round_even(x / td);
                    r * r
                })
                .sum());
        }
        let v: Vec<f64> = self.z.iter().zip(&self.d).map(|(z, d)| z - t * d).collect();
        Ok(self.lattice.mod_reduce_unchecked(&v, t).iter().map(|r| r * r).sum())
    }

    pub fn eval_l(&self, t: f64) -> Result<f64> {
        Ok(self.residual(t)? / self.s_of(t) + self.eval_l2(t)?)
    }

    /// Residual term replaced by its uniform-regime mean n t²σ_Λ².
    pub fn eval_l1(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.nf() * t * t * self.sigma_lam2 / self.s_of(t) + self.eval_l2(t)?)
    }

    /// n ln 2πS(t) + ‖z‖²/(σ_X²t²).
    pub fn eval_l2(&self, t: f64) -> Result<f64> {
        Ok(self.eval_l4(t)? + self.z2 / (self.sigma_x2 * t * t))
    }

    pub fn eval_l3(&self, t: f64) -> Result<f64> {
        Ok(self.residual(t)? / self.s_of(t))
    }

    pub fn eval_l4(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.nf() * (TWO_PI * self.s_of(t)).ln())
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("target function needs t > 0, got {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LobeRegime {
    AtT0Scalar,
    AtT0Good,
    FarScalar,
    FarGood,
}

impl LobeRegime {
    pub fn at_t0(r: Regime) -> Self {
        match r {
            Regime::Scalar => LobeRegime::AtT0Scalar,
            Regime::Good => LobeRegime::AtT0Good,
        }
    }
    pub fn far(r: Regime) -> Self {
        match r {
            Regime::Scalar => LobeRegime::FarScalar,
            Regime::Good => LobeRegime::FarGood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofModel {
    Chi2N,
    Chi2TwoN,
    Gaussian,
}

/// How the ‖z‖² term is treated away from t0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FarMoments {
    /// Random, with moments set by the true gain `params.t0`.
    WithT0,
    /// Observed and therefore deterministic.
    Observed { z2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LobeStats {
    pub mean: f64,
    pub variance: f64,
    pub regime: LobeRegime,
    pub dof_model: DofModel,
}

/// Mean and variance of L(t, Z).
///
/// In the at-t0 regimes `t` plays the role of the true gain and
/// `params.t0` is not read. In the far regimes `far` selects the treatment
/// of the ‖z‖² term.
pub fn lobe_stats(t: f64, params: &ModelParams, regime: LobeRegime, far: FarMoments) -> LobeStats {
    let n = params.n as f64;
    let (sx2, sn2, sl2, a) = (params.sigma_x2, params.sigma_n2, params.sigma_lam2, params.alpha);
    let a1 = 1.0 - a;
    let t2 = t * t;
    let s = sn2 + a1 * a1 * t2 * sl2;
    let log_term = n * (TWO_PI * s).ln();
    match regime {
        LobeRegime::AtT0Scalar | LobeRegime::AtT0Good => {
            let host = sx2 * t2 + a * a * t2 * sl2 + sn2;
            let mean = n + log_term + n * host / (sx2 * t2);
            let variance = if regime == LobeRegime::AtT0Good {
                n * (2.0 + 2.0 * host * host / (sx2 * sx2 * t2 * t2))
            } else {
                let d2 = 12.0 * sl2;
                let d4 = d2 * d2;
                let first = (a1.powi(4) * t2 * t2 * d4 / 180.0 + 2.0 * sn2 * sn2 + a1 * a1 * t2 * d2 * sn2 / 3.0) / (s * s);
                let hx = t2 * sx2 + sn2;
                let second = (a.powi(4) * t2 * t2 * d4 / 180.0 + 2.0 * hx * hx + a * a * t2 * d2 * hx / 3.0) / (sx2 * sx2 * t2 * t2);
                n * (first + second)
            };
            LobeStats { mean, variance, regime, dof_model: DofModel::Gaussian }
        }
        LobeRegime::FarScalar | LobeRegime::FarGood => {
            let res_mean = n * t2 * sl2 / s;
            let res_var = if regime == LobeRegime::FarScalar {
                n * 144.0 * t2 * t2 * sl2 * sl2 / 180.0 / (s * s)
            } else {
                2.0 * n * t2 * t2 * sl2 * sl2 / (s * s)
            };
            let (last_mean, last_var) = match far {
                FarMoments::WithT0 => {
                    let t02 = params.t0 * params.t0;
                    let m = (sx2 + a * a * sl2) * t02 + sn2;
                    (n * m / (sx2 * t2), 2.0 * n * m * m / (sx2 * sx2 * t2 * t2))
                }
                FarMoments::Observed { z2 } => (z2 / (sx2 * t2), 0.0),
            };
            LobeStats { mean: res_mean + log_term + last_mean, variance: res_var + last_var, regime, dof_model: DofModel::Gaussian }
        }
    }
}

/// Large-n, high-HLR mean of L near (`near = true`) or far from t0.
pub fn asymptotic_l(t: f64, params: &ModelParams, near: bool) -> Result<f64> {
    check_t(t)?;
    let n = params.n as f64;
    let a1 = 1.0 - params.alpha;
    let s = params.sigma_n2 + a1 * a1 * t * t * params.sigma_lam2;
    let log_term = n * (TWO_PI * s).ln();
    Ok(if near {
        2.0 * n + n * (params.t0 - t).powi(2) * params.sigma_x2 / s + log_term
    } else {
        n * t * t * params.sigma_lam2 / s + log_term + n * params.t0 * params.t0 / (t * t)
    })
}
