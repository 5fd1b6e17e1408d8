//! Model parameters, power ratios, and the embed → gain → noise pipeline.
//!
//! Power convention: σ_W² = α²σ_Λ² = 1, hence σ_Λ² = 1/α², σ_X² = DWR and
//! σ_N² = 1/WNR (linear).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lattice::LatticeKind;

/// HLR (dB) above which the high-HLR approximations are considered valid.
pub const HLR_LARGE_DB: f64 = 25.0;

pub fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn from_db(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub n: usize,
    pub sigma_x2: f64,
    pub sigma_n2: f64,
    pub sigma_lam2: f64,
    pub alpha: f64,
    pub t0: f64,
}

/// Regime flags derived from the power ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeFlags {
    pub hlr_large: bool,
    pub scr_small: bool,
    pub tnlr_below_one: bool,
}

impl ModelParams {
    pub fn new(n: usize, sigma_x2: f64, sigma_n2: f64, sigma_lam2: f64, alpha: f64, t0: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("n must be positive".into()));
        }
        for (name, v) in [("sigma_x2", sigma_x2), ("sigma_n2", sigma_n2), ("sigma_lam2", sigma_lam2), ("t0", t0)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(ModelParams { n, sigma_x2, sigma_n2, sigma_lam2, alpha, t0 })
    }

    pub fn with_t0(&self, t0: f64) -> Self {
        ModelParams { t0, ..*self }
    }

    pub fn with_n(&self, n: usize) -> Self {
        ModelParams { n, ..*self }
    }

    /// Embedding power α²σ_Λ².
    pub fn sigma_w2(&self) -> f64 {
        self.alpha * self.alpha * self.sigma_lam2
    }

    pub fn dwr(&self) -> f64 {
        self.sigma_x2 / self.sigma_w2()
    }

    pub fn wnr(&self) -> f64 {
        self.sigma_w2() / self.sigma_n2
    }

    pub fn hlr(&self) -> f64 {
        self.sigma_x2 / self.sigma_lam2
    }

    pub fn scr(&self) -> f64 {
        let a1 = 1.0 - self.alpha;
        a1 * a1 * self.sigma_lam2 * self.t0 * self.t0 / self.sigma_n2
    }

    pub fn tnlr(&self) -> f64 {
        let a1 = 1.0 - self.alpha;
        a1 * a1 + self.sigma_n2 / (self.t0 * self.t0 * self.sigma_lam2)
    }

    pub fn dwr_db(&self) -> f64 {
        db(self.dwr())
    }
    pub fn wnr_db(&self) -> f64 {
        db(self.wnr())
    }
    pub fn hlr_db(&self) -> f64 {
        db(self.hlr())
    }
    pub fn scr_db(&self) -> f64 {
        db(self.scr())
    }
    pub fn tnlr_db(&self) -> f64 {
        db(self.tnlr())
    }

    pub fn flags(&self) -> RegimeFlags {
        RegimeFlags {
            hlr_large: self.hlr_db() >= HLR_LARGE_DB,
            scr_small: self.scr() < 1.0,
            tnlr_below_one: self.tnlr() < 1.0,
        }
    }

    /// σ_W²t0²/(σ_N² + σ_W²t0²).
    pub fn alpha_no_bias(&self) -> f64 {
        let w = self.sigma_w2() * self.t0 * self.t0;
        w / (self.sigma_n2 + w)
    }

    /// Largest α keeping TNLR below one: 2σ_W²t0²/(σ_N² + σ_W²t0²).
    pub fn alpha_tnlr_limit(&self) -> f64 {
        2.0 * self.alpha_no_bias()
    }

    /// Effective host-plus-lattice variance σ_X² + α²σ_Λ².
    pub fn s_var(&self) -> f64 {
        self.sigma_x2 + self.sigma_w2()
    }
}

/// Builds model parameters from dB ratios under σ_W² = 1 and rescales the
/// lattice family to σ_Λ² = 1/α² at dimension `n`.
pub fn derive_params(
    dwr_db: f64,
    wnr_db: f64,
    alpha: f64,
    t0: f64,
    n: usize,
    lattice: &LatticeKind,
) -> Result<(ModelParams, LatticeKind)> {
    if !dwr_db.is_finite() || !wnr_db.is_finite() {
        return Err(Error::Domain("DWR and WNR must be finite".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let sigma_lam2 = 1.0 / (alpha * alpha);
    let params = ModelParams::new(n, from_db(dwr_db), 1.0 / from_db(wnr_db), sigma_lam2, alpha, t0)?;
    let lat = lattice.scaled_to(sigma_lam2, n)?;
    Ok((params, lat))
}

/// Bias-free α for σ_W² = 1: t0²/(σ_N² + t0²).
pub fn alpha_no_bias(wnr_db: f64, t0: f64) -> f64 {
    let sn2 = 1.0 / from_db(wnr_db);
    t0 * t0 / (sn2 + t0 * t0)
}

/// y = (1−α)x + α[Q_Λ(x−d) + d].
pub fn embed(x: &[f64], d: &[f64], alpha: f64, lattice: &LatticeKind) -> Result<Vec<f64>> {
    if x.len() != d.len() {
        return Err(Error::Shape(format!("host has {} samples, dither {}", x.len(), d.len())));
    }
    let diff: Vec<f64> = x.iter().zip(d).map(|(a, b)| a - b).collect();
    let q = lattice.quantize(&diff)?;
    Ok(x.iter().zip(q.iter().zip(d)).map(|(&xi, (&qi, &di))| (1.0 - alpha) * xi + alpha * (qi + di)).collect())
}

pub(crate) fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// z = t0·y + noise, noise ∼ N(0, σ_N² I).
pub fn run_channel<R: rand::Rng + ?Sized>(y: &[f64], t0: f64, sigma_n2: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(t0 > 0.0) {
        return Err(Error::Domain(format!("t0 must be positive, got {t0}")));
    }
    let sd = sigma_n2.sqrt();
    Ok(y.iter().map(|&v| t0 * v + sd * std_normal(rng)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub x: Vec<f64>,
    pub d: Vec<f64>,
    pub noise: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub seed: u64,
}

/// Seed of trial `index` under `master`.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    master ^ index
}

pub fn trial_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Draws host, dither and noise (in that order) from the stream of `seed`.
pub fn make_trial(params: &ModelParams, lattice: &LatticeKind, seed: u64) -> Result<TrialData> {
    let n = params.n;
    lattice.check_dim(n)?;
    let mut rng = trial_rng(seed);
    let sx = params.sigma_x2.sqrt();
    let x: Vec<f64> = (0..n).map(|_| sx * std_normal(&mut rng)).collect();
    let d = lattice.dither_sample(n, &mut rng)?;
    let sn = params.sigma_n2.sqrt();
    let noise: Vec<f64> = (0..n).map(|_| sn * std_normal(&mut rng)).collect();
    let y = embed(&x, &d, params.alpha, lattice)?;
    let z = y.iter().zip(&noise).map(|(yi, ni)| params.t0 * yi + ni).collect();
    Ok(TrialData { x, d, noise, y, z, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar() -> LatticeKind {
        LatticeKind::scalar(1.0).unwrap()
    }

    #[test]
    fn caption_ratios() {
        let (p, _) = derive_params(40.0, 3.0, alpha_no_bias(3.0, 0.8), 0.8, 100, &scalar()).unwrap();
        assert!((p.hlr_db() - 34.9765).abs() < 1e-4);
        assert!((p.scr_db() + 1.0618).abs() < 1e-3);
        assert!((p.tnlr_db() + 3.5736).abs() < 1e-3);
        assert!((p.dwr_db() - 40.0).abs() < 1e-12 && (p.wnr_db() - 3.0).abs() < 1e-12);
        let (p, _) = derive_params(30.0, 0.0, alpha_no_bias(0.0, 0.7), 0.7, 100, &scalar()).unwrap();
        assert!((p.scr_db() - 3.0980).abs() < 1e-3);
        assert!((p.tnlr_db() + 1.7319).abs() < 1e-3);
        let (p, _) = derive_params(25.0, -2.0, 1.0, 0.9, 10, &scalar()).unwrap();
        assert_eq!(p.scr(), 0.0);
        assert!((p.hlr_db() - 25.0).abs() < 1e-12);
        assert!(derive_params(25.0, 0.0, 0.0, 0.9, 10, &scalar()).is_err());
        assert!(derive_params(25.0, 0.0, 0.5, -0.9, 10, &scalar()).is_err());
    }

    #[test]
    fn tnlr_matches_wnr_form() {
        let (p, _) = derive_params(33.0, 1.5, 0.45, 1.2, 10, &scalar()).unwrap();
        let w = from_db(1.5);
        assert!((p.tnlr() - (0.55f64.powi(2) + 0.45f64.powi(2) / (w * 1.44))).abs() < 1e-14);
        assert!((p.hlr() - 0.45f64.powi(2) * from_db(33.0)).abs() < 1e-9);
        assert!((p.scr() - 0.55f64.powi(2) / 0.45f64.powi(2) * w * 1.44).abs() < 1e-12);
    }

    #[test]
    fn no_bias_alpha() {
        assert!((alpha_no_bias(3.0, 0.8) - 0.5608).abs() < 1e-4);
        assert!((alpha_no_bias(0.0, 0.7) - 0.3289).abs() < 1e-4);
        assert!(alpha_no_bias(200.0, 1.0) > 1.0 - 1e-15);
        let (p, _) = derive_params(40.0, 3.0, 0.3, 0.8, 10, &scalar()).unwrap();
        assert!((p.alpha_no_bias() - alpha_no_bias(3.0, 0.8)).abs() < 1e-14);
    }

    #[test]
    fn embed_examples() {
        let l = LatticeKind::scalar(2.0).unwrap();
        let y = embed(&[0.3], &[0.0], 0.5, &l).unwrap();
        assert!((y[0] - 0.15).abs() < 1e-15);
        let x = [0.3, -2.7, 5.1];
        let d = [0.2, -0.4, 0.9];
        let y = embed(&x, &d, 1.0, &l).unwrap();
        let q = l.quantize(&[0.1, -2.3, 4.2]).unwrap();
        for i in 0..3 {
            assert!((y[i] - (q[i] + d[i])).abs() < 1e-15);
        }
        assert!(embed(&x, &d[..2], 0.5, &l).is_err());
    }

    #[test]
    fn noiseless_unit_gain_gives_lattice_point() {
        let (p, l) = derive_params(30.0, 200.0, 1.0, 1.0, 16, &scalar()).unwrap();
        let mut t = make_trial(&p, &l, 5).unwrap();
        t.d.iter_mut().for_each(|v| *v = 0.0);
        let y = embed(&t.x, &t.d, 1.0, &l).unwrap();
        assert!(l.mod_reduce(&y, 1.0).unwrap().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn trials_are_deterministic() {
        let conv = LatticeKind::conv_coset(1.0).unwrap();
        for lat in [scalar(), conv] {
            let (p, l) = derive_params(40.0, 3.0, 0.56, 0.8, 64, &lat).unwrap();
            assert_eq!(make_trial(&p, &l, 42).unwrap(), make_trial(&p, &l, 42).unwrap());
            assert_ne!(make_trial(&p, &l, 42).unwrap().z, make_trial(&p, &l, 43).unwrap().z);
        }
    }

    #[test]
    fn embedding_power() {
        let (p, l) = derive_params(40.0, 3.0, 0.56, 0.8, 16, &scalar()).unwrap();
        let mut acc = 0.0;
        for s in 0..10_000 {
            let t = make_trial(&p, &l, s).unwrap();
            acc += t.x.iter().zip(&t.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 16.0;
        }
        assert!((acc / 10_000.0 / p.sigma_w2() - 1.0).abs() < 0.02);
    }

    #[test]
    fn received_power() {
        let (p, l) = derive_params(20.0, 0.0, 0.6, 0.9, 1000, &scalar()).unwrap();
        let mut acc = 0.0;
        for s in 0..100 {
            let t = make_trial(&p, &l, 1000 + s).unwrap();
            acc += t.z.iter().map(|v| v * v).sum::<f64>() / 1000.0;
        }
        let expect = p.s_var() * p.t0 * p.t0 + p.sigma_n2;
        assert!((acc / 100.0 / expect - 1.0).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn tnlr_identity_chain(dwr in 10.0f64..50.0, wnr in -10.0f64..10.0, alpha in 0.01f64..1.0, t0 in 0.1f64..3.0) {
            let (p, _) = derive_params(dwr, wnr, alpha, t0, 4, &scalar()).unwrap();
            let limit = 2.0 * p.sigma_w2() * t0 * t0 / (p.sigma_n2 + p.sigma_w2() * t0 * t0);
            prop_assume!((alpha - limit).abs() > 1e-12);
            prop_assert_eq!(p.tnlr() < 1.0, alpha < limit);
            let f = p.flags();
            prop_assert_eq!(f.hlr_large, 10.0 * (p.sigma_x2 / p.sigma_lam2).log10() >= 25.0);
            let scr = (1.0 - alpha).powi(2) * p.sigma_lam2 * t0 * t0 / p.sigma_n2;
            prop_assert_eq!(f.scr_small, scr < 1.0);
        }

        #[test]
        fn embed_alternate_form(x in proptest::collection::vec(-30.0f64..30.0, 16), alpha in 0.05f64..1.0, seed in 0u64..1000) {
            for lat in [LatticeKind::scalar(1.7).unwrap(), LatticeKind::conv_coset(0.9).unwrap()] {
                let mut rng = trial_rng(seed);
                let d = lat.dither_sample(16, &mut rng).unwrap();
                let y = embed(&x, &d, alpha, &lat).unwrap();
                let diff: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - b).collect();
                let r = lat.mod_reduce(&diff, 1.0).unwrap();
                for i in 0..16 {
                    prop_assert!((y[i] - (x[i] - alpha * r[i])).abs() < 1e-12 * (1.0 + x[i].abs()));
                }
            }
        }
    }
}
