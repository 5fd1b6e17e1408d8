//! Special functions used by the statistical formulas: Gaussian tail and
//! quantile, error function, χ² distribution, and Kummer's ₁F₁.
//!
//! Everything is implemented locally in double precision.

use crate::error::{Error, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// A probability value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Probability(f64);

impl Probability {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Probability(p))
        } else {
            Err(Error::Domain(format!("probability {p} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// erf(z) for z ≥ 0 via the all-positive series
/// erf(z) = 2/√π · e^{-z²} Σ 2^k z^{2k+1} / (1·3·…·(2k+1)).
fn erf_series(z: f64) -> f64 {
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= 2.0 * z2 / (2.0 * k + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-z2).exp() * sum
}

/// erfc(z) for z ≥ 2 via the Laplace continued fraction (modified Lentz).
fn erfc_cf(z: f64) -> f64 {
    // erfc(z) = e^{-z²}/√π · 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + …))))
    let tiny = 1e-300;
    let mut f = z;
    let mut c = z;
    let mut d = 0.0;
    for k in 1..5000 {
        let a = k as f64 * 0.5;
        d = z + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = z + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-z * z).exp() * FRAC_1_SQRT_PI / f
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x.abs();
    let v = if z < 2.0 { erf_series(z) } else { 1.0 - erfc_cf(z) };
    v.copysign(x)
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// Q(x) = P(N(0,1) > x), the Gaussian upper tail.
pub fn gauss_upper_tail(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 0.0;
    }
    if x == f64::NEG_INFINITY {
        return 1.0;
    }
    0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Inverse of [`gauss_upper_tail`]: returns x with Q(x) = p.
pub fn gauss_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("gauss_quantile needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Q is strictly decreasing; plain bisection down to adjacent doubles.
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if gauss_upper_tail(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (qlo, qhi) = (gauss_upper_tail(lo), gauss_upper_tail(hi));
    Ok(if (qlo - p).abs() <= (qhi - p).abs() { lo } else { hi })
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln|Γ(x)|.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let s = (std::f64::consts::PI * x).sin().abs();
        return std::f64::consts::PI.ln() - s.ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + a.ln()
}

/// Γ(x) for real x (not a pole).
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        let s = (std::f64::consts::PI * x).sin();
        return std::f64::consts::PI / (s * gamma(1.0 - x));
    }
    ln_gamma(x).exp()
}

/// 1/Γ(x), zero at the poles.
fn recip_gamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        0.0
    } else {
        1.0 / gamma(x)
    }
}

/// Regularized lower incomplete gamma P(a, x).
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_pref = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..100_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_pref).exp().min(1.0)
    } else {
        // continued fraction for Q(a, x), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..100_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (log_pref + h.ln()).exp()).max(0.0)
    }
}

/// CDF of the χ² distribution with `k` degrees of freedom.
pub fn chi2_cdf(x: f64, k: u32) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("chi2_cdf needs x >= 0, got {x}")));
    }
    if k == 0 {
        return Err(Error::Domain("chi2_cdf needs k >= 1".into()));
    }
    if x == f64::INFINITY {
        return Ok(1.0);
    }
    Ok(reg_lower_gamma(0.5 * k as f64, 0.5 * x))
}

/// Inverse χ² CDF: bracketed bisection seeded by Wilson–Hilferty.
pub fn chi2_quantile(p: f64, k: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("chi2_quantile needs 0 <= p < 1, got {p}")));
    }
    if k == 0 {
        return Err(Error::Domain("chi2_quantile needs k >= 1".into()));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let kf = k as f64;
    let z = -gauss_quantile(p)?;
    let c = 2.0 / (9.0 * kf);
    let seed = (kf * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-300);
    let cdf = |x: f64| reg_lower_gamma(0.5 * kf, 0.5 * x);
    let mut lo = 0.5 * seed;
    while cdf(lo) > p {
        lo *= 0.5;
        if lo < 1e-300 {
            lo = 0.0;
            break;
        }
    }
    let mut hi = 2.0 * seed + 1.0;
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if (cdf(lo) - p).abs() <= (cdf(hi) - p).abs() { lo } else { hi })
}

fn kummer_series(a: f64, b: f64, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..10_000 {
        let kf = k as f64;
        term *= (a + kf) / (b + kf) * x / (kf + 1.0);
        sum += term;
        if term == 0.0 || (term.abs() < 1e-17 * sum.abs() && kf > x.abs()) {
            break;
        }
    }
    sum
}

/// Leading asymptotic form of ₁F₁(a; b; −y) for large y > 0:
/// Γ(b)/Γ(b−a) · y^{−a} Σ (a)_s (a−b+1)_s / s! · y^{−s}.
fn kummer_neg_asymptotic(a: f64, b: f64, y: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut prev = f64::INFINITY;
    for s in 0..200 {
        let sf = s as f64;
        let next = term * (a + sf) * (a - b + 1.0 + sf) / ((sf + 1.0) * y);
        if next.abs() >= prev || next == 0.0 {
            break;
        }
        prev = next.abs();
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    gamma(b) * recip_gamma(b - a) * y.powf(-a) * sum
}

/// Confluent hypergeometric function of the first kind, ₁F₁(a; b; x).
///
/// Power series for |x| ≤ 50 (through the Kummer transform when x < 0),
/// asymptotic expansion beyond that.
pub fn kummer_1f1(a: f64, b: f64, x: f64) -> Result<f64> {
    if b <= 0.0 && b == b.floor() {
        return Err(Error::Domain(format!("kummer_1f1: b = {b} is a nonpositive integer")));
    }
    if x.abs() > 700.0 || !x.is_finite() {
        return Err(Error::Range(format!("kummer_1f1: |x| = {} exceeds 700", x.abs())));
    }
    if a <= 0.0 && a == a.floor() {
        return Ok(kummer_series(a, b, x));
    }
    let v = if x >= 0.0 {
        if x <= 50.0 {
            kummer_series(a, b, x)
        } else {
            x.exp() * kummer_neg_asymptotic(b - a, b, x)
        }
    } else if -x <= 50.0 {
        x.exp() * kummer_series(b - a, b, -x)
    } else {
        kummer_neg_asymptotic(a, b, -x)
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Range(format!("kummer_1f1({a}, {b}, {x}) overflowed")))
    }
}
