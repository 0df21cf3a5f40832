//! Scalar special functions, stable primitives, and brute-force oracles.
//!
//! Everything here is a pure function of its inputs. The quadrature and
//! entropy helpers are the ground truth the rest of the crate is tested
//! against, so they deliberately avoid sharing code paths with the
//! closed-form entropy formulas in [`crate::distributions`].

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use crate::error::{EraError, Result};

/// `1 / sqrt(2π)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// `log sqrt(2π e)`, the per-dimension constant in the Gaussian entropy.
pub const LN_SQRT_2PI_E: f64 = 1.418_938_533_204_672_7;
/// `log sqrt(2π)`
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Natural log of the standard normal density.
#[inline]
pub fn normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let v = if ax < 2.0 { erf_series(ax) } else { 1.0 - erfc_cf(ax) };
    v.copysign(x)
}

/// Complementary error function, accurate in relative terms deep into the
/// upper tail.
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

// erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (1*3*...*(2n+1)).
// All terms are positive, so there is no cancellation for x >= 0.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// Continued fraction erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
// evaluated with the modified Lentz algorithm. Used for x >= 2.
fn erfc_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..5000 {
        let a = n as f64 * 0.5;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * PI.sqrt())
}

/// Standard normal CDF `Φ(x)`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)`, without cancellation for large `x`.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// `Φ(b) - Φ(a)` for `a <= b`, computed from whichever tail avoids
/// cancellation.
pub fn normal_interval_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        normal_sf(a) - normal_sf(b)
    } else if b < 0.0 {
        normal_cdf(b) - normal_cdf(a)
    } else {
        1.0 - normal_cdf(a) - normal_sf(b)
    }
}

/// Inverse standard normal CDF.
///
/// Acklam's rational approximation followed by one Halley refinement step on
/// [`normal_cdf`]. Returns `±∞` at the endpoints and NaN outside `[0, 1]`.
pub fn normal_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        // 1 - p is exact here
        return -lower_quantile(1.0 - p);
    }
    lower_quantile(p)
}

fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };

    // Halley step
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 - tanh(u)^2)` in the overflow-free form `2(log 2 - u - softplus(-2u))`.
#[inline]
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Max-shifted `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(EraError::EmptyInput("log_sum_exp"));
    }
    Ok(log_sum_exp_unchecked(xs))
}

pub(crate) fn log_sum_exp_unchecked(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax probabilities of a logit vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_unchecked(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Interval and panel count for composite Simpson quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    lower: f64,
    upper: f64,
    panels: usize,
}

impl QuadratureSpec {
    /// Panel count used by the entropy oracles.
    pub const DEFAULT_PANELS: usize = 4096;

    pub fn new(lower: f64, upper: f64, panels: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(EraError::InvalidQuadrature(format!(
                "need finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        if panels < 2 || !panels.is_multiple_of(2) {
            return Err(EraError::InvalidQuadrature(format!(
                "panels must be even and >= 2, got {panels}"
            )));
        }
        Ok(Self {
            lower,
            upper,
            panels,
        })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn panels(&self) -> usize {
        self.panels
    }
}

/// Composite Simpson rule over `spec`.
pub fn simpson_integrate<F: Fn(f64) -> f64>(f: F, spec: &QuadratureSpec) -> f64 {
    let n = spec.panels;
    let h = (spec.upper - spec.lower) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let x = spec.lower + i as f64 * h;
        if i % 2 == 1 {
            odd += f(x);
        } else {
            even += f(x);
        }
    }
    h / 3.0 * (f(spec.lower) + f(spec.upper) + 4.0 * odd + 2.0 * even)
}

/// Differential entropy `∫ -p log p` of a density by Simpson quadrature.
/// Points where the density underflows to zero contribute nothing.
pub fn entropy_by_quadrature<F: Fn(f64) -> f64>(density: F, spec: &QuadratureSpec) -> f64 {
    simpson_integrate(
        |x| {
            let p = density(x);
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        },
        spec,
    )
}

/// Shannon entropy of an explicit probability vector by direct summation.
pub fn entropy_by_enumeration(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pdf_values() {
        assert!((normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(normal_pdf(1.3), normal_pdf(-1.3));
        assert!((normal_pdf(2.0) - 0.053_990_966_5).abs() < 1e-10);
    }

    #[test]
    fn cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.841_344_746_1).abs() < 1e-10);
        for &x in &[-7.5, -3.0, -1.1, 0.3, 2.2, 5.0] {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cdf_matches_quadrature_of_pdf() {
        // Φ(1) = 1/2 + ∫_0^1 φ
        let spec = QuadratureSpec::new(0.0, 1.0, 256).unwrap();
        let oracle = 0.5 + simpson_integrate(normal_pdf, &spec);
        assert!((normal_cdf(1.0) - oracle).abs() < 1e-12);
        // deep tail via substitution t = 1/x is avoided; integrate on [-40, -8]
        let spec = QuadratureSpec::new(-40.0, -8.0, 20_000).unwrap();
        let tail = simpson_integrate(normal_pdf, &spec);
        assert!(((normal_cdf(-8.0) - tail) / tail).abs() < 1e-8);
    }

    #[test]
    fn erf_reference_points() {
        // values from a 30-digit reference evaluation
        let cases = [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (1.999, 0.995_301_556_651_370_5),
            (2.0, 0.995_322_265_018_952_7),
            (3.0, 0.999_977_909_503_001_4),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-15, "erf({x})");
            assert!((erf(-x) + want).abs() < 1e-15);
        }
        // erfc(5) = 1.5374597944280348e-12, relative accuracy in the tail
        assert!((erfc(5.0) / 1.537_459_794_428_034_8e-12 - 1.0).abs() < 1e-13);
    }

    #[test]
    fn cdf_monotone_on_grid() {
        let mut prev = 0.0;
        for i in 0..=4000 {
            let x = -20.0 + i as f64 * 0.01;
            let c = normal_cdf(x);
            assert!(c >= prev, "non-monotone at {x}");
            prev = c;
        }
    }

    #[test]
    fn cdf_derivative_is_pdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-6.0..6.0);
            let d = (normal_cdf(x + h) - normal_cdf(x - h)) / (2.0 * h);
            assert!((d - normal_pdf(x)).abs() <= 1e-6, "x = {x}");
        }
    }

    #[test]
    fn quantile_round_trip() {
        let mut u = 1e-12;
        while u < 1.0 - 1e-12 {
            let x = normal_quantile(u);
            assert!((normal_cdf(x) - u).abs() <= 1e-10, "u = {u}");
            u *= 1.37;
            if u > 0.5 {
                break;
            }
        }
        for i in 1..1000 {
            let u = i as f64 / 1000.0;
            assert!((normal_cdf(normal_quantile(u)) - u).abs() <= 1e-10);
        }
        let hi = 1.0 - 1e-12;
        assert!((normal_cdf(normal_quantile(hi)) - hi).abs() <= 1e-10);
        assert!(normal_quantile(1.5).is_nan());
    }

    #[test]
    fn interval_mass_tails() {
        // both bounds deep in the upper tail: mass must keep relative precision
        let m = normal_interval_mass(6.0, 7.0);
        let want = normal_sf(6.0) - normal_sf(7.0);
        assert!(m > 0.0 && ((m - want) / want).abs() < 1e-14);
        assert!((normal_interval_mass(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-15);
    }

    #[test]
    fn softplus_asymptotes() {
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        let s = softplus(-100.0);
        assert!(s > 0.0 && (s / (-100f64).exp() - 1.0).abs() < 1e-12);
        assert!(softplus(1000.0).is_finite() && softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - LN_2).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - (1000.0 + LN_2)).abs() < 1e-12);
        assert!((log_sum_exp(&[3f64.ln(), 0.0]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(log_sum_exp(&[]), Err(EraError::EmptyInput(_))));
    }

    #[test]
    fn simpson_examples() {
        let s = QuadratureSpec::new(0.0, 1.0, 2).unwrap();
        assert!((simpson_integrate(|_| 1.0, &s) - 1.0).abs() < 1e-15);
        assert!((simpson_integrate(|x| x * x, &s) - 1.0 / 3.0).abs() < 1e-15);
        let s = QuadratureSpec::new(-8.0, 8.0, 4096).unwrap();
        assert!((simpson_integrate(normal_pdf, &s) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadrature_spec_validation() {
        assert!(QuadratureSpec::new(1.0, 0.0, 4).is_err());
        assert!(QuadratureSpec::new(0.0, 1.0, 3).is_err());
        assert!(QuadratureSpec::new(0.0, 1.0, 0).is_err());
        assert!(QuadratureSpec::new(0.0, f64::INFINITY, 4).is_err());
    }

    #[test]
    fn stable_tanh_correction_matches_naive() {
        for i in -500..=500 {
            let u = i as f64 * 0.01;
            let naive = (1.0 - u.tanh().powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - naive).abs() < 1e-8, "u = {u}");
        }
        assert!(log_one_minus_tanh_sq(30.0).is_finite());
        assert_eq!(log_one_minus_tanh_sq(0.0), 0.0);
    }

    #[test]
    fn enumeration_entropy() {
        assert!((entropy_by_enumeration(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy_by_enumeration(&[1.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn log_sum_exp_shift(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&xs).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }
}
