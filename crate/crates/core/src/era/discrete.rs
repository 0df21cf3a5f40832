//! ERA for softmax policies.
//!
//! Each class gets an entropy allocation κ_i that is affine in its current
//! probability and sums to `C = exp(H₀ - 1)`; the new logit is the inverse of
//! `h(y) = -y e^y` at κ_i.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distributions::CategoricalLogits;
use crate::error::{EraError, Result};
use crate::numerics::softmax;

/// Smallest κ passed to the inverse; `h⁻¹(0) = -∞`.
pub const KAPPA_FLOOR: f64 = 1e-12;

/// Relative slack allowed on `C ≤ D·u` before it is treated as a violation;
/// `C` is clamped to `D·u` inside the slack.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraDiscreteConfig {
    pub target_entropy: f64,
    pub tau: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inverse {
    /// Closed-form approximation of `h⁻¹`.
    Approx,
    /// Root-finding oracle.
    Exact,
}

impl EraDiscreteConfig {
    pub const DEFAULT_TAU: f64 = 4.0;

    pub fn new(target_entropy: f64, classes: usize) -> Result<Self> {
        Self::with_tau(target_entropy, Self::DEFAULT_TAU, classes)
    }

    pub fn with_tau(target_entropy: f64, tau: f64, classes: usize) -> Result<Self> {
        let cfg = Self {
            target_entropy,
            tau,
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(EraError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(self.tau >= std::f64::consts::E && self.tau.is_finite()) {
            return Err(EraError::InvalidConfig(format!("tau must be >= e, got {}", self.tau)));
        }
        let h0 = self.target_entropy;
        let d = self.classes as f64;
        if !(h0.is_finite() && h0 <= d.ln()) {
            return Err(EraError::InvalidConfig(format!(
                "target entropy {h0} must be finite and at most log D = {}",
                d.ln()
            )));
        }
        let (u, c) = (self.upper_bound(), (h0 - 1.0).exp());
        if c < u {
            return Err(EraError::InvalidConfig(format!(
                "C = exp(H0 - 1) = {c} is below log(tau)/tau = {u}; raise H0 to at least {}",
                1.0 + u.ln()
            )));
        }
        if c > d * u * (1.0 + BOUND_SLACK) {
            return Err(EraError::InvalidConfig(format!(
                "C = exp(H0 - 1) = {c} exceeds D log(tau)/tau = {}; lower H0 to at most {} or \
                 lower tau toward e",
                d * u,
                1.0 + (d * u).ln()
            )));
        }
        Ok(())
    }

    /// `u = log τ / τ`, the per-class cap on κ.
    pub fn upper_bound(&self) -> f64 {
        self.tau.ln() / self.tau
    }

    /// `C_{H₀} = exp(H₀ - 1)`, clamped to `D·u` when it exceeds it by rounding.
    pub fn c_h0(&self) -> f64 {
        (self.target_entropy - 1.0)
            .exp()
            .min(self.classes as f64 * self.upper_bound())
    }

    /// `(slope, intercept)` with `κ = max(slope·p + intercept, 0)`.
    fn affine(&self) -> (f64, f64) {
        let d = self.classes as f64;
        let (u, c) = (self.upper_bound(), self.c_h0());
        let slope = (u - c / d) / (1.0 - 1.0 / d);
        (slope, (c - slope) / d)
    }
}

fn check_classes(len: usize, cfg: &EraDiscreteConfig) -> Result<()> {
    if len != cfg.classes {
        return Err(EraError::DimensionMismatch {
            context: "era discrete logits",
            expected: cfg.classes,
            got: len,
        });
    }
    Ok(())
}

/// Per-class entropy allocation.
pub fn kappa(z: &CategoricalLogits, cfg: &EraDiscreteConfig) -> Result<Vec<f64>> {
    check_classes(z.len(), cfg)?;
    let (slope, b) = cfg.affine();
    Ok(softmax(z.as_slice())
        .into_iter()
        .map(|p| (slope * p + b).max(0.0))
        .collect())
}

fn check_h_domain(x: f64) -> Result<()> {
    let top = (-1f64).exp();
    if !(x >= 0.0 && x <= top * (1.0 + BOUND_SLACK)) {
        return Err(EraError::Domain(format!("h inverse needs x in (0, 1/e], got {x}")));
    }
    Ok(())
}

/// Approximate inverse of `h(y) = -y eʸ` on the branch `y ≤ -1`.
pub fn h_inv_approx(x: f64) -> Result<f64> {
    check_h_domain(x)?;
    let u = (-1.0 - x.max(KAPPA_FLOOR).ln()).max(0.0);
    Ok(-1.0 - (2.0 * u).sqrt() - 0.75 * u)
}

/// The `y ≤ -1` root of `-y eʸ = x`, by bisection-safeguarded Newton on
/// `g(y) = ln(-y) + y - ln x`, which is increasing on `y < -1`.
pub fn h_inv_exact(x: f64) -> Result<f64> {
    check_h_domain(x)?;
    if x <= 0.0 {
        return Err(EraError::Domain("h inverse of 0 is -inf".into()));
    }
    let lx = x.ln();
    if lx >= -1.0 {
        return Ok(-1.0);
    }
    let g = |y: f64| (-y).ln() + y - lx;
    let (mut lo, mut hi) = (2.0 * lx - 2.0, -1.0);
    let mut y = lx - (-lx).ln();
    if !(lo..=hi).contains(&y) {
        y = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let gy = g(y);
        if gy == 0.0 {
            break;
        }
        if gy < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let step = gy / (1.0 / y + 1.0);
        let newton = y - step;
        y = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) <= 1e-15 * y.abs() || step.abs() <= 1e-16 * y.abs() {
            break;
        }
    }
    Ok(y)
}

/// Adjusted logits whose softmax has entropy at least `H₀` (exactly so with
/// the exact inverse).
pub fn era_logits(
    z: &CategoricalLogits,
    cfg: &EraDiscreteConfig,
    inverse: Inverse,
) -> Result<CategoricalLogits> {
    let k = kappa(z, cfg)?;
    let inv = match inverse {
        Inverse::Approx => h_inv_approx,
        Inverse::Exact => h_inv_exact,
    };
    let mut out = k
        .into_iter()
        .map(|x| inv(x.max(KAPPA_FLOOR)))
        .collect::<Result<Vec<f64>>>()?;
    let m = out.iter().copied().fold(f64::INFINITY, f64::min);
    out.iter_mut().for_each(|v| *v -= m);
    CategoricalLogits::new(out)
}

/// Tape version of [`era_logits`] with the approximate inverse, for `[N, D]`
/// logits.
pub fn era_logits_tape(z: &Tensor, cfg: &EraDiscreteConfig) -> Result<Tensor> {
    check_classes(z.shape().last().copied().unwrap_or(0), cfg)?;
    let (slope, b) = cfg.affine();
    let kappa = z
        .softmax_rows()
        .scale(slope)
        .add_scalar(b)
        .clamp(KAPPA_FLOOR, f64::INFINITY);
    let u = kappa.log().neg().add_scalar(-1.0).clamp(0.0, f64::INFINITY);
    let new = u
        .scale(2.0)
        .sqrt()
        .add(&u.scale(0.75))?
        .neg()
        .add_scalar(-1.0);
    let shift = new.min_rows().detach();
    if new.shape().len() == 2 {
        new.sub_col(&shift)
    } else {
        let s = shift.item();
        Ok(new.add_scalar(-s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Array, Tape};
    use crate::distributions::categorical_entropy;
    use proptest::prelude::*;

    fn logits(v: Vec<f64>) -> CategoricalLogits {
        CategoricalLogits::new(v).unwrap()
    }

    fn spike(d: usize) -> CategoricalLogits {
        let mut z = vec![0.0; d];
        z[0] = 40.0;
        logits(z)
    }

    #[test]
    fn uniform_kappa_splits_budget() {
        for d in [2, 5, 37] {
            let cfg = EraDiscreteConfig::new(0.5, d).unwrap();
            let k = kappa(&logits(vec![0.3; d]), &cfg).unwrap();
            for x in &k {
                assert!((x - cfg.c_h0() / d as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn spike_kappa_values() {
        let cfg = EraDiscreteConfig::new(1.2, 10).unwrap();
        let k = kappa(&spike(10), &cfg).unwrap();
        assert!((k[0] - 0.346_573_590_279_973).abs() < 1e-12);
        for x in &k[1..] {
            assert!((x - 0.097_203_240_875_577_5).abs() < 1e-12);
        }
        assert!((k.iter().sum::<f64>() - 1.221_402_758_160_17).abs() < 1e-12);
    }

    #[test]
    fn listing_form_equals_equation_form() {
        let cfg = EraDiscreteConfig::new(1.7, 12).unwrap();
        let z = logits((0..12).map(|i| (i as f64 * 0.77).sin() * 3.0).collect());
        let (u, c, d) = (cfg.upper_bound(), cfg.c_h0(), 12.0);
        let k = kappa(&z, &cfg).unwrap();
        for (ki, p) in k.iter().zip(z.probs()) {
            let eq = (u + (c - d * u) * (1.0 - p) / (d - 1.0)).max(0.0);
            assert!((ki - eq).abs() < 1e-12);
        }
    }

    #[test]
    fn config_checks() {
        assert!(EraDiscreteConfig::new(0.5, 1).is_err());
        assert!(EraDiscreteConfig::with_tau(0.5, 2.0, 4).is_err());
        assert!(EraDiscreteConfig::new(3.0, 10).is_err()); // C above D·u
        assert!(EraDiscreteConfig::new(-0.5, 10).is_err()); // C below u
        assert!(EraDiscreteConfig::new(10f64.ln(), 10).is_err());
        let edge = EraDiscreteConfig::with_tau(10f64.ln(), std::f64::consts::E, 10).unwrap();
        let k = kappa(&spike(10), &edge).unwrap();
        assert!(k.iter().all(|x| (x - k[0]).abs() < 1e-15));
    }

    #[test]
    fn h_inverse_examples() {
        let inv_e = (-1f64).exp();
        assert!((h_inv_approx(inv_e).unwrap() + 1.0).abs() < 1e-12);
        assert!((h_inv_exact(inv_e).unwrap() + 1.0).abs() < 1e-12);
        assert!((h_inv_approx(0.1).unwrap() + 3.590_992_779_806_38).abs() < 1e-10);
        assert!((h_inv_exact(0.1).unwrap() + 3.577_152_063_957_3).abs() < 1e-10);
        assert!((h_inv_exact(2.0 * (-2f64).exp()).unwrap() + 2.0).abs() < 1e-12);
        assert!(h_inv_approx(0.5).is_err());
        assert!(h_inv_exact(-0.1).is_err());
    }

    #[test]
    fn exact_inverse_residual_is_tiny() {
        for i in 0..=1000 {
            let x = (1e-6f64.ln() + (i as f64 / 1000.0) * (-1.0 - 1e-6f64.ln())).exp();
            let y = h_inv_exact(x).unwrap();
            assert!(y <= -1.0);
            assert!((-y * y.exp() - x).abs() <= 1e-12, "x = {x}");
        }
    }

    #[test]
    fn approx_inverse_error_profile() {
        // The closed form drifts from the exact branch as x shrinks: about
        // 0.014 at x = 0.1 but 0.95 at x = 1e-6. Below x ≈ 0.018 the gap
        // exceeds 0.05.
        let mut worst: f64 = 0.0;
        let mut worst_upper: f64 = 0.0;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..1000 {
            let x = (1e-6f64.ln() + (i as f64 / 999.0) * (-1.0 - 1e-6f64.ln())).exp();
            let a = h_inv_approx(x).unwrap();
            let err = (a - h_inv_exact(x).unwrap()).abs();
            worst = worst.max(err);
            if x >= 0.019 {
                worst_upper = worst_upper.max(err);
            }
            assert!(a > prev);
            prev = a;
        }
        assert!((worst - 0.952_167).abs() < 1e-5, "worst {worst}");
        assert!(worst_upper <= 0.05, "worst above 0.019: {worst_upper}");
    }

    #[test]
    fn spike_entropy_meets_target() {
        let cfg = EraDiscreteConfig::new(1.2, 10).unwrap();
        let out = era_logits(&spike(10), &cfg, Inverse::Exact).unwrap();
        let h = categorical_entropy(&out);
        assert!((h - 1.773_54).abs() < 1e-4);
        let k: f64 = kappa(&spike(10), &cfg).unwrap().iter().sum();
        assert!(h >= 1.0 + k.ln() - 1e-12);
        let uni = era_logits(&logits(vec![1.0; 10]), &cfg, Inverse::Approx).unwrap();
        assert!((categorical_entropy(&uni) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_value_path() {
        let cfg = EraDiscreteConfig::new(1.0, 4).unwrap();
        let rows = [vec![0.3, -2.0, 1.1, 0.0], vec![9.0, -5.0, 0.0, 2.0]];
        let tape = Tape::new();
        let t = tape.constant(Array::from_rows(&rows).unwrap());
        let out = era_logits_tape(&t, &cfg).unwrap().value();
        for (r, row) in rows.iter().enumerate() {
            let v = era_logits(&logits(row.clone()), &cfg, Inverse::Approx).unwrap();
            for j in 0..4 {
                assert!((out.row(r)[j] - v.as_slice()[j]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn kappa_bounds(
            z in prop::collection::vec(-30.0f64..30.0, 2..40),
            frac in 0.0f64..1.0,
            tau in 2.72f64..12.0,
        ) {
            let d = z.len() as f64;
            let u = tau.ln() / tau;
            let h0 = 1.0 + u.ln() + frac * d.ln();
            let cfg = EraDiscreteConfig::with_tau(h0, tau, z.len()).unwrap();
            let k = kappa(&logits(z), &cfg).unwrap();
            prop_assert!(k.iter().all(|&x| (0.0..=u + 1e-15).contains(&x)));
            prop_assert!(k.iter().sum::<f64>() >= cfg.c_h0() - 1e-12);
        }

        #[test]
        fn shift_invariance(z in prop::collection::vec(-10.0f64..10.0, 5), c in -100.0f64..100.0) {
            let cfg = EraDiscreteConfig::new(1.0, 5).unwrap();
            let a = era_logits(&logits(z.clone()), &cfg, Inverse::Approx).unwrap();
            let b = era_logits(&logits(z.iter().map(|x| x + c).collect()), &cfg, Inverse::Approx).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
