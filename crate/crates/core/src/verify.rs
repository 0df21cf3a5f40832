//! Executable property suites with fixed seeds.
//!
//! Every property reports the worst value of its measure over all cases
//! together with the threshold it is held to.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_check, Array};
use crate::distributions::{
    categorical_entropy, categorical_entropy_of, gaussian_entropy, standard_normal,
    truncated_entropy, CategoricalLogits, GaussianPolicyParams,
};
use crate::era::continuous::{delta_tn_analytic, era_activate, era_log_sigma_tape, EraContinuousConfig};
use crate::era::discrete::{
    era_logits, era_logits_tape, h_inv_approx, h_inv_exact, kappa, EraDiscreteConfig, Inverse,
};
use crate::era::llm::{decomposition_check, era_objective_tape, Branch, EraLlmConfig, ResponseBatch};
use crate::error::{EraError, Result};
use crate::numerics::{
    entropy_by_quadrature, log_sum_exp, normal_cdf, normal_pdf, normal_quantile, QuadratureSpec,
    LN_SQRT_2PI_E,
};
use crate::policy::truncated_log_prob;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Numerics,
    Continuous,
    Discrete,
    Llm,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["numerics", "continuous", "discrete", "llm", "all"];
}

impl FromStr for Suite {
    type Err = EraError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "numerics" => Suite::Numerics,
            "continuous" => Suite::Continuous,
            "discrete" => Suite::Discrete,
            "llm" => Suite::Llm,
            "all" => Suite::All,
            other => {
                return Err(EraError::InvalidConfig(format!(
                    "unknown suite `{other}`; expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Suite::Numerics, Suite::Continuous, Suite::Discrete, Suite::Llm, Suite::All]
            .iter()
            .position(|s| s == self)
            .expect("listed");
        f.write_str(Suite::NAMES[i])
    }
}

/// How a measure is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub suite: Suite,
    pub property: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub measure: &'static str,
    pub value: f64,
    pub bound: Bound,
    pub threshold: f64,
    pub seconds: f64,
}

impl PropertyResult {
    /// `name: pass (measure=value, threshold op t)`.
    pub fn line(&self) -> String {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        format!(
            "{}: {} ({}={:.6e} {op} {:e}, {} cases, {:.2}s)",
            self.property,
            if self.passed { "pass" } else { "fail" },
            self.measure,
            self.value,
            self.threshold,
            self.cases,
            self.seconds
        )
    }
}

struct Outcome {
    cases: usize,
    measure: &'static str,
    value: f64,
    bound: Bound,
    threshold: f64,
}

fn at_most(cases: usize, measure: &'static str, value: f64, threshold: f64) -> Outcome {
    Outcome {
        cases,
        measure,
        value,
        bound: Bound::AtMost,
        threshold,
    }
}

fn at_least(cases: usize, measure: &'static str, value: f64, threshold: f64) -> Outcome {
    Outcome {
        cases,
        measure,
        value,
        bound: Bound::AtLeast,
        threshold,
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<Outcome>;

fn checks(suite: Suite) -> Vec<(&'static str, Check)> {
    match suite {
        Suite::Numerics => vec![
            ("cdf_monotone", cdf_monotone as Check),
            ("cdf_derivative", cdf_derivative),
            ("quantile_round_trip", quantile_round_trip),
            ("log_sum_exp_shift", log_sum_exp_shift),
            ("simpson_normalization", simpson_normalization),
        ],
        Suite::Continuous => vec![
            ("prop_b1_bound", prop_b1_bound as Check),
            ("sigma_within_bounds", sigma_within_bounds),
            ("truncated_entropy_quadrature", truncated_entropy_quadrature),
            ("delta_identity", delta_identity),
            ("truncation_lowers_entropy", truncation_lowers_entropy),
            ("sigma_hat_shift_invariance", sigma_hat_shift_invariance),
            ("gradcheck_log_prob_path", gradcheck_log_prob_path),
        ],
        Suite::Discrete => vec![
            ("prop_b2_exact_bound", prop_b2_exact_bound as Check),
            ("prop_b2_approx_deficit", prop_b2_approx_deficit),
            ("h_inv_approx_grid", h_inv_approx_grid),
            ("h_inv_endpoint", h_inv_endpoint),
            ("kappa_bounds", kappa_bounds),
            ("argmax_preserved", argmax_preserved),
            ("logit_shift_invariance", logit_shift_invariance),
            ("gradcheck_cross_entropy_path", gradcheck_cross_entropy_path),
        ],
        Suite::Llm => vec![
            ("decomposition_identity", decomposition_identity as Check),
            ("decomposition_middle_branch", decomposition_middle_branch),
            ("sharpening_monotone", sharpening_monotone),
            ("branch_partition", branch_partition),
            ("vanilla_objective_identity", vanilla_objective_identity),
            ("gradcheck_objective_path", gradcheck_objective_path),
        ],
        Suite::All => [Suite::Numerics, Suite::Continuous, Suite::Discrete, Suite::Llm]
            .into_iter()
            .flat_map(checks)
            .collect(),
    }
}

fn suite_of(property: &str) -> Suite {
    for s in [Suite::Numerics, Suite::Continuous, Suite::Discrete, Suite::Llm] {
        if checks(s).iter().any(|(n, _)| *n == property) {
            return s;
        }
    }
    Suite::All
}

fn execute(name: &'static str, check: Check, seed: u64) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let start = Instant::now();
    let o = check(&mut rng)?;
    let passed = match o.bound {
        Bound::AtMost => o.value <= o.threshold,
        Bound::AtLeast => o.value >= o.threshold,
    };
    Ok(PropertyResult {
        suite: suite_of(name),
        property: name,
        passed,
        cases: o.cases,
        measure: o.measure,
        value: o.value,
        bound: o.bound,
        threshold: o.threshold,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every property of `suite`. Each property draws from its own RNG
/// derived from `seed` and its name, so results do not depend on which
/// suites run.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<PropertyResult>> {
    checks(suite)
        .into_iter()
        .map(|(name, check)| execute(name, check, seed))
        .collect()
}

/// Runs a single named property.
pub fn run_property(name: &str, seed: u64) -> Result<PropertyResult> {
    let (name, check) = checks(Suite::All)
        .into_iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| EraError::InvalidConfig(format!("unknown property `{name}`")))?;
    execute(name, check, seed)
}

/// Names of every property in `suite`.
pub fn property_names(suite: Suite) -> Vec<&'static str> {
    checks(suite).into_iter().map(|(n, _)| n).collect()
}

/// FNV-1a, to derive per-property seeds from names.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Properties whose stated threshold the current formulas cannot meet.
///
/// The closed-form inverse `-1 - √(2u) - 3u/4`, `u = -1 - ln x`, drifts from the exact
/// branch as `x → 0`: the gap is 0.952 at `x = 1e-6` and drops below 0.05
/// only for `x ≳ 0.019`. The check still runs and still reports `fail`.
pub const KNOWN_UNATTAINABLE: &[&str] = &["h_inv_approx_grid"];

pub const DEFAULT_SEED: u64 = 20_251_019;

// ---- numerics -------------------------------------------------------------

fn cdf_monotone(_: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 100_001;
    let mut worst = f64::INFINITY;
    let mut prev = normal_cdf(-40.0);
    for i in 1..n {
        let x = -40.0 + 80.0 * i as f64 / (n - 1) as f64;
        let c = normal_cdf(x);
        worst = worst.min(c - prev);
        prev = c;
    }
    Ok(at_least(n, "min_step", worst, 0.0))
}

fn cdf_derivative(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let h = 1e-5;
    let worst = (0..n)
        .map(|_| {
            let x = rng.gen_range(-6.0..6.0);
            ((normal_cdf(x + h) - normal_cdf(x - h)) / (2.0 * h) - normal_pdf(x)).abs()
        })
        .fold(0.0, f64::max);
    Ok(at_most(n, "max_abs_err", worst, 1e-6))
}

fn quantile_round_trip(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let worst = (0..n)
        .map(|_| {
            let u = (rng.gen_range(1e-12f64.ln()..0.0)).exp();
            let u = if rng.gen_bool(0.5) { u } else { 1.0 - u };
            let u = u.clamp(1e-12, 1.0 - 1e-12);
            (normal_cdf(normal_quantile(u)) - u).abs()
        })
        .fold(0.0, f64::max);
    Ok(at_most(n, "max_abs_err", worst, 1e-10))
}

fn log_sum_exp_shift(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let len = rng.gen_range(1..20);
        let xs: Vec<f64> = (0..len).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        worst = worst.max((log_sum_exp(&shifted)? - log_sum_exp(&xs)? - c).abs());
    }
    Ok(at_most(n, "max_abs_err", worst, 1e-12))
}

fn simpson_normalization(_: &mut ChaCha8Rng) -> Result<Outcome> {
    let spec = QuadratureSpec::new(-8.0, 8.0, 4096)?;
    let err = (crate::numerics::simpson_integrate(normal_pdf, &spec) - 1.0).abs();
    Ok(at_most(1, "abs_err", err, 1e-10))
}

// ---- continuous -----------------------------------------------------------

/// A random feasible configuration, δ, and raw outputs.
fn continuous_draw(rng: &mut ChaCha8Rng) -> Result<(EraContinuousConfig, f64, Vec<f64>, Vec<f64>)> {
    let d = rng.gen_range(1..=16);
    let log_min: f64 = rng.gen_range(-7.0..-0.5);
    let log_max: f64 = log_min + rng.gen_range(0.1..4.0);
    let (smin, smax) = (log_min.exp(), log_max.exp());
    let df = d as f64;
    let top = df * (log_max + LN_SQRT_2PI_E);
    let bottom = df * (log_min + LN_SQRT_2PI_E);
    // cover both the clamped (below bottom) and unclamped regimes
    let h0p = rng.gen_range(bottom - 3.0..=top);
    let delta = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0f64).min(h0p - bottom + 3.0) };
    let cfg = EraContinuousConfig::new(h0p - delta, smin, smax, d)?;
    let scale = rng.gen_range(0.0..10.0);
    let mu = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sh = (0..d).map(|_| scale * standard_normal(rng)).collect();
    Ok((cfg, delta, mu, sh))
}

fn prop_b1_bound(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut slack = f64::INFINITY;
    for _ in 0..n {
        let (cfg, delta, mu, sh) = continuous_draw(rng)?;
        let p = era_activate(&mu, &sh, &cfg, delta)?;
        slack = slack.min(gaussian_entropy(&p) - (cfg.target_entropy + delta));
    }
    Ok(at_least(n, "min_slack", slack, -1e-9))
}

fn sigma_within_bounds(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst = f64::INFINITY;
    for _ in 0..n {
        let (cfg, delta, mu, sh) = continuous_draw(rng)?;
        let p = era_activate(&mu, &sh, &cfg, delta)?;
        for &s in p.sigma() {
            worst = worst.min((s - cfg.sigma_min).min(cfg.sigma_max - s));
        }
    }
    Ok(at_least(n, "min_margin", worst, 0.0))
}

fn truncated_entropy_quadrature(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 100;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mu = rng.gen_range(-2.0..2.0);
        let sigma = rng.gen_range(0.05..20.0);
        let p = GaussianPolicyParams::new(vec![mu], vec![sigma], 1e-3, 100.0)?;
        let z = crate::numerics::normal_interval_mass((-1.0 - mu) / sigma, (1.0 - mu) / sigma);
        let density = |a: f64| normal_pdf((a - mu) / sigma) / (sigma * z);
        let spec = QuadratureSpec::new(-1.0, 1.0, 1 << 16)?;
        let oracle = entropy_by_quadrature(density, &spec);
        worst = worst.max((truncated_entropy(&p)? - oracle).abs());
    }
    Ok(at_most(n, "max_abs_err", worst, 1e-6))
}

fn random_params(rng: &mut ChaCha8Rng, max_dim: usize) -> Result<GaussianPolicyParams> {
    let d = rng.gen_range(1..=max_dim);
    let mu = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let sigma = (0..d).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
    GaussianPolicyParams::new(mu, sigma, 1e-3, 100.0)
}

fn delta_identity(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 1000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let p = random_params(rng, 8)?;
        let diff = gaussian_entropy(&p) - truncated_entropy(&p)?;
        worst = worst.max((delta_tn_analytic(&p)? - diff).abs());
    }
    Ok(at_most(n, "max_abs_err", worst, 1e-10))
}

fn truncation_lowers_entropy(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst = f64::INFINITY;
    for _ in 0..n {
        let p = random_params(rng, 6)?;
        worst = worst.min(gaussian_entropy(&p) - truncated_entropy(&p)?);
    }
    Ok(at_least(n, "min_gap", worst, -1e-12))
}

fn sigma_hat_shift_invariance(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (cfg, delta, mu, sh) = continuous_draw(rng)?;
        let c = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = sh.iter().map(|x| x + c).collect();
        let a = era_activate(&mu, &sh, &cfg, delta)?;
        let b = era_activate(&mu, &shifted, &cfg, delta)?;
        for (x, y) in a.sigma().iter().zip(b.sigma()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(at_most(n, "max_abs_diff", worst, 1e-12))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array {
    Array::new(vec![r, c], (0..r * c).map(|_| scale * standard_normal(rng)).collect())
        .expect("shape matches data")
}

fn gradcheck_log_prob_path(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 20;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let cfg = EraContinuousConfig::new(-1.5, 0.05, 2.0, 3)?;
        let mu_raw = random_matrix(rng, 2, 3, 0.8);
        let sh = random_matrix(rng, 2, 3, 1.0);
        let mut action = random_matrix(rng, 2, 3, 0.5);
        action.data_mut().iter_mut().for_each(|x| *x = x.clamp(-0.95, 0.95));
        let err = finite_difference_check(&[mu_raw, sh], |t| {
            let mu = t[0].tanh();
            let log_sigma = era_log_sigma_tape(&t[1], &cfg, 0.2)?;
            let a = t[0].tape().constant(action.clone());
            Ok(truncated_log_prob(&mu, &log_sigma.exp(), &log_sigma, &a)?.sum())
        })?;
        worst = worst.max(err);
    }
    Ok(at_most(n, "max_rel_err", worst, 1e-4))
}

// ---- discrete -------------------------------------------------------------

const DISCRETE_DIMS: [usize; 4] = [3, 10, 100, 1000];

/// Valid `(τ, H₀)` for `d` classes and a random logit vector.
fn discrete_draw(rng: &mut ChaCha8Rng, d: usize) -> Result<(EraDiscreteConfig, CategoricalLogits)> {
    let tau = if rng.gen_bool(0.5) {
        EraDiscreteConfig::DEFAULT_TAU
    } else {
        rng.gen_range(std::f64::consts::E..10.0)
    };
    let u = tau.ln() / tau;
    let lo = 1.0 + u.ln();
    let hi = 1.0 + (d as f64 * u).ln();
    let h0 = rng.gen_range(lo..=hi).min(hi);
    let cfg = EraDiscreteConfig::with_tau(h0, tau, d)?;
    let scale = 10f64.powf(rng.gen_range(-2.0..1.5));
    let mut z: Vec<f64> = (0..d).map(|_| scale * standard_normal(rng)).collect();
    if rng.gen_bool(0.25) {
        z[rng.gen_range(0..d)] += 40.0;
    }
    Ok((cfg, CategoricalLogits::new(z)?))
}

fn prop_b2_sweep(rng: &mut ChaCha8Rng, inverse: Inverse) -> Result<(usize, f64)> {
    let per_dim = 2500;
    let mut worst = f64::INFINITY;
    for &d in &DISCRETE_DIMS {
        for _ in 0..per_dim {
            let (cfg, z) = discrete_draw(rng, d)?;
            let h = categorical_entropy(&era_logits(&z, &cfg, inverse)?);
            worst = worst.min(h - cfg.target_entropy);
        }
    }
    Ok((per_dim * DISCRETE_DIMS.len(), worst))
}

fn prop_b2_exact_bound(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, slack) = prop_b2_sweep(rng, Inverse::Exact)?;
    Ok(at_least(n, "min_slack", slack, -1e-9))
}

/// Worst entropy deficit with the closed-form inverse, recorded as
/// `ε_approx`.
fn prop_b2_approx_deficit(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (n, slack) = prop_b2_sweep(rng, Inverse::Approx)?;
    Ok(at_most(n, "eps_approx", (-slack).max(0.0), 0.05))
}

fn h_inv_approx_grid(_: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 1000;
    let (lo, hi) = (1e-6f64.ln(), -1.0);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let x = (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp();
        worst = worst.max((h_inv_approx(x)? - h_inv_exact(x)?).abs());
    }
    Ok(at_most(n, "max_abs_err", worst, 0.05))
}

fn h_inv_endpoint(_: &mut ChaCha8Rng) -> Result<Outcome> {
    let x = (-1f64).exp();
    let err = (h_inv_approx(x)? + 1.0).abs().max((h_inv_exact(x)? + 1.0).abs());
    Ok(at_most(1, "abs_err", err, 1e-12))
}

fn kappa_bounds(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst = f64::INFINITY;
    for i in 0..n {
        let (cfg, z) = discrete_draw(rng, DISCRETE_DIMS[i % 3])?;
        let k = kappa(&z, &cfg)?;
        let u = cfg.upper_bound();
        let per_class = k.iter().map(|&x| x.min(u - x)).fold(f64::INFINITY, f64::min);
        let sum_gap = k.iter().sum::<f64>() - cfg.c_h0();
        worst = worst.min(per_class.min(sum_gap / cfg.c_h0()));
    }
    Ok(at_least(n, "min_margin", worst, -1e-12))
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn argmax_preserved(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut kept = 0usize;
    let mut counted = 0usize;
    for i in 0..n {
        let d = DISCRETE_DIMS[i % 3];
        let (mut cfg, z) = discrete_draw(rng, d)?;
        // at C = D·u every class gets the same κ and the argmax is a tie
        let hi = 1.0 + (d as f64 * cfg.upper_bound()).ln();
        if cfg.target_entropy > hi - 1e-6 {
            cfg.target_entropy = hi - 1e-3;
        }
        let p = z.probs();
        let top = argmax(&p);
        // skip near-ties in the input, which no finite-precision map can order
        if p.iter().enumerate().any(|(j, &q)| j != top && q >= p[top] * (1.0 - 1e-9)) {
            continue;
        }
        counted += 1;
        let out = era_logits(&z, &cfg, Inverse::Approx)?;
        if argmax(out.as_slice()) == top {
            kept += 1;
        }
    }
    Ok(at_least(counted, "fraction_kept", kept as f64 / counted as f64, 1.0))
}

fn logit_shift_invariance(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (cfg, z) = discrete_draw(rng, DISCRETE_DIMS[i % 3])?;
        let c = rng.gen_range(-20.0..20.0);
        let shifted = CategoricalLogits::new(z.as_slice().iter().map(|x| x + c).collect())?;
        let a = era_logits(&z, &cfg, Inverse::Approx)?;
        let b = era_logits(&shifted, &cfg, Inverse::Approx)?;
        let pa = a.probs();
        let pb = b.probs();
        for (x, y) in pa.iter().zip(&pb) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(at_most(n, "max_prob_diff", worst, 1e-12))
}

fn gradcheck_cross_entropy_path(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 20;
    let mut worst: f64 = 0.0;
    let cfg = EraDiscreteConfig::new(1.0, 5)?;
    for _ in 0..n {
        let z = random_matrix(rng, 3, 5, 1.5);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let err = finite_difference_check(&[z], |t| {
            Ok(era_logits_tape(&t[0], &cfg)?
                .log_softmax_rows()
                .gather_cols(&labels)?
                .mean()
                .neg())
        })?;
        worst = worst.max(err);
    }
    Ok(at_most(n, "max_rel_err", worst, 1e-4))
}

// ---- llm ------------------------------------------------------------------

fn centred_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let v = rng.gen_range(2..=32);
    let scale = rng.gen_range(0.1..4.0);
    let z: Vec<f64> = (0..v).map(|_| scale * standard_normal(rng)).collect();
    let pi = crate::numerics::softmax(&z);
    let a: Vec<f64> = (0..v).map(|_| standard_normal(rng)).collect();
    let m: f64 = pi.iter().zip(&a).map(|(p, x)| p * x).sum();
    let a = a.iter().map(|x| x - m).collect();
    (z, a, rng.gen_range(1.05..5.0))
}

fn decomposition_identity(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 1000;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let (z, a, k) = centred_instance(rng);
        let branch = if i % 2 == 0 { Branch::Sharpen } else { Branch::Flatten };
        let (lhs, rhs) = decomposition_check(&z, &a, k, branch)?;
        for (l, r) in lhs.iter().zip(&rhs) {
            worst = worst.max((l - r).abs());
        }
    }
    Ok(at_most(n, "max_abs_err", worst, 1e-8))
}

fn decomposition_middle_branch(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 1000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (z, a, k) = centred_instance(rng);
        let (lhs, rhs) = decomposition_check(&z, &a, k, Branch::Identity)?;
        let pi = crate::numerics::softmax(&z);
        for j in 0..z.len() {
            let pg = pi[j] * a[j];
            // the closed form is exactly π_a A_a; autodiff differs by rounding
            if rhs[j] != pg {
                return Ok(at_most(n, "max_abs_err", f64::INFINITY, 1e-12));
            }
            worst = worst.max((lhs[j] - pg).abs());
        }
    }
    Ok(at_most(n, "max_abs_err", worst, 1e-12))
}

fn sharpening_monotone(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let mut worst = f64::INFINITY;
    for _ in 0..n {
        let (z, _, k) = centred_instance(rng);
        let h = categorical_entropy_of(&z);
        let sharp: Vec<f64> = z.iter().map(|x| x * k).collect();
        let flat: Vec<f64> = z.iter().map(|x| x / k).collect();
        worst = worst
            .min(h - categorical_entropy_of(&sharp))
            .min(categorical_entropy_of(&flat) - h);
    }
    Ok(at_least(n, "min_gap", worst, -1e-12))
}

fn branch_partition(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 10_000;
    let cfg = EraLlmConfig::new(0.45, Some(3.0), 2.0)?;
    let mut violations = 0usize;
    for _ in 0..n {
        let h = rng.gen_range(0.0..4.0);
        let a = match rng.gen_range(0..3) {
            0 => 0.0,
            1 => -rng.gen_range(0.0..3.0),
            _ => rng.gen_range(0.0..3.0),
        };
        let b = Branch::select(h, a, &cfg);
        let matches = [
            a > 0.0 && h < cfg.omega_low,
            a > 0.0 && h > 3.0,
            !(a > 0.0 && (h < cfg.omega_low || h > 3.0)),
        ];
        let expected = [Branch::Sharpen, Branch::Flatten, Branch::Identity];
        let hits = matches.iter().filter(|&&m| m).count();
        let idx = matches.iter().position(|&m| m);
        if hits != 1 || idx.map(|i| expected[i]) != Some(b) || (a <= 0.0 && b != Branch::Identity) {
            violations += 1;
        }
    }
    Ok(at_most(n, "violations", violations as f64, 0.0))
}

fn random_batch(rng: &mut ChaCha8Rng) -> Result<ResponseBatch> {
    let (b, t, v) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(2..10));
    let scale = rng.gen_range(0.1..5.0);
    let logits = (0..b * t * v).map(|_| scale * standard_normal(rng)).collect();
    let tokens = (0..b * t).map(|_| rng.gen_range(0..v)).collect();
    let mut adv = Vec::new();
    for _ in 0..b {
        let a = standard_normal(rng);
        adv.extend(std::iter::repeat_n(a, t));
    }
    let mut mask: Vec<bool> = (0..b * t).map(|_| rng.gen_bool(0.8)).collect();
    mask[0] = true;
    ResponseBatch::new((b, t, v), logits, tokens, adv, mask)
}

fn vanilla_objective_identity(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 1000;
    let mut mismatches = 0usize;
    for _ in 0..n {
        let batch = random_batch(rng)?;
        let (b, t, v) = batch.dims();
        let era = crate::era::llm::era_objective(&batch, &EraLlmConfig::vanilla())?.0;
        // plain policy gradient computed independently
        let valid = batch.mask().iter().filter(|&&m| m).count() as f64;
        let tape = crate::autodiff::Tape::new();
        let z = tape.constant(Array::new(vec![b * t, v], batch.logits().to_vec())?);
        let w: Vec<f64> = batch
            .advantages()
            .iter()
            .zip(batch.mask())
            .map(|(a, &m)| if m { a / valid } else { 0.0 })
            .collect();
        let pg = z
            .log_softmax_rows()
            .gather_cols(batch.sampled_tokens())?
            .mul(&tape.constant(Array::vector(w)))?
            .sum()
            .item();
        if era.to_bits() != pg.to_bits() {
            mismatches += 1;
        }
    }
    Ok(at_most(n, "bit_mismatches", mismatches as f64, 0.0))
}

fn gradcheck_objective_path(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 20;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let batch = random_batch(rng)?;
        let (b, t, v) = batch.dims();
        let mut cfg = EraLlmConfig::new(1.0, Some(1.6), 2.0)?;
        if i % 2 == 1 {
            cfg.top_k_logits = Some(v.div_ceil(2));
        }
        let z = Array::new(vec![b * t, v], batch.logits().to_vec())?;
        let err = finite_difference_check(&[z], |t| era_objective_tape(&t[0], &batch, &cfg))?;
        worst = worst.max(err);
    }
    Ok(at_most(n, "max_rel_err", worst, 1e-4))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for name in Suite::NAMES {
            assert_eq!(name.parse::<Suite>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    #[ignore = "prints the full report"]
    fn report_all() {
        for r in run_suite(Suite::All, DEFAULT_SEED).unwrap() {
            println!("{}", r.line());
        }
    }

    #[test]
    fn every_attainable_property_passes() {
        for r in run_suite(Suite::All, DEFAULT_SEED).unwrap() {
            let known = KNOWN_UNATTAINABLE.contains(&r.property);
            assert_eq!(r.passed, !known, "{}", r.line());
        }
    }

    #[test]
    fn single_property_lookup() {
        let r = run_property("h_inv_endpoint", 7).unwrap();
        assert_eq!(r.suite, Suite::Discrete);
        assert!(r.passed);
        assert!(run_property("nope", 7).is_err());
        assert_eq!(property_names(Suite::All).len(), 26);
    }

    #[test]
    fn report_serializes() {
        let r = run_property("h_inv_endpoint", 7).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["suite"], "discrete");
        assert_eq!(v["bound"], "at_most");
    }
}
