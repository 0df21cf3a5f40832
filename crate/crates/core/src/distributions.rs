//! Policy distributions: diagonal Gaussian, truncated Gaussian on `[-1, 1]^D`,
//! tanh-squashed Gaussian and softmax categorical.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EraError, Result};
use crate::numerics::{
    log_one_minus_tanh_sq, log_sum_exp_unchecked, normal_cdf, normal_interval_mass,
    normal_log_pdf, normal_pdf, normal_quantile, normal_sf, LN_SQRT_2PI_E,
};

/// Truncation masses below this are treated as degenerate.
pub const MIN_TRUNCATION_MASS: f64 = 1e-300;

/// Per-dimension mean and standard deviation of a diagonal Gaussian policy,
/// together with the standard-deviation bounds it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    sigma_min: f64,
    sigma_max: f64,
}

impl GaussianPolicyParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(EraError::EmptyInput("gaussian policy mean"));
        }
        if mu.len() != sigma.len() {
            return Err(EraError::DimensionMismatch {
                context: "gaussian policy params",
                expected: mu.len(),
                got: sigma.len(),
            });
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(EraError::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        if let Some(m) = mu.iter().find(|m| !m.is_finite()) {
            return Err(EraError::Domain(format!("non-finite mean {m}")));
        }
        if let Some(s) = sigma.iter().find(|&&s| !(sigma_min..=sigma_max).contains(&s)) {
            return Err(EraError::Domain(format!(
                "sigma {s} outside [{sigma_min}, {sigma_max}]"
            )));
        }
        Ok(Self {
            mu,
            sigma,
            sigma_min,
            sigma_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn check_dim(&self, got: usize, context: &'static str) -> Result<()> {
        if got != self.dim() {
            return Err(EraError::DimensionMismatch {
                context,
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }
}

/// Standardized truncation bounds and masses for the interval `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedGaussianAux {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub z: Vec<f64>,
}

impl TruncatedGaussianAux {
    pub fn from_params(params: &GaussianPolicyParams) -> Result<Self> {
        let d = params.dim();
        let mut alpha = Vec::with_capacity(d);
        let mut beta = Vec::with_capacity(d);
        let mut z = Vec::with_capacity(d);
        for (i, (&m, &s)) in params.mu.iter().zip(&params.sigma).enumerate() {
            let a = (-1.0 - m) / s;
            let b = (1.0 - m) / s;
            let mass = normal_interval_mass(a, b);
            if !(mass >= MIN_TRUNCATION_MASS) {
                return Err(EraError::DegenerateMass { dim: i, mass });
            }
            alpha.push(a);
            beta.push(b);
            z.push(mass.min(1.0));
        }
        Ok(Self { alpha, beta, z })
    }
}

/// `(β φ(β) - α φ(α)) / (2Z)`, with the `x φ(x)` factor taken as 0 at
/// infinite bounds.
fn truncation_shape_term(alpha: f64, beta: f64, z: f64) -> f64 {
    let xphi = |x: f64| if x.is_finite() { x * normal_pdf(x) } else { 0.0 };
    (xphi(beta) - xphi(alpha)) / (2.0 * z)
}

/// Entropy of the untruncated diagonal Gaussian, `½ Σ log(2πe σ_i²)`.
pub fn gaussian_entropy(params: &GaussianPolicyParams) -> f64 {
    params
        .sigma
        .iter()
        .map(|s| s.ln() + LN_SQRT_2PI_E)
        .sum()
}

/// Closed-form entropy of the Gaussian truncated to `[-1, 1]^D`.
pub fn truncated_entropy(params: &GaussianPolicyParams) -> Result<f64> {
    let aux = TruncatedGaussianAux::from_params(params)?;
    Ok((0..params.dim())
        .map(|i| {
            params.sigma[i].ln() + aux.z[i].ln() + LN_SQRT_2PI_E
                - truncation_shape_term(aux.alpha[i], aux.beta[i], aux.z[i])
        })
        .sum())
}

/// Per-dimension truncation residual `-(log Z_i - (β φ(β) - α φ(α)) / 2Z_i)`.
pub(crate) fn truncation_residual(params: &GaussianPolicyParams) -> Result<f64> {
    let aux = TruncatedGaussianAux::from_params(params)?;
    Ok((0..params.dim())
        .map(|i| -(aux.z[i].ln() - truncation_shape_term(aux.alpha[i], aux.beta[i], aux.z[i])))
        .sum())
}

/// Draws one action from the truncated Gaussian by inverse-CDF sampling.
pub fn truncated_sample<R: Rng + ?Sized>(
    params: &GaussianPolicyParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let aux = TruncatedGaussianAux::from_params(params)?;
    Ok((0..params.dim())
        .map(|i| {
            let u: f64 = rng.gen();
            let x = truncated_standard_quantile(aux.alpha[i], aux.beta[i], u);
            (params.mu[i] + params.sigma[i] * x).clamp(-1.0, 1.0)
        })
        .collect())
}

/// Maps `u ∈ [0, 1)` to the standardized truncated-normal quantile on
/// `[alpha, beta]`. Works from the upper tail when the interval lies there.
pub(crate) fn truncated_standard_quantile(alpha: f64, beta: f64, u: f64) -> f64 {
    let x = if alpha > 0.0 {
        let hi = normal_sf(alpha);
        let lo = normal_sf(beta);
        -normal_quantile(hi - u * (hi - lo))
    } else {
        let lo = normal_cdf(alpha);
        let hi = normal_cdf(beta);
        normal_quantile(lo + u * (hi - lo))
    };
    x.clamp(alpha, beta)
}

/// Log-density of the truncated Gaussian at `action ∈ [-1, 1]^D`.
pub fn truncated_log_prob(params: &GaussianPolicyParams, action: &[f64]) -> Result<f64> {
    params.check_dim(action.len(), "truncated_log_prob")?;
    if let Some(a) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
        return Err(EraError::Domain(format!("action {a} outside [-1, 1]")));
    }
    let aux = TruncatedGaussianAux::from_params(params)?;
    Ok((0..params.dim())
        .map(|i| {
            let x = (action[i] - params.mu[i]) / params.sigma[i];
            normal_log_pdf(x) - params.sigma[i].ln() - aux.z[i].ln()
        })
        .sum())
}

/// Log-density of the diagonal Gaussian at pre-squash point `u`.
pub fn gaussian_log_prob(params: &GaussianPolicyParams, u: &[f64]) -> Result<f64> {
    params.check_dim(u.len(), "gaussian_log_prob")?;
    Ok(u.iter()
        .zip(params.mu.iter().zip(&params.sigma))
        .map(|(&u, (&m, &s))| normal_log_pdf((u - m) / s) - s.ln())
        .sum())
}

/// Log-density of `a = tanh(u)` under the squashed Gaussian, expressed at the
/// pre-squash point `u`.
pub fn tanh_gaussian_log_prob(params: &GaussianPolicyParams, u: &[f64]) -> Result<f64> {
    let base = gaussian_log_prob(params, u)?;
    let correction: f64 = u.iter().map(|&u| log_one_minus_tanh_sq(u)).sum();
    Ok(base - correction)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub(crate) fn from_samples(xs: impl Iterator<Item = f64>) -> Self {
        // Welford
        let mut n = 0.0;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in xs {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        let var = if n > 1.0 { m2 / (n - 1.0) } else { 0.0 };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

fn sample_gaussian<R: Rng + ?Sized>(params: &GaussianPolicyParams, rng: &mut R) -> Vec<f64> {
    params
        .mu
        .iter()
        .zip(&params.sigma)
        .map(|(&m, &s)| m + s * standard_normal(rng))
        .collect()
}

/// One standard normal draw by inversion.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return normal_quantile(u);
        }
    }
}

/// Monte-Carlo entropy of the tanh-squashed Gaussian.
pub fn tanh_gaussian_entropy_mc<R: Rng + ?Sized>(
    params: &GaussianPolicyParams,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n == 0 {
        return Err(EraError::EmptyInput("monte-carlo sample count"));
    }
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let u = sample_gaussian(params, rng);
            // gaussian_log_prob cannot fail: u has the right length
            -tanh_gaussian_log_prob(params, &u).expect("dimension checked")
        })
        .collect();
    Ok(McEstimate::from_samples(samples.into_iter()))
}

/// Monte-Carlo estimate of `-E[Σ log(1 - tanh(u_i)²)]`, the entropy lost to
/// tanh squashing.
pub(crate) fn tanh_residual_mc<R: Rng + ?Sized>(
    params: &GaussianPolicyParams,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n == 0 {
        return Err(EraError::EmptyInput("monte-carlo sample count"));
    }
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            -sample_gaussian(params, rng)
                .iter()
                .map(|&u| log_one_minus_tanh_sq(u))
                .sum::<f64>()
        })
        .collect();
    Ok(McEstimate::from_samples(samples.into_iter()))
}

/// Unnormalized logits of a softmax distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalLogits(Vec<f64>);

impl CategoricalLogits {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(EraError::EmptyInput("categorical logits"));
        }
        if let Some(x) = z.iter().find(|x| !x.is_finite()) {
            return Err(EraError::Domain(format!("non-finite logit {x}")));
        }
        Ok(Self(z))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp_unchecked(&self.0);
        self.0.iter().map(|z| z - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }
}

/// Shannon entropy of `softmax(z)`.
pub fn categorical_entropy(logits: &CategoricalLogits) -> f64 {
    categorical_entropy_of(logits.as_slice())
}

pub(crate) fn categorical_entropy_of(z: &[f64]) -> f64 {
    let lse = log_sum_exp_unchecked(z);
    let h: f64 = z
        .iter()
        .map(|&zi| {
            let lp = zi - lse;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{entropy_by_quadrature, simpson_integrate, QuadratureSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params1(mu: f64, sigma: f64) -> GaussianPolicyParams {
        GaussianPolicyParams::new(vec![mu], vec![sigma], 1e-6, 100.0).unwrap()
    }

    // Independent oracle: entropy of the truncated density by quadrature.
    fn truncated_entropy_oracle(mu: f64, sigma: f64, panels: usize) -> f64 {
        let z = normal_interval_mass((-1.0 - mu) / sigma, (1.0 - mu) / sigma);
        let log_z = z.ln();
        let spec = QuadratureSpec::new(-1.0, 1.0, panels).unwrap();
        entropy_by_quadrature(
            |x| (normal_log_pdf((x - mu) / sigma) - sigma.ln() - log_z).exp(),
            &spec,
        )
    }

    #[test]
    fn gaussian_entropy_examples() {
        assert!((gaussian_entropy(&params1(0.0, 1.0)) - 1.418_938_533_2).abs() < 1e-9);
        let p2 = GaussianPolicyParams::new(vec![0.0; 2], vec![1.0; 2], 0.1, 2.0).unwrap();
        assert!((gaussian_entropy(&p2) - 2.837_877_066_4).abs() < 1e-9);
        // quadrature of -p log p for N(0, 0.1²)
        let spec = QuadratureSpec::new(-0.8, 0.8, 4096).unwrap();
        let oracle = entropy_by_quadrature(|x| normal_pdf(x / 0.1) / 0.1, &spec);
        let h = gaussian_entropy(&params1(0.0, 0.1));
        assert!((h - oracle).abs() < 1e-9);
        assert!((h + 0.883_646_559_8).abs() < 1e-9);
    }

    #[test]
    fn params_validation() {
        assert!(GaussianPolicyParams::new(vec![0.0], vec![0.5, 0.5], 0.1, 1.0).is_err());
        assert!(GaussianPolicyParams::new(vec![0.0], vec![2.0], 0.1, 1.0).is_err());
        assert!(GaussianPolicyParams::new(vec![0.0], vec![0.5], 1.0, 0.1).is_err());
        assert!(GaussianPolicyParams::new(vec![f64::NAN], vec![0.5], 0.1, 1.0).is_err());
        assert!(GaussianPolicyParams::new(vec![], vec![], 0.1, 1.0).is_err());
    }

    #[test]
    fn truncated_entropy_examples() {
        // near-uniform on [-1, 1]; 30-digit quadrature reference 0.693146070154830
        let wide = truncated_entropy(&params1(0.0, 10.0)).unwrap();
        assert!((wide - 0.693_146_070_154_83).abs() < 1e-9);
        assert!((wide - truncated_entropy_oracle(0.0, 10.0, 4096)).abs() < 1e-9);
        let narrow = truncated_entropy(&params1(0.0, 0.1)).unwrap();
        assert!((narrow + 0.883_646_559_789_373).abs() < 1e-9);

        let a = params1(0.3, 0.7);
        let b = params1(-0.8, 2.5);
        let ab = GaussianPolicyParams::new(vec![0.3, -0.8], vec![0.7, 2.5], 1e-6, 100.0).unwrap();
        let sum = truncated_entropy(&a).unwrap() + truncated_entropy(&b).unwrap();
        assert!((truncated_entropy(&ab).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mass_is_an_error() {
        let p = params1(80.0, 0.1);
        assert!(matches!(
            truncated_entropy(&p),
            Err(EraError::DegenerateMass { dim: 0, .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(truncated_sample(&p, &mut rng).is_err());
    }

    #[test]
    fn truncated_entropy_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mu = rng.gen_range(-2.0..2.0);
            let sigma = rng.gen_range(0.05..20.0);
            let analytic = truncated_entropy(&params1(mu, sigma)).unwrap();
            let oracle = truncated_entropy_oracle(mu, sigma, 1 << 16);
            assert!(
                (analytic - oracle).abs() <= 1e-6,
                "mu={mu} sigma={sigma}: {analytic} vs {oracle}"
            );
        }
    }

    #[test]
    fn truncation_never_adds_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let d = rng.gen_range(1..5);
            let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sigma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..30.0)).collect();
            let p = GaussianPolicyParams::new(mu, sigma, 1e-3, 50.0).unwrap();
            assert!(truncated_entropy(&p).unwrap() <= gaussian_entropy(&p) + 1e-12);
        }
    }

    #[test]
    fn truncated_density_normalizes() {
        let spec = QuadratureSpec::new(-1.0, 1.0, 8192).unwrap();
        for &(mu, sigma) in &[(0.0, 10.0), (0.5, 0.5), (-1.5, 0.3), (0.9, 0.05)] {
            let p = params1(mu, sigma);
            let mass = simpson_integrate(|a| truncated_log_prob(&p, &[a]).unwrap().exp(), &spec);
            assert!((mass - 1.0).abs() < 1e-6, "mu={mu} sigma={sigma}: {mass}");
        }
    }

    #[test]
    fn truncated_log_prob_examples() {
        let lp = truncated_log_prob(&params1(0.0, 10.0), &[0.0]).unwrap();
        // density at the center of a near-flat density: 1/2 up to the curvature
        let z = normal_interval_mass(-0.1, 0.1);
        assert!((lp - (normal_pdf(0.0) / (10.0 * z)).ln()).abs() < 1e-12);
        assert!((lp - 0.5f64.ln()).abs() < 2e-3);

        let p = params1(0.4, 0.3);
        let best = truncated_log_prob(&p, &[0.4]).unwrap();
        for i in -10..=10 {
            let a = i as f64 / 10.0;
            assert!(truncated_log_prob(&p, &[a]).unwrap() <= best);
        }
        let p = params1(1.7, 0.3);
        let edge = truncated_log_prob(&p, &[1.0]).unwrap();
        assert!(truncated_log_prob(&p, &[0.99]).unwrap() < edge);

        assert!(matches!(
            truncated_log_prob(&p, &[1.01]),
            Err(EraError::Domain(_))
        ));
        assert!(truncated_log_prob(&p, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn truncated_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tight = params1(0.0, 1e-6);
        let a = truncated_sample(&tight, &mut rng).unwrap();
        assert!(a[0].abs() < 1e-4);

        let p = params1(0.5, 0.5);
        let (alpha, beta) = (-3.0, 1.0);
        let z = normal_interval_mass(alpha, beta);
        let mean = 0.5 + 0.5 * (normal_pdf(alpha) - normal_pdf(beta)) / z;
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| truncated_sample(&p, &mut rng).unwrap()[0])
            .collect();
        let est = McEstimate::from_samples(xs.iter().copied());
        assert!((est.mean - mean).abs() < 3.0 * est.std_err, "{est:?} vs {mean}");

        for &(mu, sigma) in &[(5.0, 0.5), (-4.0, 1.0), (0.0, 50.0), (1.2, 0.01)] {
            let p = params1(mu, sigma);
            for _ in 0..1000 {
                let a = truncated_sample(&p, &mut rng).unwrap()[0];
                assert!((-1.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn tanh_log_prob_correction() {
        let p = params1(0.2, 0.8);
        let base = gaussian_log_prob(&p, &[0.0]).unwrap();
        assert_eq!(tanh_gaussian_log_prob(&p, &[0.0]).unwrap(), base);
        let far = tanh_gaussian_log_prob(&p, &[30.0]).unwrap();
        assert!(far.is_finite());
        for i in -50..=50 {
            let u = i as f64 * 0.1;
            let naive = gaussian_log_prob(&p, &[u]).unwrap() - (1.0 - u.tanh().powi(2)).ln();
            assert!((tanh_gaussian_log_prob(&p, &[u]).unwrap() - naive).abs() < 1e-8);
        }
    }

    #[test]
    fn tanh_entropy_mc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tiny = params1(0.0, 1e-6);
        let est = tanh_gaussian_entropy_mc(&tiny, 10_000, &mut rng).unwrap();
        assert!((est.mean - gaussian_entropy(&tiny)).abs() < 3.0 * est.std_err);

        // change-of-variables quadrature oracle over u for μ=0, σ=1
        let spec = QuadratureSpec::new(-12.0, 12.0, 1 << 14).unwrap();
        let oracle = simpson_integrate(
            |u| normal_pdf(u) * (-normal_log_pdf(u) + log_one_minus_tanh_sq(u)),
            &spec,
        );
        // 30-digit reference value
        assert!((oracle - 0.669_804_118_221_797).abs() < 1e-9);
        let est = tanh_gaussian_entropy_mc(&params1(0.0, 1.0), 1_000_000, &mut rng).unwrap();
        assert!((est.mean - oracle).abs() < 3.0 * est.std_err, "{est:?}");

        for &(mu, s) in &[(0.0, 1.0), (2.0, 0.3), (-1.0, 3.0)] {
            let p = params1(mu, s);
            let est = tanh_gaussian_entropy_mc(&p, 2000, &mut rng).unwrap();
            assert!(est.mean <= gaussian_entropy(&p));
        }
        assert!(tanh_gaussian_entropy_mc(&tiny, 0, &mut rng).is_err());
    }

    #[test]
    fn categorical_examples() {
        let u = CategoricalLogits::new(vec![0.3; 4]).unwrap();
        assert!((categorical_entropy(&u) - 4f64.ln()).abs() < 1e-14);
        let mut z = vec![0.0; 5];
        z[0] = 40.0;
        assert!(categorical_entropy(&CategoricalLogits::new(z).unwrap()) < 1e-14);
        let z = CategoricalLogits::new(vec![3f64.ln(), 0.0]).unwrap();
        assert!((categorical_entropy(&z) - 0.562_335_144_618_808).abs() < 1e-12);
        assert!(CategoricalLogits::new(vec![]).is_err());
        assert!(CategoricalLogits::new(vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn categorical_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 1..40), c in -100.0f64..100.0) {
            let a = categorical_entropy_of(&z);
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            prop_assert!((categorical_entropy_of(&shifted) - a).abs() <= 1e-12);
            prop_assert!(a >= 0.0 && a <= (z.len() as f64).ln() + 1e-12);
        }
    }
}
