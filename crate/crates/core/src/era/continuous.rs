//! ERA for bounded Gaussian policies.
//!
//! The activation redistributes a fixed log-σ budget across dimensions with a
//! softmax, so the Gaussian entropy can never drop below the target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::distributions::{
    tanh_residual_mc, truncation_residual, GaussianPolicyParams, McEstimate,
};
use crate::error::{EraError, Result};
use crate::numerics::{softmax, LN_SQRT_2PI_E};

/// How the residual entropy δ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum DeltaMode {
    Constant(f64),
    /// δ̂ is adjusted by dual ascent on the residual loss.
    Learned,
}

/// How sampled actions are mapped into `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bounding {
    Truncated,
    /// Experimental: tanh squashing with a Monte-Carlo residual.
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraContinuousConfig {
    pub target_entropy: f64,
    pub delta_mode: DeltaMode,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub dim: usize,
    pub bounding: Bounding,
    /// Step size for δ̂ when `delta_mode` is learned.
    pub delta_lr: f64,
}

pub const DEFAULT_DELTA_LR: f64 = 3e-4;

impl EraContinuousConfig {
    /// Truncated bounding with constant δ = 0.
    pub fn new(target_entropy: f64, sigma_min: f64, sigma_max: f64, dim: usize) -> Result<Self> {
        let cfg = Self {
            target_entropy,
            delta_mode: DeltaMode::Constant(0.0),
            sigma_min,
            sigma_max,
            dim,
            bounding: Bounding::Truncated,
            delta_lr: DEFAULT_DELTA_LR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EraError::InvalidConfig("dim must be positive".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite())
        {
            return Err(EraError::InvalidConfig(format!(
                "need 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !self.target_entropy.is_finite() {
            return Err(EraError::InvalidConfig("target entropy must be finite".into()));
        }
        if !(self.delta_lr > 0.0 && self.delta_lr.is_finite()) {
            return Err(EraError::InvalidConfig("delta_lr must be positive".into()));
        }
        if let DeltaMode::Constant(d) = self.delta_mode {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(EraError::InvalidConfig(format!("constant delta must be >= 0, got {d}")));
            }
        }
        let top = self.max_entropy();
        let needed = self.target_entropy + self.initial_delta();
        if needed > top {
            return Err(EraError::InvalidConfig(format!(
                "target entropy {needed} exceeds the largest reachable Gaussian entropy {top} \
                 (D log(sigma_max sqrt(2 pi e)))"
            )));
        }
        Ok(())
    }

    /// `D·log(σ_max √(2πe))`, the entropy with every σ at its ceiling.
    pub fn max_entropy(&self) -> f64 {
        self.dim as f64 * (self.sigma_max.ln() + LN_SQRT_2PI_E)
    }

    pub fn initial_delta(&self) -> f64 {
        match self.delta_mode {
            DeltaMode::Constant(d) => d,
            DeltaMode::Learned => 0.0,
        }
    }

    /// Coefficient multiplying the softmax weights: `H₀′ − D log√(2πe) − D log σ_max`.
    fn budget(&self, delta: f64) -> f64 {
        self.target_entropy + delta - self.max_entropy()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta >= 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(EraError::Domain(format!("delta must be >= 0, got {delta}")))
    }
}

fn bounded_sigma(log_sigma: f64, cfg: &EraContinuousConfig) -> f64 {
    let (lo, hi) = (cfg.sigma_min.ln(), cfg.sigma_max.ln());
    // the clamp in value space keeps σ inside the bounds despite exp rounding
    log_sigma.clamp(lo, hi).exp().clamp(cfg.sigma_min, cfg.sigma_max)
}

/// Maps raw network outputs to policy parameters whose Gaussian entropy is at
/// least `H₀ + delta`.
pub fn era_activate(
    mu: &[f64],
    sigma_hat: &[f64],
    cfg: &EraContinuousConfig,
    delta: f64,
) -> Result<GaussianPolicyParams> {
    check_delta(delta)?;
    for (len, what) in [(mu.len(), "era_activate mu"), (sigma_hat.len(), "era_activate sigma_hat")] {
        if len != cfg.dim {
            return Err(EraError::DimensionMismatch {
                context: what,
                expected: cfg.dim,
                got: len,
            });
        }
    }
    let k = cfg.budget(delta);
    let ln_max = cfg.sigma_max.ln();
    let sigma = softmax(sigma_hat)
        .into_iter()
        .map(|w| bounded_sigma(ln_max + k * w, cfg))
        .collect();
    GaussianPolicyParams::new(mu.to_vec(), sigma, cfg.sigma_min, cfg.sigma_max)
}

/// Batch-level variant: weights are `e^{σ̂}` normalized by their mean over
/// the whole batch, so the entropy constraint holds on average.
pub fn era_activate_batch(
    mu: &Array,
    sigma_hat: &Array,
    cfg: &EraContinuousConfig,
    delta: f64,
) -> Result<(Vec<GaussianPolicyParams>, f64)> {
    let e_bar = batch_weight_mean(sigma_hat)?;
    let params = era_activate_batch_with(mu, sigma_hat, cfg, delta, e_bar)?;
    Ok((params, e_bar))
}

/// Mean of `e^{σ̂}` over every entry.
pub fn batch_weight_mean(sigma_hat: &Array) -> Result<f64> {
    if sigma_hat.is_empty() {
        return Err(EraError::EmptyInput("era batch"));
    }
    Ok(sigma_hat.data().iter().map(|x| x.exp()).sum::<f64>() / sigma_hat.len() as f64)
}

/// Batch variant with a caller-supplied normalizer, e.g. a running average
/// in evaluation mode.
pub fn era_activate_batch_with(
    mu: &Array,
    sigma_hat: &Array,
    cfg: &EraContinuousConfig,
    delta: f64,
    e_bar: f64,
) -> Result<Vec<GaussianPolicyParams>> {
    check_delta(delta)?;
    if sigma_hat.is_empty() {
        return Err(EraError::EmptyInput("era batch"));
    }
    if mu.shape() != sigma_hat.shape() {
        return Err(EraError::ShapeMismatch {
            op: "era_activate_batch",
            lhs: mu.shape().to_vec(),
            rhs: sigma_hat.shape().to_vec(),
        });
    }
    let (rows, cols) = mu.rows_cols();
    if cols != cfg.dim {
        return Err(EraError::DimensionMismatch {
            context: "era_activate_batch",
            expected: cfg.dim,
            got: cols,
        });
    }
    if !(e_bar > 0.0 && e_bar.is_finite()) {
        return Err(EraError::Domain(format!("batch normalizer must be positive, got {e_bar}")));
    }
    let coef = cfg.budget(delta) / cfg.dim as f64;
    let ln_max = cfg.sigma_max.ln();
    (0..rows)
        .map(|r| {
            let sigma = sigma_hat
                .row(r)
                .iter()
                .map(|s| bounded_sigma(ln_max + coef * s.exp() / e_bar, cfg))
                .collect();
            GaussianPolicyParams::new(mu.row(r).to_vec(), sigma, cfg.sigma_min, cfg.sigma_max)
        })
        .collect()
}

/// Exponential moving average of the batch normalizer ē.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningWeightMean {
    pub momentum: f64,
    value: Option<f64>,
}

impl Default for RunningWeightMean {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            value: None,
        }
    }
}

impl RunningWeightMean {
    /// The first observation initializes the average.
    pub fn observe(&mut self, e_bar: f64) {
        self.value = Some(match self.value {
            None => e_bar,
            Some(v) => self.momentum * v + (1.0 - self.momentum) * e_bar,
        });
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Tape version of [`era_activate`] for `[N, D]` raw outputs; returns log σ′.
pub fn era_log_sigma_tape(sigma_hat: &Tensor, cfg: &EraContinuousConfig, delta: f64) -> Result<Tensor> {
    check_delta(delta)?;
    let shape = sigma_hat.shape();
    if shape.last() != Some(&cfg.dim) {
        return Err(EraError::DimensionMismatch {
            context: "era_log_sigma_tape",
            expected: cfg.dim,
            got: shape.last().copied().unwrap_or(0),
        });
    }
    let (lo, hi) = (cfg.sigma_min.ln(), cfg.sigma_max.ln());
    Ok(sigma_hat
        .softmax_rows()
        .scale(cfg.budget(delta))
        .add_scalar(hi)
        .clamp(lo, hi))
}

/// `δ̂ · (mean(H) − H₀)`.
pub fn residual_loss(delta_hat: f64, entropies: &[f64], h0: f64) -> Result<f64> {
    Ok(delta_hat * (mean(entropies)? - h0))
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(EraError::EmptyInput("entropies"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Entropy lost to truncation onto `[-1, 1]`; equals Gaussian minus truncated
/// entropy.
pub fn delta_tn_analytic(params: &GaussianPolicyParams) -> Result<f64> {
    truncation_residual(params)
}

/// Entropy lost to tanh squashing, by Monte Carlo.
pub fn delta_tanh_mc<R: Rng + ?Sized>(
    params: &GaussianPolicyParams,
    n: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    tanh_residual_mc(params, n, rng)
}

/// Learned residual entropy, kept nonnegative by projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaState {
    pub delta_hat: f64,
    pub learning_rate: f64,
}

impl DeltaState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            delta_hat: 0.0,
            learning_rate,
        }
    }
}

/// One projected gradient step on the residual loss: an entropy deficit
/// raises δ̂.
pub fn update_delta(state: DeltaState, entropies: &[f64], h0: f64) -> Result<DeltaState> {
    let grad = mean(entropies)? - h0;
    Ok(DeltaState {
        delta_hat: (state.delta_hat - state.learning_rate * grad).max(0.0),
        ..state
    })
}
