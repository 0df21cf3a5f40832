//! Differentiable policy heads on `[-1, 1]^D` for the trainers.

use crate::autodiff::Tensor;
use crate::error::{EraError, Result};
use crate::numerics::LN_SQRT_2PI;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EraError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Standardized truncation bounds `((−1−μ)/σ, (1−μ)/σ)`.
fn standardized_bounds(mu: &Tensor, sigma: &Tensor) -> Result<(Tensor, Tensor)> {
    let alpha = mu.neg().add_scalar(-1.0).div(sigma)?;
    let beta = mu.neg().add_scalar(1.0).div(sigma)?;
    Ok((alpha, beta))
}

/// Log-density of `action` under the truncated Gaussian, summed over the
/// last axis. All arguments are `[N, D]`; the result is `[N]`.
pub fn truncated_log_prob(
    mu: &Tensor,
    sigma: &Tensor,
    log_sigma: &Tensor,
    action: &Tensor,
) -> Result<Tensor> {
    same_shape("truncated_log_prob", mu, sigma)?;
    same_shape("truncated_log_prob", mu, action)?;
    let x = action.sub(mu)?.div(sigma)?;
    let log_phi = x.square().scale(-0.5).add_scalar(-LN_SQRT_2PI);
    let (alpha, beta) = standardized_bounds(mu, sigma)?;
    let log_z = alpha.normal_mass(&beta)?.log();
    Ok(log_phi.sub(log_sigma)?.sub(&log_z)?.sum_rows())
}

/// Reparameterized truncated-Gaussian sample: `μ + σ·x` where `x` is the
/// standardized truncated quantile at the uniforms `eps`.
pub fn truncated_rsample(mu: &Tensor, sigma: &Tensor, eps: &[f64]) -> Result<Tensor> {
    same_shape("truncated_rsample", mu, sigma)?;
    let (alpha, beta) = standardized_bounds(mu, sigma)?;
    let x = alpha.truncated_quantile(&beta, eps)?;
    Ok(mu.add(&sigma.mul(&x)?)?.clamp(-1.0, 1.0))
}

/// Tanh-squashed reparameterized sample from standard normal `noise`;
/// returns `(action, log_prob)` with the stable squash correction.
pub fn tanh_rsample(
    mu: &Tensor,
    sigma: &Tensor,
    log_sigma: &Tensor,
    noise: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape("tanh_rsample", mu, sigma)?;
    same_shape("tanh_rsample", mu, noise)?;
    let u = mu.add(&sigma.mul(noise)?)?;
    let action = u.tanh();
    // log(1 - tanh²u) = 2(ln 2 - u - softplus(-2u))
    let correction = u
        .neg()
        .sub(&u.scale(-2.0).softplus())?
        .add_scalar(std::f64::consts::LN_2)
        .scale(2.0);
    let log_prob = noise
        .square()
        .scale(-0.5)
        .add_scalar(-LN_SQRT_2PI)
        .sub(log_sigma)?
        .sub(&correction)?
        .sum_rows();
    Ok((action, log_prob))
}
