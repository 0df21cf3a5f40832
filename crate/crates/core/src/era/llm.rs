//! ERA for autoregressive policies trained with GRPO.
//!
//! Sampling always uses the raw logits. Only the update path sees the
//! sharpened or flattened distribution, chosen per response from the mean
//! entropy of its highest-entropy tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Tensor};
use crate::distributions::categorical_entropy_of;
use crate::error::{EraError, Result};
use crate::numerics::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraLlmConfig {
    pub omega_low: f64,
    /// `None` stands for `+∞`.
    #[serde(default)]
    pub omega_high: Option<f64>,
    pub k: f64,
    #[serde(default = "default_top_frac")]
    pub top_frac: f64,
    /// Keep only this many largest logits in the update-path log-softmax.
    #[serde(default)]
    pub top_k_logits: Option<usize>,
    /// Apply the matching advantage rescaling alongside the logit transform.
    #[serde(default = "default_true")]
    pub scale_advantages: bool,
}

fn default_top_frac() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

impl EraLlmConfig {
    pub fn new(omega_low: f64, omega_high: Option<f64>, k: f64) -> Result<Self> {
        let cfg = Self {
            omega_low,
            omega_high,
            k,
            top_frac: default_top_frac(),
            top_k_logits: None,
            scale_advantages: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// ω_low = 0, ω_high = +∞: every token takes the identity branch.
    pub fn vanilla() -> Self {
        Self {
            omega_low: 0.0,
            omega_high: None,
            k: 2.0,
            top_frac: default_top_frac(),
            top_k_logits: None,
            scale_advantages: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omega_low.is_finite() {
            return Err(EraError::InvalidConfig("omega_low must be finite".into()));
        }
        if let Some(hi) = self.omega_high {
            if hi.is_nan() || hi <= self.omega_low {
                return Err(EraError::InvalidConfig(format!(
                    "need omega_low < omega_high, got {} and {hi}",
                    self.omega_low
                )));
            }
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(EraError::InvalidConfig(format!("k must be > 1, got {}", self.k)));
        }
        if !(self.top_frac > 0.0 && self.top_frac <= 1.0) {
            return Err(EraError::InvalidConfig(format!(
                "top_frac must lie in (0, 1], got {}",
                self.top_frac
            )));
        }
        if self.top_k_logits == Some(0) {
            return Err(EraError::InvalidConfig("top_k_logits must be positive".into()));
        }
        Ok(())
    }

    fn omega_high(&self) -> f64 {
        self.omega_high.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// `k·z`, `A/k`: response entropy is below ω_low.
    Sharpen,
    Identity,
    /// `z/k`, `k·A`: response entropy is above ω_high.
    Flatten,
}

impl Branch {
    pub fn select(h_resp: f64, advantage: f64, cfg: &EraLlmConfig) -> Self {
        if advantage > 0.0 && h_resp < cfg.omega_low {
            Branch::Sharpen
        } else if advantage > 0.0 && h_resp > cfg.omega_high() {
            Branch::Flatten
        } else {
            Branch::Identity
        }
    }

    fn logit_factor(self, k: f64) -> f64 {
        match self {
            Branch::Sharpen => k,
            Branch::Identity => 1.0,
            Branch::Flatten => 1.0 / k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards(pub Vec<f64>);

pub const GRPO_EPS: f64 = 1e-8;

/// Group-standardized rewards with the population standard deviation; a
/// group with (numerically) constant rewards gets zero advantages.
pub fn grpo_advantages(group: &GroupRewards, eps: f64) -> Result<Vec<f64>> {
    let r = &group.0;
    if r.len() < 2 {
        return Err(EraError::InvalidConfig(format!(
            "grpo needs at least 2 samples per group, got {}",
            r.len()
        )));
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; r.len()]);
    }
    Ok(r.iter().map(|x| (x - mean) / (std + eps)).collect())
}

/// Mean of the `max(1, floor(top_frac·L))` largest entropies among the `L`
/// unmasked tokens; ties go to the earlier position.
pub fn h_resp(entropies: &[f64], mask: &[bool], top_frac: f64) -> Result<f64> {
    if entropies.len() != mask.len() {
        return Err(EraError::DimensionMismatch {
            context: "h_resp mask",
            expected: entropies.len(),
            got: mask.len(),
        });
    }
    let mut valid: Vec<(usize, f64)> = entropies
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(i, (&e, _))| (i, e))
        .collect();
    if valid.is_empty() {
        return Err(EraError::EmptyInput("h_resp: every token is masked"));
    }
    let m = ((top_frac * valid.len() as f64).floor() as usize).max(1);
    valid.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(valid[..m].iter().map(|(_, e)| e).sum::<f64>() / m as f64)
}

pub fn era_transform(logits: &[f64], h_resp: f64, advantage: f64, cfg: &EraLlmConfig) -> Vec<f64> {
    let f = Branch::select(h_resp, advantage, cfg).logit_factor(cfg.k);
    logits.iter().map(|z| z * f).collect()
}

pub fn scale_advantages(advantage: f64, h_resp: f64, cfg: &EraLlmConfig) -> f64 {
    if !cfg.scale_advantages {
        return advantage;
    }
    advantage / Branch::select(h_resp, advantage, cfg).logit_factor(cfg.k)
}

/// Token-level rollout data for the update step. Arrays are row-major over
/// `(batch, time)` with vocabulary innermost for the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseBatch {
    batch: usize,
    time: usize,
    vocab: usize,
    logits: Vec<f64>,
    sampled_tokens: Vec<usize>,
    advantages: Vec<f64>,
    mask: Vec<bool>,
}

impl ResponseBatch {
    pub fn new(
        (batch, time, vocab): (usize, usize, usize),
        logits: Vec<f64>,
        sampled_tokens: Vec<usize>,
        advantages: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = batch * time;
        if n == 0 || vocab == 0 {
            return Err(EraError::EmptyInput("response batch"));
        }
        for (len, want, what) in [
            (logits.len(), n * vocab, "response logits"),
            (sampled_tokens.len(), n, "sampled tokens"),
            (advantages.len(), n, "advantages"),
            (mask.len(), n, "mask"),
        ] {
            if len != want {
                return Err(EraError::DimensionMismatch {
                    context: what,
                    expected: want,
                    got: len,
                });
            }
        }
        if let Some(t) = sampled_tokens.iter().find(|&&t| t >= vocab) {
            return Err(EraError::Domain(format!("sampled token {t} outside vocab {vocab}")));
        }
        if logits.iter().any(|z| !z.is_finite()) || advantages.iter().any(|a| !a.is_finite()) {
            return Err(EraError::Domain("non-finite logits or advantages".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(EraError::EmptyInput("response batch: every token is masked"));
        }
        Ok(Self {
            batch,
            time,
            vocab,
            logits,
            sampled_tokens,
            advantages,
            mask,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.time, self.vocab)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn sampled_tokens(&self) -> &[usize] {
        &self.sampled_tokens
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Entropy of each token's sampling distribution, `[batch·time]`.
    pub fn token_entropies(&self) -> Vec<f64> {
        self.logits.chunks(self.vocab).map(categorical_entropy_of).collect()
    }

    /// `H_resp` of every response that has at least one unmasked token;
    /// fully masked responses yield `None`.
    pub fn response_entropies(&self, top_frac: f64) -> Vec<Option<f64>> {
        let ent = self.token_entropies();
        (0..self.batch)
            .map(|b| {
                let r = b * self.time..(b + 1) * self.time;
                h_resp(&ent[r.clone()], &self.mask[r], top_frac).ok()
            })
            .collect()
    }

    /// Branch of every token. A response's branch is shared by all its
    /// positive-advantage tokens.
    pub fn token_branches(&self, cfg: &EraLlmConfig) -> Vec<Branch> {
        let hr = self.response_entropies(cfg.top_frac);
        (0..self.batch * self.time)
            .map(|i| match hr[i / self.time] {
                Some(h) => Branch::select(h, self.advantages[i], cfg),
                None => Branch::Identity,
            })
            .collect()
    }
}

/// The ERA objective `mean over unmasked tokens of log π′(a)·A′` on a tape.
/// `logits` is `[batch·time, vocab]` and must hold the batch's logits (it
/// may be a network output so gradients reach the parameters).
pub fn era_objective_tape(
    logits: &Tensor,
    batch: &ResponseBatch,
    cfg: &EraLlmConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (b, t, v) = batch.dims();
    let n = b * t;
    if logits.shape() != [n, v] {
        return Err(EraError::ShapeMismatch {
            op: "era_objective",
            lhs: logits.shape(),
            rhs: vec![n, v],
        });
    }
    let hr = batch.response_entropies(cfg.top_frac);
    let mut factors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let valid = batch.mask.iter().filter(|&&m| m).count() as f64;
    for i in 0..n {
        let h = hr[i / t];
        let adv = batch.advantages[i];
        let branch = h.map_or(Branch::Identity, |h| Branch::select(h, adv, cfg));
        factors.push(branch.logit_factor(cfg.k));
        let a = match (cfg.scale_advantages, h) {
            (true, Some(h)) => scale_advantages(adv, h, cfg),
            _ => adv,
        };
        weights.push(if batch.mask[i] { a / valid } else { 0.0 });
    }
    let tape = logits.tape();
    let transformed = if factors.iter().all(|&f| f == 1.0) {
        logits.clone()
    } else {
        logits.mul_col(&tape.constant(Array::vector(factors)))?
    };
    let logp = match cfg.top_k_logits {
        Some(k) if k < v => {
            let keep = top_k_mask(&transformed.value(), k, &batch.sampled_tokens);
            transformed.masked_log_softmax_rows(keep)?
        }
        _ => transformed.log_softmax_rows(),
    };
    Ok(logp
        .gather_cols(&batch.sampled_tokens)?
        .mul(&tape.constant(Array::vector(weights)))?
        .sum())
}

/// Keeps the `k` largest entries of every row plus the sampled token, so the
/// sampled log-probability stays finite.
fn top_k_mask(z: &Array, k: usize, sampled: &[usize]) -> Vec<bool> {
    let (rows, cols) = z.rows_cols();
    let mut keep = vec![false; rows * cols];
    let mut idx: Vec<usize> = (0..cols).collect();
    for r in 0..rows {
        let row = z.row(r);
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &idx[..k] {
            keep[r * cols + j] = true;
        }
        keep[r * cols + sampled[r]] = true;
    }
    keep
}

/// Value and gradient (w.r.t. the batch logits) of the ERA objective.
pub fn era_objective(batch: &ResponseBatch, cfg: &EraLlmConfig) -> Result<(f64, Vec<f64>)> {
    let (b, t, v) = batch.dims();
    let tape = Tape::new();
    let z = tape.param(&Array::matrix(b * t, v, batch.logits.clone())?);
    let j = era_objective_tape(&z, batch, cfg)?;
    let g = tape.backward(&j)?;
    Ok((j.item(), g.wrt(&z).into_data()))
}

/// Both sides of the policy-gradient-plus-KL decomposition for a single
/// state: the autodiff gradient of `Σ_a sg(π_a) log π′_a A′_a` and the closed
/// form `π_a A_a − C(π′_a − π_a)` with `C = Σ_{A_a>0} π_a A_a`.
pub fn decomposition_check(
    z: &[f64],
    advantages: &[f64],
    k: f64,
    branch: Branch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = z.len();
    if v == 0 {
        return Err(EraError::EmptyInput("decomposition logits"));
    }
    if advantages.len() != v {
        return Err(EraError::DimensionMismatch {
            context: "decomposition advantages",
            expected: v,
            got: advantages.len(),
        });
    }
    if !(k > 1.0) {
        return Err(EraError::InvalidConfig(format!("k must be > 1, got {k}")));
    }
    let pi = softmax(z);
    let centre: f64 = pi.iter().zip(advantages).map(|(p, a)| p * a).sum();
    let scale: f64 = pi.iter().zip(advantages).map(|(p, a)| (p * a).abs()).sum();
    if centre.abs() > 1e-9 * (1.0 + scale) {
        return Err(EraError::Domain(format!(
            "advantages must be centred under the policy, got E[A] = {centre}"
        )));
    }
    let f = branch.logit_factor(k);

    let tape = Tape::new();
    let zt = tape.param(&Array::matrix(1, v, z.to_vec())?);
    let base = zt.log_softmax_rows();
    let moved = zt.scale(f).log_softmax_rows();
    let (mut w_base, mut w_moved) = (vec![0.0; v], vec![0.0; v]);
    for a in 0..v {
        if advantages[a] > 0.0 {
            w_moved[a] = pi[a] * advantages[a] / f;
        } else {
            w_base[a] = pi[a] * advantages[a];
        }
    }
    let w = |x: Vec<f64>| tape.constant(Array::with_data(&[1, v], x));
    let obj = base
        .mul(&w(w_base))?
        .add(&moved.mul(&w(w_moved))?)?
        .sum();
    let lhs = tape.backward(&obj)?.wrt(&zt).into_data();

    let pi_moved = softmax(&z.iter().map(|x| x * f).collect::<Vec<_>>());
    let c: f64 = pi
        .iter()
        .zip(advantages)
        .filter(|(_, &a)| a > 0.0)
        .map(|(p, a)| p * a)
        .sum();
    let rhs = (0..v)
        .map(|a| pi[a] * advantages[a] - c * (pi_moved[a] - pi[a]))
        .collect();
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyFloorStat {
    pub min: f64,
    pub mean: f64,
    pub frac_below: f64,
    pub frac_above: f64,
}

/// Summary of a history of response entropies against the two thresholds.
pub fn entropy_floor_stat(history: &[f64], cfg: &EraLlmConfig) -> Result<EntropyFloorStat> {
    if history.is_empty() {
        return Err(EraError::EmptyInput("entropy history"));
    }
    let n = history.len() as f64;
    Ok(EntropyFloorStat {
        min: history.iter().copied().fold(f64::INFINITY, f64::min),
        mean: history.iter().sum::<f64>() / n,
        frac_below: history.iter().filter(|&&h| h < cfg.omega_low).count() as f64 / n,
        frac_above: history.iter().filter(|&&h| h > cfg.omega_high()).count() as f64 / n,
    })
}

/// One stage of a multi-stage threshold schedule, active on
/// `start_step..end_step` (open-ended when `end_step` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub start_step: usize,
    #[serde(default)]
    pub end_step: Option<usize>,
    pub omega_low: f64,
    #[serde(default)]
    pub omega_high: Option<f64>,
    pub k: f64,
}

/// Picks the stage active at `step`, falling back to `base` outside every
/// stage.
pub fn config_at(base: &EraLlmConfig, schedule: &[ScheduleEntry], step: usize) -> EraLlmConfig {
    schedule
        .iter()
        .find(|e| step >= e.start_step && e.end_step.is_none_or(|end| step < end))
        .map(|e| EraLlmConfig {
            omega_low: e.omega_low,
            omega_high: e.omega_high,
            k: e.k,
            ..base.clone()
        })
        .unwrap_or_else(|| base.clone())
}

/// Checks a schedule for invalid stages and overlapping step ranges.
pub fn validate_schedule(base: &EraLlmConfig, schedule: &[ScheduleEntry]) -> Result<()> {
    for (i, e) in schedule.iter().enumerate() {
        if let Some(end) = e.end_step {
            if end <= e.start_step {
                return Err(EraError::InvalidConfig(format!(
                    "schedule entry {i}: end_step {end} must exceed start_step {}",
                    e.start_step
                )));
            }
        }
        config_at(base, std::slice::from_ref(e), e.start_step)
            .validate()
            .map_err(|err| EraError::InvalidConfig(format!("schedule entry {i}: {err}")))?;
        for (j, f) in schedule.iter().enumerate().skip(i + 1) {
            let a_end = e.end_step.unwrap_or(usize::MAX);
            let b_end = f.end_step.unwrap_or(usize::MAX);
            if e.start_step < b_end && f.start_step < a_end {
                return Err(EraError::InvalidConfig(format!(
                    "schedule entries {i} and {j} overlap"
                )));
            }
        }
    }
    Ok(())
}
