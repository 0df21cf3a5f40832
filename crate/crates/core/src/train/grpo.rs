//! Group-relative policy optimization on a toy sequence task.
//!
//! The policy emits independent per-position logits from the sum of a learned
//! position embedding and a learned prompt embedding, so all responses to one
//! prompt share the same token distributions.
//!
//! Before the policy-gradient phase the policy is fitted by cross-entropy to
//! noisy demonstrations of the hidden patterns, standing in for a pretrained
//! model that already earns some reward. The warm start draws from its own
//! stream, so paired runs at one seed share it exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Adam, Array, Mlp, ParamSet, Tape, Tensor};
use crate::era::llm::{
    config_at, era_objective_tape, grpo_advantages, validate_schedule, Branch, EraLlmConfig,
    GroupRewards, ResponseBatch, ScheduleEntry, GRPO_EPS,
};
use crate::error::{EraError, Result};
use crate::numerics::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrpoAlgorithm {
    /// Plain policy gradient on group-normalized advantages.
    Vanilla,
    Era,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyGrpoConfig {
    pub vocab: usize,
    pub length: usize,
    /// Samples per group (K).
    pub group_size: usize,
    /// Groups per update.
    pub groups: usize,
    /// Number of distinct prompts; each group draws one uniformly.
    pub prompts: usize,
    pub embed: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Hidden target sequences per prompt.
    pub patterns: usize,
    /// A response matches a pattern when it agrees on at least this many
    /// positions.
    pub min_matches: usize,
    pub task_seed: u64,
    /// Supervised steps on demonstrations before the policy-gradient phase.
    pub warm_start_steps: usize,
    /// Per-position probability that a demonstration token is the pattern's.
    pub warm_start_match: f64,
    pub era: EraLlmConfig,
    pub schedule: Vec<ScheduleEntry>,
}

impl Default for ToyGrpoConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            length: 12,
            group_size: 8,
            groups: 16,
            prompts: 1,
            embed: 16,
            hidden: 64,
            lr: 3e-3,
            patterns: 1,
            min_matches: 12,
            task_seed: 99,
            warm_start_steps: 200,
            warm_start_match: 0.6,
            era: EraLlmConfig::new(0.45, None, 2.0).expect("valid defaults"),
            schedule: Vec::new(),
        }
    }
}

impl ToyGrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.length == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(EraError::InvalidConfig(
                "vocab >= 2 and positive length, embed, hidden required".into(),
            ));
        }
        if self.group_size < 2 || self.groups == 0 || self.prompts == 0 {
            return Err(EraError::InvalidConfig(
                "need group_size >= 2, groups >= 1 and prompts >= 1".into(),
            ));
        }
        if self.patterns == 0 || self.min_matches == 0 || self.min_matches > self.length {
            return Err(EraError::InvalidConfig(format!(
                "need patterns >= 1 and 1 <= min_matches <= length ({})",
                self.length
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EraError::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warm_start_match) {
            return Err(EraError::InvalidConfig("warm_start_match must be in [0, 1]".into()));
        }
        self.era.validate()?;
        validate_schedule(&self.era, &self.schedule)
    }
}

/// The hidden patterns and the binary reward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternTask {
    /// `patterns[prompt][j]` is a full sequence.
    patterns: Vec<Vec<Vec<usize>>>,
    min_matches: usize,
}

impl PatternTask {
    pub fn new(cfg: &ToyGrpoConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.task_seed);
        let patterns = (0..cfg.prompts)
            .map(|_| {
                (0..cfg.patterns)
                    .map(|_| (0..cfg.length).map(|_| rng.gen_range(0..cfg.vocab)).collect())
                    .collect()
            })
            .collect();
        Self {
            patterns,
            min_matches: cfg.min_matches,
        }
    }

    pub fn patterns(&self, prompt: usize) -> &[Vec<usize>] {
        &self.patterns[prompt]
    }

    /// 1 when `seq` agrees with some pattern of `prompt` on at least
    /// `min_matches` positions.
    pub fn reward(&self, prompt: usize, seq: &[usize]) -> f64 {
        let hit = self.patterns[prompt].iter().any(|p| {
            p.iter().zip(seq).filter(|(a, b)| a == b).count() >= self.min_matches
        });
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

/// Position plus prompt embedding followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    positions: Array,
    prompts: Array,
    mlp: Mlp,
}

fn one_hot_rows(rows: impl Iterator<Item = usize>, cols: usize) -> Result<Array> {
    let idx: Vec<usize> = rows.collect();
    let mut data = vec![0.0; idx.len() * cols];
    for (r, &c) in idx.iter().enumerate() {
        data[r * cols + c] = 1.0;
    }
    Array::new(vec![idx.len(), cols], data)
}

impl ToyPolicy {
    pub fn new<R: Rng + ?Sized>(cfg: &ToyGrpoConfig, rng: &mut R) -> Self {
        let mut table = |rows: usize| {
            Array::new(
                vec![rows, cfg.embed],
                (0..rows * cfg.embed).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .expect("shape matches")
        };
        let positions = table(cfg.length);
        let prompts = table(cfg.prompts);
        let mut mlp = Mlp::new(&[cfg.embed, cfg.hidden, cfg.vocab], Activation::Tanh, rng);
        // start close to uniform
        mlp.scale_output_layer(0.1);
        Self {
            positions,
            prompts,
            mlp,
        }
    }

    fn forward(&self, tape: &Tape, prompts: &[usize], trainable: bool) -> Result<(Tensor, [Tensor; 2], crate::autodiff::BoundMlp)> {
        let l = self.positions.shape()[0];
        let leaf = |a: &Array| if trainable { tape.param(a) } else { tape.constant(a.clone()) };
        let (pos, pro) = (leaf(&self.positions), leaf(&self.prompts));
        let pick_pos = one_hot_rows((0..prompts.len() * l).map(|r| r % l), l)?;
        let pick_pro = one_hot_rows((0..prompts.len() * l).map(|r| prompts[r / l]), self.prompts.shape()[0])?;
        let x = tape
            .constant(pick_pos)
            .matmul(&pos)?
            .add(&tape.constant(pick_pro).matmul(&pro)?)?;
        let bound = if trainable { self.mlp.bind(tape) } else { self.mlp.bind_frozen(tape) };
        let z = bound.forward(&x)?;
        Ok((z, [pos, pro], bound))
    }

    /// `[prompts.len()·length, vocab]` logits, prompt-major.
    pub fn logits(&self, prompts: &[usize]) -> Result<Array> {
        let tape = Tape::new();
        Ok(self.forward(&tape, prompts, false)?.0.value())
    }
}

impl ParamSet for ToyPolicy {
    fn params(&self) -> Vec<(String, &Array)> {
        let mut out = vec![
            ("positions".to_string(), &self.positions),
            ("prompts".to_string(), &self.prompts),
        ];
        out.extend(self.mlp.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.positions, &mut self.prompts];
        out.extend(self.mlp.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStep {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean over responses of the top-fraction token entropy.
    pub h_resp: f64,
    /// Mean token entropy over all positions.
    pub token_entropy: f64,
    pub frac_sharpen: f64,
    pub frac_flatten: f64,
    pub frac_identity: f64,
    pub objective: f64,
    /// FNV-1a digest of the sampled tokens.
    pub sample_digest: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoRun {
    pub algorithm: GrpoAlgorithm,
    pub seed: u64,
    pub steps: usize,
    pub config: ToyGrpoConfig,
    pub trace: Vec<GrpoStep>,
}

impl GrpoRun {
    pub fn final_h_resp(&self) -> Option<f64> {
        self.trace.last().map(|s| s.h_resp)
    }
}

fn digest(tokens: &[usize]) -> u64 {
    tokens.iter().fold(0xcbf2_9ce4_8422_2325, |h, &t| {
        (h ^ t as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn sample_token<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Plain policy gradient `mean over unmasked tokens of log π(a)·A`.
pub fn vanilla_objective_tape(logits: &Tensor, batch: &ResponseBatch) -> Result<Tensor> {
    let valid = batch.mask().iter().filter(|&&m| m).count() as f64;
    let weights: Vec<f64> = batch
        .advantages()
        .iter()
        .zip(batch.mask())
        .map(|(a, &m)| if m { a / valid } else { 0.0 })
        .collect();
    let tape = logits.tape();
    Ok(logits
        .log_softmax_rows()
        .gather_cols(batch.sampled_tokens())?
        .mul(&tape.constant(Array::vector(weights)))?
        .sum())
}

const WARM_START_SALT: u64 = 0x005e_ed0f_d340;

/// Cross-entropy fit to noisy pattern demonstrations; returns the final loss.
fn warm_start(policy: &mut ToyPolicy, task: &PatternTask, cfg: &ToyGrpoConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ WARM_START_SALT);
    let mut opt = Adam::new(cfg.lr);
    let l = cfg.length;
    let n = cfg.groups * cfg.group_size;
    let mut loss = f64::NAN;
    for _ in 0..cfg.warm_start_steps {
        let prompts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.prompts)).collect();
        let mut tokens = Vec::with_capacity(n * l);
        for &p in &prompts {
            let pat = &task.patterns(p)[rng.gen_range(0..cfg.patterns)];
            for &tok in pat {
                tokens.push(if rng.gen::<f64>() < cfg.warm_start_match {
                    tok
                } else {
                    rng.gen_range(0..cfg.vocab)
                });
            }
        }
        let tape = Tape::new();
        let (z, [pos, pro], bound) = policy.forward(&tape, &prompts, true)?;
        let nll = z
            .log_softmax_rows()
            .gather_cols(&tokens)?
            .sum()
            .scale(-1.0 / (n * l) as f64);
        loss = nll.value().item();
        let grads = tape.backward(&nll)?;
        let mut g = vec![grads.wrt(&pos), grads.wrt(&pro)];
        g.extend(bound.grads(&grads));
        opt.step(policy, &g)?;
    }
    Ok(loss)
}

pub fn train_toy_grpo(
    cfg: &ToyGrpoConfig,
    algorithm: GrpoAlgorithm,
    seed: u64,
    steps: usize,
) -> Result<GrpoRun> {
    Ok(train_toy_grpo_policy(cfg, algorithm, seed, steps)?.0)
}

/// [`train_toy_grpo`], also returning the trained policy.
pub fn train_toy_grpo_policy(
    cfg: &ToyGrpoConfig,
    algorithm: GrpoAlgorithm,
    seed: u64,
    steps: usize,
) -> Result<(GrpoRun, ToyPolicy)> {
    cfg.validate()?;
    let task = PatternTask::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = ToyPolicy::new(cfg, &mut rng);
    warm_start(&mut policy, &task, cfg, seed)?;
    let mut opt = Adam::new(cfg.lr);
    let (l, v, k) = (cfg.length, cfg.vocab, cfg.group_size);
    let b = cfg.groups * k;
    // response row r·l + t reads group row (r / k)·l + t
    let replicate = one_hot_rows((0..b * l).map(|r| (r / l / k) * l + r % l), cfg.groups * l)?;
    let mut trace = Vec::with_capacity(steps);
    for step in 1..=steps {
        let step_cfg = config_at(&cfg.era, &cfg.schedule, step);
        let prompts: Vec<usize> = (0..cfg.groups).map(|_| rng.gen_range(0..cfg.prompts)).collect();
        let logits = policy.logits(&prompts)?;
        let probs: Vec<Vec<f64>> = (0..cfg.groups * l).map(|r| softmax(logits.row(r))).collect();
        let mut tokens = Vec::with_capacity(b * l);
        for g in 0..cfg.groups {
            for _ in 0..k {
                for p in &probs[g * l..(g + 1) * l] {
                    tokens.push(sample_token(p, &mut rng));
                }
            }
        }
        let rewards: Vec<f64> = tokens
            .chunks(l)
            .enumerate()
            .map(|(r, s)| task.reward(prompts[r / k], s))
            .collect();
        let mut advantages = Vec::with_capacity(b * l);
        for g in rewards.chunks(k) {
            for a in grpo_advantages(&GroupRewards(g.to_vec()), GRPO_EPS)? {
                advantages.extend(std::iter::repeat_n(a, l));
            }
        }
        let mut rep = Vec::with_capacity(b * l * v);
        for g in 0..cfg.groups {
            let rows = &logits.data()[g * l * v..(g + 1) * l * v];
            for _ in 0..k {
                rep.extend_from_slice(rows);
            }
        }
        let batch = ResponseBatch::new((b, l, v), rep, tokens.clone(), advantages, vec![true; b * l])?;

        let tape = Tape::new();
        let (z, [pos, pro], bound) = policy.forward(&tape, &prompts, true)?;
        let z = tape.constant(replicate.clone()).matmul(&z)?;
        let objective = match algorithm {
            GrpoAlgorithm::Vanilla => vanilla_objective_tape(&z, &batch)?,
            GrpoAlgorithm::Era => era_objective_tape(&z, &batch, &step_cfg)?,
        };
        let grads = tape.backward(&objective.neg())?;
        let mut g = vec![grads.wrt(&pos), grads.wrt(&pro)];
        g.extend(bound.grads(&grads));
        opt.step(&mut policy, &g)?;

        let h_resp: Vec<f64> = batch
            .response_entropies(step_cfg.top_frac)
            .into_iter()
            .map(|h| h.expect("unmasked responses"))
            .collect();
        let token_entropy = batch.token_entropies().iter().sum::<f64>() / (b * l) as f64;
        let mut counts = [0usize; 3];
        for (i, h) in h_resp.iter().enumerate() {
            let adv = batch.advantages()[i * l];
            let branch = match algorithm {
                GrpoAlgorithm::Vanilla => Branch::Identity,
                GrpoAlgorithm::Era => Branch::select(*h, adv, &step_cfg),
            };
            counts[branch as usize] += 1;
        }
        let frac = |c: usize| c as f64 / b as f64;
        trace.push(GrpoStep {
            step,
            mean_reward: rewards.iter().sum::<f64>() / b as f64,
            h_resp: h_resp.iter().sum::<f64>() / b as f64,
            token_entropy,
            frac_sharpen: frac(counts[Branch::Sharpen as usize]),
            frac_flatten: frac(counts[Branch::Flatten as usize]),
            frac_identity: frac(counts[Branch::Identity as usize]),
            objective: objective.item(),
            sample_digest: digest(&tokens),
        });
    }
    let run = GrpoRun {
        algorithm,
        seed,
        steps,
        config: cfg.clone(),
        trace,
    };
    Ok((run, policy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyGrpoConfig {
        ToyGrpoConfig {
            groups: 4,
            prompts: 6,
            hidden: 16,
            warm_start_steps: 5,
            ..ToyGrpoConfig::default()
        }
    }

    #[test]
    fn reward_counts_matching_positions() {
        let cfg = ToyGrpoConfig {
            prompts: 4,
            min_matches: 4,
            ..ToyGrpoConfig::default()
        };
        let task = PatternTask::new(&cfg);
        let p = task.patterns(3)[0].clone();
        assert_eq!(task.reward(3, &p), 1.0);
        let mut q = p.clone();
        for x in q.iter_mut().skip(cfg.min_matches) {
            *x = (*x + 1) % cfg.vocab;
        }
        assert_eq!(task.reward(3, &q), 1.0);
        q[0] = (q[0] + 1) % cfg.vocab;
        assert_eq!(task.reward(3, &q), 0.0);
    }

    #[test]
    fn policy_rows_follow_prompts() {
        let cfg = small();
        let policy = ToyPolicy::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let z = policy.logits(&[2, 5, 2]).unwrap();
        assert_eq!(z.shape(), &[3 * cfg.length, cfg.vocab]);
        let l = cfg.length;
        assert_eq!(z.row(1), z.row(2 * l + 1));
        assert_ne!(z.row(1), z.row(l + 1));
    }

    #[test]
    fn degenerate_era_is_bit_identical_to_vanilla() {
        let cfg = ToyGrpoConfig {
            era: EraLlmConfig::vanilla(),
            ..small()
        };
        let a = train_toy_grpo(&cfg, GrpoAlgorithm::Era, 3, 20).unwrap();
        let b = train_toy_grpo(&cfg, GrpoAlgorithm::Vanilla, 3, 20).unwrap();
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.h_resp.to_bits(), y.h_resp.to_bits());
            assert_eq!(x.objective.to_bits(), y.objective.to_bits());
            assert_eq!(x.sample_digest, y.sample_digest);
        }
    }

    #[test]
    fn era_leaves_sampling_untouched() {
        let a = train_toy_grpo(&small(), GrpoAlgorithm::Era, 5, 1).unwrap();
        let b = train_toy_grpo(&small(), GrpoAlgorithm::Vanilla, 5, 1).unwrap();
        assert_eq!(a.trace[0].sample_digest, b.trace[0].sample_digest);
        assert_eq!(a.trace[0].mean_reward, b.trace[0].mean_reward);
    }

    #[test]
    fn branch_fractions_partition() {
        let run = train_toy_grpo(&small(), GrpoAlgorithm::Era, 1, 10).unwrap();
        for s in &run.trace {
            assert!((s.frac_sharpen + s.frac_flatten + s.frac_identity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ToyGrpoConfig {
            min_matches: 13,
            ..ToyGrpoConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ToyGrpoConfig {
            group_size: 1,
            ..ToyGrpoConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    #[ignore = "exploratory sweep; prints traces"]
    fn sweep() {
        let steps: usize = std::env::var("STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(400);
        let mm: usize = std::env::var("MM").ok().and_then(|s| s.parse().ok()).unwrap_or(12);
        let prompts: usize = std::env::var("PROMPTS").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
        let warm: usize = std::env::var("WARM").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
        let q: f64 = std::env::var("Q").ok().and_then(|s| s.parse().ok()).unwrap_or(0.6);
        let patterns: usize = std::env::var("PATTERNS").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
        let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
        let cfg = ToyGrpoConfig {
            min_matches: mm,
            prompts,
            patterns,
            warm_start_steps: warm,
            warm_start_match: q,
            lr,
            ..ToyGrpoConfig::default()
        };
        for seed in 0..3 {
            let t0 = std::time::Instant::now();
            let v = train_toy_grpo(&cfg, GrpoAlgorithm::Vanilla, seed, steps).unwrap();
            let e = train_toy_grpo(&cfg, GrpoAlgorithm::Era, seed, steps).unwrap();
            println!("seed {seed} ({:.1}s)", t0.elapsed().as_secs_f64());
            for i in (0..steps).step_by(steps / 10).chain([steps - 1]) {
                let (a, b) = (&v.trace[i], &e.trace[i]);
                println!(
                    "  {:4} vanilla r={:.2} h={:.3} | era r={:.2} h={:.3} sharpen={:.2}",
                    a.step, a.mean_reward, a.h_resp, b.mean_reward, b.h_resp, b.frac_sharpen
                );
            }
            let min_after = e.trace[100.min(steps - 1)..].iter().map(|s| s.h_resp).fold(f64::INFINITY, f64::min);
            let sh = e.trace.iter().map(|s| s.frac_sharpen).sum::<f64>() / steps as f64;
            let rv = v.trace[steps - 100..].iter().map(|s| s.mean_reward).sum::<f64>() / 100.0;
            let re = e.trace[steps - 100..].iter().map(|s| s.mean_reward).sum::<f64>() / 100.0;
            println!("  min era h after 100: {min_after:.3} mean sharpen {sh:.3} late reward v={rv:.2} e={re:.2}");
        }
    }
}
