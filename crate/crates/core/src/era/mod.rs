//! The three ERA instantiations.

pub mod continuous;
pub mod discrete;
pub mod llm;

pub use continuous::{
    era_activate, era_activate_batch, residual_loss, update_delta, Bounding, DeltaMode, DeltaState,
    EraContinuousConfig,
};
pub use discrete::{era_logits, h_inv_approx, h_inv_exact, kappa, EraDiscreteConfig, Inverse};
pub use llm::{
    era_objective, era_transform, grpo_advantages, h_resp, scale_advantages, Branch,
    EraLlmConfig, GroupRewards, ResponseBatch,
};
