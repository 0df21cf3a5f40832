//! Desk-scale training loops.

pub mod classifier;
pub mod env;
pub mod grpo;
pub mod record;
pub mod replay;
pub mod sac;
