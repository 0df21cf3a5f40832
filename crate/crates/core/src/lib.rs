//! Entropy regularizing activations: bounded Gaussian policies, softmax
//! heads and post-sampling logit rescaling, with verification suites and
//! small trainers.

// `!(x >= lo)` checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod distributions;
pub mod autodiff;
pub mod era;
pub mod policy;
pub mod verify;
pub mod train;

pub use error::{EraError, Result};
pub use era::continuous::{Bounding, DeltaMode, EraContinuousConfig};
pub use era::discrete::EraDiscreteConfig;
pub use era::llm::EraLlmConfig;
pub use train::classifier::ClassifierConfig;
pub use train::env::EnvKind;
pub use train::grpo::{GrpoAlgorithm, ToyGrpoConfig};
pub use train::record::{RunHeader, RunRecord};
pub use train::sac::{SacConfig, SacVariant};
pub use verify::Suite;
