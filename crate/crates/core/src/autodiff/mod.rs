//! Minimal reverse-mode autodiff, small networks and an optimizer.

mod adam;
mod array;
pub mod checkpoint;
mod fdcheck;
mod gradcheck;
mod nn;
mod tape;

pub use adam::Adam;
pub use array::Array;
pub use fdcheck::{finite_difference_check, FD_STEP};
pub use gradcheck::{op_gradchecks, OP_TOL};
pub use nn::{polyak_update, Activation, BoundMlp, Mlp, ParamSet};
pub use tape::{Gradients, Tape, Tensor};

