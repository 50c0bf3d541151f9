//! Tensor engine, network blocks, optimizer, and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_params, ParamCheck};
pub use nn::{Graph, Linear, Mode, ParamId, ParamStore, Transformer};
pub use optim::{adamw_step, cosine_schedule, OptimizerState};
pub use tensor::{cross_entropy, Array, Tensor};
