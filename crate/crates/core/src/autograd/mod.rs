//! Dense tensors, a reverse-mode tape, and MLP building blocks.

pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_with, GradCheckReport};
pub use mlp::{glorot, mlp_forward, Activation, Heads, MlpSpec};
pub use params::{read_checkpoint, write_checkpoint, ParameterStore};
pub use tape::{Gradients, Op, ParamVars, Tape, Var};
pub use tensor::Tensor;
