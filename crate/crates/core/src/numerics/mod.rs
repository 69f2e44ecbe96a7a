//! Dense tensors, reverse-mode differentiation, SGD, finite-difference
//! gradient checking, and parameter checkpoints.

mod checkpoint;
mod gradcheck;
pub mod init;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use optim::Sgd;
pub use params::{Gradients, ParamId, ParamSet, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
