//! Minimal deterministic tensor math: forward kernels, a reverse-mode tape,
//! parameter sets, SGD, gradient checking and the checkpoint file format.

pub mod checkpoint;
pub mod functional;
pub mod gradcheck;
pub mod lstm;
pub mod params;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use checkpoint::ModelCheckpoint;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{Bound, ParamSet};
pub use sgd::{sgd_step, SgdConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
