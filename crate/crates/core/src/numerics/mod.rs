//! Dense tensors, forward kernels, a gradient tape and the `CVTH` container.

mod container;
mod gradcheck;
pub mod kernels;
pub mod op_checks;
mod real;
mod sparse;
mod tape;
mod tensor;

pub use container::{load_container, read_container, save_container, write_container, TensorMap};
pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{activation, concat, conv2d, layer_norm, matmul, slice, softmax, transpose, Activation};
pub use real::Real;
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var, NO_SOURCE};
pub use tensor::Tensor;
