//! Dense f64 tensors and a reverse-mode tape for backpropagating through
//! unrolled solver steps.

pub mod checkpoint;
mod error;
mod params;
pub mod spectral;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{BoundParams, GradMap, Param, ParamStore};
pub use spectral::{path_seed, spectral_norm};
pub use tape::{sigmoid, softplus, Gradients, Tape, Unary, Var};
pub use tensor::{broadcast_shape, matmul, Tensor};
