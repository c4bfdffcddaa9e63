//! Dense float64 tensors with a reverse-mode tape, finite-difference
//! gradient checking, parameter storage and an Adam optimizer.

mod conv;
mod error;
pub mod gradcheck;
pub mod opsuite;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{KernelError, Result};
pub use gradcheck::{check_gradients, check_gradients_at, check_param_gradients, GradReport, DEFAULT_STEP};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;
