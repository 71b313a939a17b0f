//! Minimal tensor library: dense tensors, a reverse-mode autodiff tape, the
//! ADAM optimiser and finite-difference gradient checking.

mod adam;
mod dd;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod nn;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use dd::Dd;
pub use gradcheck::{check_params, check_params_ladder, check_params_refined, finite_difference_check, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Float;
pub use tensor::Tensor;
