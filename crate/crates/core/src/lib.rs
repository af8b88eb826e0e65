pub mod artifact;
pub mod autodiff;
pub mod cost;
pub mod par;
pub mod plan;
pub mod surgery;
pub mod tensor;
pub mod tracking;
pub mod train;
pub mod zoo;

pub use tensor::{Tensor, TensorError};
