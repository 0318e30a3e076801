//! Small CPU tensor library: dense NCHW tensors, a tape-based autodiff
//! [`Graph`], the Adam optimizer and the checkpoint [`Archive`] format.
//!
//! Everything is generic over [`Float`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod archive;
pub mod error;
pub mod float;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use archive::Archive;
pub use error::{Result, TensorError};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;
