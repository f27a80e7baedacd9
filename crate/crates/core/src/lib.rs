//! Numerical engine for a lightweight super-resolution network guided by
//! semantic priors: tensors and reverse-mode differentiation, the network
//! blocks, image I/O and metrics, and training utilities.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod glcm;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod prior;
pub mod sgm;
pub mod sgt;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use config::{ModelConfig, ShiftMode};
pub use error::{Error, Result};
pub use params::ParameterStore;
pub use tensor::{Dims, Float, Tensor};
