//! Minimal reverse-mode autodiff over `f32` tensors in NCHW layout.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{BatchNormIds, Graph, Mode, Var, BN_EPS, BN_MOMENTUM};
pub use kernels::Padding;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};

pub type Tensor = ndarray::ArrayD<f32>;
