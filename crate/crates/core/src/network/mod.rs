//! Autodiff core, layer configuration and the two detector families.

pub mod autodiff;
pub mod config;
pub mod kernels;
pub mod model;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Graph, NodeId};
pub use config::{flops_estimate, Architecture, Family, LayerCost, LayerSpec, NetworkConfig};
pub use model::{build_forward, forward, vfe_layer, Heads, Mode, NetInput};
pub use params::ParamStore;
pub use tensor::Tensor;

#[cfg(test)]
mod autodiff_tests;
