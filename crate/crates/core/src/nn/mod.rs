//! Minimal deterministic f32 network engine: tensors, kernels with hand
//! written backward passes, named parameters and the residual blocks.

pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use layers::{ForwardCtx, StatUpdate};
pub use params::{Gradients, Param, ParamKind, ParamStore};
pub use tensor::Tensor;
