//! Reverse-mode differentiation on dense row-major matrices, transformer
//! layers, Adam, and the `XEDT` checkpoint format.
//!
//! Training runs in `f32`; `f64` exists for gradient checks.

pub mod checkpoint;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use element::Element;
pub use error::{NnError, Result};
pub use graph::{AttnMask, Graph, Reduction, Var};
pub use layers::{Linear, LayerNorm, Transformer, TransformerConfig};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;
