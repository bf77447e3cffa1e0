//! Light-weight parallel local-global vision transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`], [`tape`]: a small dense-tensor engine with
//!   deterministic kernels and reverse-mode autodiff.
//! * [`blocks`]: the network building blocks (patch embeddings, CCF-FFN+,
//!   local-window and pooled-global attention, the transformer block).
//! * [`model`]: variant configurations, network assembly, weight files.
//! * [`analysis`]: exact parameter enumeration and analytic FLOP accounting.
//! * [`oracle`]: slow loop-based reference implementations for tests.
//! * [`data`], [`train`], [`verify`]: toy dataset, SGD loop, gradient-check suite.

pub mod analysis;
pub mod blocks;
pub mod data;
pub mod error;
pub mod image;
pub mod model;
pub mod ops;
pub mod oracle;
pub mod parse;
pub mod store;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, FormatError, Result};
pub use model::{build_model, variant_config, Model, ModelConfig, Network, StageConfig};
pub use ops::{Activation, ConvParams};
pub use store::{InitScheme, ParamId, WeightStore};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
