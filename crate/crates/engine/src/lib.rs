//! Minimal dense reverse-mode automatic differentiation.
//!
//! Supports exactly what the tabular classifiers need: affine maps,
//! SELU/ReLU/GELU, batch and layer normalisation, multi-head attention,
//! softmax cross-entropy, token plumbing, Adam, and a finite-difference
//! checker.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{EngineError, Result};
pub use gradcheck::{check_op, grad_check, op_suite, relative_error, GradCheck};
pub use params::{AdamConfig, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{AttentionWeights, BufferUpdates, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
