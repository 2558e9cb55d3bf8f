//! Compute-matched comparison of language-model training objectives: plain
//! next-token NLL, top-k logit distillation, and two flavors of hidden-layer
//! distillation (joint and two-phase), on small causal transformers.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod teacher_cache;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{median_layer_index, ModelConfig, Regressor, RegressorKind, TransformerModel};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor, TensorError};
