//! Hierarchical cross-attention pre-training of a small vision encoder
//! against a small causal language model, with FLOP accounting and
//! gradient/attention introspection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autograd::{Component, Tape, Var, IGNORE_INDEX};
pub use error::{HiveError, Result};
pub use model::{Arch, HiveModel, Mode, ModelConfig};
pub use tensor::{Precision, Tensor};
