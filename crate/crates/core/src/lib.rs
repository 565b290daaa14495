//! A small laboratory for parameter-efficient fine-tuning of encoder-decoder
//! transformers: a tape-based autodiff engine, a miniature seq2seq model,
//! adapters / prefix-tuning / BitFit / cross-attention tuning, budget
//! matching, training, translation metrics and an experiment runner.

pub mod autodiff;
pub mod budget;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod peft;
pub mod plot;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
