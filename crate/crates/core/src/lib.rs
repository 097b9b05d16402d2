//! Toolkit for probing the layer-wise alignment and uniformity of a frozen
//! language model's hidden states and training a small bi-attention tuner
//! on top of them for dense retrieval.
//!
//! The backbone is only ever seen through cached hidden-state dumps
//! ([`hidden_states`]); nothing here can produce gradients for it.

pub mod error;
pub mod hidden_states;
pub mod ops;
pub mod pipeline;
pub mod retrieval;
pub mod space_analysis;
pub mod synthetic_llm;
pub mod tensor;
pub mod training;
pub mod tuner;

pub use error::{Error, Result};
