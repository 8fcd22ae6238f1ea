//! Parameter-efficient prompt tuning with a hierarchical-label-refining
//! verbalizer, built on a small frozen transformer MLM.
//!
//! The pipeline templates an argument pair with soft prompt slots, runs a
//! frozen encoder to get the hidden state h' at the mask position, refines
//! upper-level label embeddings bottom-up from the trainable bottom matrix
//! and per-edge weight units, and predicts one label per hierarchy level as
//! `softmax(M^z h')`. Only three parameter groups ever train: the prompt
//! matrix, the bottom label embeddings, and the weight units.
//!
//! Instance-level loops (batch forward/backward, evaluation) fan out over
//! rayon when the default `parallel` feature is on; results are reduced in
//! input order, so parallel and sequential runs are bit-identical.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod hlr;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tape;
pub mod template;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::PemiModel;
pub use parallel::ExecMode;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
