//! Natural language inference with a dependent-reading bidirectional LSTM.
//!
//! The model reads a premise and a hypothesis, encodes each sentence with a
//! BiLSTM whose initial state is borrowed from the other sentence's final
//! state, soft-aligns the two encodings, re-encodes the aligned sequences the
//! same dependent way, pools, and classifies into entailment / neutral /
//! contradiction. Everything runs on a small reverse-mode autodiff tape so
//! gradients come from the same code path that computes predictions.
//!
//! Module map:
//! - [`tensor`]: dense row-major tensors, the autodiff tape, gradient checking
//! - [`embeddings`]: vocabulary construction and pretrained vector loading
//! - [`encoder`]: LSTM cell, BiLSTM, dependent and multi-round reading
//! - [`attention`]: soft alignment between the two encoded sentences
//! - [`inference`]: dependent re-reading, max fusion and fixed pooling
//! - [`classifier`]: end-to-end forward pass and log loss
//! - [`config`]: model hyperparameters and ablation toggles
//! - [`trainer`]: Adam, the batch training loop, checkpoints
//! - [`data`]: corpus loading, tokenization, out-of-vocabulary recovery
//! - [`ensemble`]: probability combination and weight learning over members
//! - [`analysis`]: categorical accuracy breakdowns, paired significance,
//!   attention heatmaps

pub mod analysis;
pub mod attention;
pub mod classifier;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod inference;
pub mod tensor;
pub mod trainer;

pub use config::{Activation, ModelConfig};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
