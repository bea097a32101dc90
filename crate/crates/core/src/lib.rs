//! Desk-scale BERT-style sentiment classification.
//!
//! Everything is built from scratch on a small reverse-mode autodiff core:
//!
//! ```text
//! text ─▶ tokenizer ─▶ embedding (token + segment + position)
//!      ─▶ encoder (N × post-norm self-attention + FFN)
//!      ─▶ [CLS] head ─▶ negative / neutral / positive
//! ```
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the element type to `f64`, which is what training uses.

pub mod balance;
pub mod checkpoint;
pub mod classify;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use balance::{BalanceStrategy, ClassHistogram};
pub use classify::{train, Prediction, TrainConfig, TrainingCurve};
pub use dataset::{DataFormat, Label, LabeledDataset, LabeledExample};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use optim::{Algorithm, OptimizerConfig};
pub use pretrain::{MaskedBatch, PretrainConfig};
pub use scalar::Scalar;
pub use tokenizer::{EncodedSequence, Vocab};

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ComputeGraph = graph::ComputeGraph<f64>;
pub type ModelParams = params::ParamStore<f64>;
pub type BertModel = model::BertModel<f64>;
pub type BertModel32 = model::BertModel<f32>;
pub type Classifier = classify::Classifier<f64>;
pub type Classifier32 = classify::Classifier<f32>;
pub type Optimizer = optim::Optimizer<f64>;
