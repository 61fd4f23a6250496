//! Text-based sequential recommendation with a joint-embedding predictive
//! pretraining objective.
//!
//! Items are rendered as attribute/value sentences and encoded by a
//! bidirectional transformer with token, token-position, token-type and
//! item-position embeddings. Pretraining combines an in-batch
//! sequence-item contrastive loss, masked-token prediction and a mapping loss
//! that predicts target-encoder item representations from the user
//! representation; the target encoder follows the context encoder by
//! exponential moving average. Finetuning ranks the whole catalog by cosine
//! similarity.
//!
//! Module map:
//! - [`corpus`]: item catalogs, five-core filtering, leave-one-out splits, synthetic data
//! - [`tokenizer`]: vocabulary and model-input assembly
//! - [`embedding`], [`encoder`]: the network
//! - [`masking`], [`objectives`]: pretraining views and losses
//! - [`trainer`], [`checkpoint`]: optimization and persistence
//! - [`evaluator`]: ranking metrics and studies
//! - [`cli`]: the command-line surface

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
