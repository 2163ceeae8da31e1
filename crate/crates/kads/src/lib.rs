//! Knowledge-augmented dialogue system for procedural action prediction.
//!
//! The system couples a dual-encoder document retriever with a conditional
//! action-sequence generator. Given a customer-agent interaction it scores
//! every document in a closed knowledge base by embedding inner product,
//! treats the retrieved document as a latent variable, and trains the whole
//! stack by maximizing the top-k marginal likelihood of the gold action
//! sequence. Training runs in three stages: dialogue-document matching to
//! warm up the retriever, action-oriented masked language modeling with
//! stochastic generator freezing, and task fine-tuning for action state
//! tracking or workflow discovery.
//!
//! Modules:
//! - [`corpus`]: data model, normalized JSON ingestion, serialization and
//!   action rendering, holdout splitting, masking, and a synthetic corpus
//!   generator with known ground truth.
//! - [`neural`]: flat-f64 tensors, reverse-mode autodiff, AdamW, gradient
//!   checking, and checkpoint persistence.
//! - [`retriever`]: the two encoder towers and retrieval distributions.
//! - [`generator`]: vocabulary, conditioned inputs, teacher-forced scoring,
//!   and greedy decoding.
//! - [`training`]: the marginal loss and the three-stage training loops.
//! - [`evaluation`]: metrics, OOD and ablation harnesses, sweeps, reports.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod neural;
pub mod retriever;
pub mod training;

pub use error::{Error, Result};
