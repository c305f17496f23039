//! Desk-scale language-modeling laboratory.
//!
//! A small decoder-only transformer trained with a multi-task objective:
//! next-token language modeling plus a length-normalized ranking loss that
//! biases the model toward sensible continuations. Includes a BPE tokenizer,
//! a two-stage training pipeline with a triangular learning-rate schedule,
//! an evaluation harness (subword/word perplexity, prompt ranking,
//! multiple-choice ranking), and a nucleus sampler.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluator;
pub mod fixtures;
pub mod model;
pub mod objectives;
pub mod optimizer;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use tensor::{Graph, NodeId, Tensor, TensorError};
