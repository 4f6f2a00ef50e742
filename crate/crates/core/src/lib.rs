//! Personality-aware dialogue generation toolkit.
//!
//! A small, self-contained stack for studying personality-conditioned
//! response generation: an f64 tensor library with reverse-mode autodiff,
//! transformer building blocks, the PA3 gated persona fusion block with
//! axial attention, an unsupervised trait classifier trained through the
//! response-generation objective, a synthetic dialogue corpus generator,
//! and ROUGE/BLEU evaluation.

pub mod error;
pub mod corpus;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod personality;
pub mod rng;
pub mod seq2seq;
pub mod tensor;
