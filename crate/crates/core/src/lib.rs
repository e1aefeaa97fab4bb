//! Contextual biasing with a tree-constrained pointer-generator module.
//!
//! The crate covers the full loop on a simulated ASR model: tokenization,
//! bias-word prefix trees, the pointer/gate module and its interpolation with
//! the base model, the gate and masked-pointer training losses (plus the plain
//! ASR loss as a baseline), greedy decoding and WER/B-WER/U-WER/FAR/TAR scoring.

pub mod biaslist;
pub mod biastrie;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod pointer;
pub mod seeding;
pub mod simulator;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
