//! Contextual-biasing ASR testbed.
//!
//! A desk-scale encoder-decoder speech recogniser with a biasing-list
//! mechanism: entities are encoded with both their text and phoneme
//! sequences, a contrastive objective separates homophones, entity-level
//! supervision targets the first token of each span, and a hierarchical
//! filter restricts inference-time attention to phonetically plausible
//! candidates behind a confidence gate. A synthetic homophone corpus
//! generator makes the whole pipeline trainable in minutes, and every
//! formula is covered by finite-difference or brute-force oracles.

pub mod asr;
pub mod biasing;
pub mod context_encoder;
pub mod error;
pub mod hef;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod phonology;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
