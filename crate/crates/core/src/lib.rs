//! Hybrid CTC/attention speech recognizer for code-switched speech, built
//! from scratch: autodiff tensors, a synthetic bilingual corpus, a conformer
//! encoder with attention decoders, an auxiliary language-diarization
//! decoder, joint beam-search decoding, and a mixed error rate scorer.
//!
//! The `parallel` feature (on by default) runs batch work through rayon;
//! without it every code path falls back to sequential iteration with
//! identical results.

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod vocab;
