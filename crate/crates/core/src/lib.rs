//! Multimodal knowledge distillation at desk scale.
//!
//! A small frozen visual encoder, a two-layer projector and a causal
//! decoder are composed into teacher and student models that share a
//! vocabulary. Students are trained through staged recipes whose
//! distillation stages match the teacher's output distributions at
//! response, prompt and visual positions and the self-correlation of its
//! visual-token hidden states.

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
