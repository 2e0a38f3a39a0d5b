//! Staged speech-text emotion recognition in conversations.
//!
//! Transcripts are pseudo-labeled for sentiment by an LLM annotator and used
//! to pre-train a text encoder. Each modality then goes through an
//! utterance-level stage and a conversation-context stage, and a co-attention
//! stage fuses the two.

pub mod annotator;
pub mod autograd;
pub mod checkpoint;
pub mod context;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
