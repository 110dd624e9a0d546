//! Desk-scale skeleton action recognition with a language-model feedback loop.
//!
//! A graph-convolutional recognizer is trained jointly with guidance distilled
//! from an LLM: a confusion-driven prompter turns per-epoch recognition
//! statistics into targeted prompts, and a response parser converts the
//! answers into joint-level constraints and text embeddings that enter the
//! objective as auxiliary losses.

pub mod error;
pub mod graph;
pub mod model;
pub mod par;
pub mod checkpoint;
pub mod data;
pub mod language;
pub mod questioner;
pub mod selector;
pub mod trainer;
mod util;

pub use error::{Error, Result};
