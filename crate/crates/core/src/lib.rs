//! Zero-shot text classification by answering multiple-choice questions.
//!
//! A small decoder-only language model is pretrained to pick a document's
//! title out of a list of candidate titles. At test time the class
//! descriptors of an unseen task become the candidate list and the
//! generated answer is the prediction.

pub mod corpus;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod grammar;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
