//! Sentence-level dynamic fusion of LoRA adapters.
//!
//! A small classifier reads each new sentence (its first token plus recent
//! history), picks every task whose probability clears a threshold, and the
//! chosen adapters are fused into a decoder backbone through contiguous
//! stacked low-rank tensors until the next sentence starts.

pub mod backbone;
pub mod bench;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod router;

pub use error::{Error, Result};
