//! In-context associative learning experiments on causal language models.

pub mod backend;
pub mod engine;
pub mod error;
pub mod interference;
pub mod phases;
pub mod pipeline;
pub mod search;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
