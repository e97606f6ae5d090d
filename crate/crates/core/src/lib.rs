//! Linearizing small vision transformers: softmax attention is swapped for
//! kernelized linear attention and the student is aligned to the original
//! model block by block, then on final features, then fine-tuned.

pub mod attention;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
