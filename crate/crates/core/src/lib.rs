//! Selling point extraction and assignment.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: ingestion, sentence splitting, tokenization and vocabularies.
//! * [`nn`]: a small dense numeric kernel with hand-written backpropagation.
//! * [`screener`]: transformer-encoder classifier scoring candidate selling points.
//! * [`generator`]: transformer encoder-decoder with a pointer-generator head.
//! * [`sharpening`]: recursive fine-tuning of the fine screener on its own positives.
//! * [`personalization`]: interest embeddings and cosine assignment.
//! * [`supervision`]: base/ctrl exposure-click aggregation and sample recall.
//! * [`pipeline`]: extraction orchestration, the selling point pool and serving.

pub mod corpus;
pub mod error;
pub mod generator;
pub mod nn;
pub mod personalization;
pub mod pipeline;
pub mod screener;
pub mod sharpening;
pub mod supervision;
pub mod synthetic;

pub use error::{Error, Result};
