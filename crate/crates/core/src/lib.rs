//! Desk-scale generative-recommendation serving engine.
//!
//! The pipeline: a prompt is prefetched once into a shared KV cache, beam
//! search expands item-id tuples with per-beam generated KV held in a
//! fixed unshared cache, attention runs in two stages merged by online
//! softmax, selection is masked to valid items and early-terminated, and a
//! token-capacity batching scheduler drives multiple execution lanes. A
//! paged copy-on-write baseline and a benchmark harness cover the
//! comparison studies.

pub mod attention;
pub mod beam;
pub mod config;
pub mod error;
pub mod kvcache;
pub mod metrics;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod scheduler;
pub mod validate;

pub use error::{Error, Result};
