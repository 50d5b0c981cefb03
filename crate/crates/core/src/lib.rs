//! Two-phase knowledge-grounded dialogue tuning at desk scale.
//!
//! Phase 1 compresses retrieved knowledge text into `m` learnable vectors
//! through a query-transformer bottleneck trained with a reconstruction
//! plus alignment objective. Phase 2 injects those vectors into a frozen
//! decoder through gated adapters and fine-tunes only the adapters and the
//! bottleneck projection.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;


pub use error::{Error, Result};
