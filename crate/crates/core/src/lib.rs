//! ST-GFN: joint negotiation outcome and per-agent utility prediction.
//!
//! A dual-stream network over dialogue turns and a trust-weighted strategic
//! graph, blended per turn by a learned scalar gate, trained with a
//! fairness-regularized composite objective. Everything runs on a small
//! reverse-mode autodiff tape in f64, single-threaded and bit-deterministic
//! under a fixed seed.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
