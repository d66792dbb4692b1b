//! Streaming anomaly detection with on-the-fly concept-drift adaptation.
//!
//! The engine couples four pieces:
//!
//! - a static autoencoder detector trained once on historical data
//!   ([`autoencoder`]),
//! - an evidential (Dirichlet) controller whose concept-uncertainty signal
//!   decides when the static view is stale ([`controller`]),
//! - an instance-conditioned hypernetwork that generates additive per-layer
//!   parameter shifts for the autoencoder, scoring drifted inputs without
//!   retraining ([`hypernet`]),
//! - a sliding-window offline updater that fine-tunes and republishes the
//!   model bundle when excess uncertainty accumulates ([`updater`]).
//!
//! [`engine`] orchestrates two-stage training and the streaming loop,
//! [`data`] handles ingestion and synthetic drift streams, and [`eval`]
//! provides ranking metrics and the JSONL trace format.

pub mod config;
pub mod controller;
pub mod autoencoder;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod hypernet;
pub mod nn;
pub mod updater;

pub use config::MeterConfig;
pub use error::{MeterError, Result};
