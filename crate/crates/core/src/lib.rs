//! Voice conversion through an ASR-feature bottleneck.
//!
//! The pipeline: 16 kHz speech -> log-mel frames -> frozen convolutional
//! encoder -> half-rate latent sequence -> speaker-conditioned autoregressive
//! waveform decoder over a 256-class mu-law alphabet. New target voices are
//! fitted post hoc from small data by extending the speaker embedding table.
//! Generation runs through an incremental inference engine that is verified
//! against a naive recompute oracle, and conversions are scored with MCD/DTW
//! and a speaker-identification classifier.

pub mod audio;
pub mod cli;
pub mod decoder;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod neural;
pub mod train;

pub use error::{Error, Result};
