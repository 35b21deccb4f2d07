//! Image-to-speech synthesis toolkit.
//!
//! Region features from an object detector are fused and embedded
//! ([`encoder`]), an attention-guided autoregressive decoder predicts
//! log-mel frames ([`decoder`]), and [`audio::griffin_lim`] turns the
//! spectrogram into a waveform. [`trainer`] optimizes the composite
//! spectrogram / stop-token / embedding-constraint objective ([`losses`]) and
//! [`eval`] scores transcribed output with caption metrics.

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SasError};
