//! Emotion-guided neural speech codec at desk scale.
//!
//! A convolutional/recurrent waveform encoder feeds a guidance stage that mixes
//! emotion and semantic teacher sequences into the latent by cross-attention,
//! a residual vector quantizer with EMA codebooks, and a mirrored decoder.
//! Training combines multi-resolution mel reconstruction, hinge adversarial and
//! feature-matching losses, commitment, relational distillation on the first
//! quantizer layer, and an emotion-weighted text alignment loss. A small
//! autoregressive/non-autoregressive token language model consumes the codes.
//!
//! Teachers are deterministic synthetic maps of DSP features, so every part of
//! the pipeline runs and can be verified on a single CPU core.

pub mod adversary;
pub mod backbone;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod guidance;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod rvq;
pub mod token_lm;
pub mod trainer;

pub use error::{Error, Result};
