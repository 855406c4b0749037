//! Segment-level prosody pretraining for neural TTS, at desk scale.
//!
//! The crate contains:
//! - [`tensor`]: a small f64 autodiff engine plus the transformer layers;
//! - [`features`]: log-mel extraction, alignment/corpus file handling;
//! - [`template`]: successive-DTW acoustic segment template and mask padding;
//! - [`speechbert`]: the masked-reconstruction speech encoder model;
//! - [`tts`]: the transformer TTS baseline and its dynamic-embedding variant;
//! - [`eval`]: objective prosody comparison (F0 / energy / duration);
//! - [`toygen`], [`config`], [`cli`]: synthetic corpora and the command line.

pub mod cli;
pub mod config;
pub mod eval;
pub mod features;
pub mod mat;
pub mod selfcheck;
pub mod speechbert;
pub mod template;
pub mod tensor;
pub mod toygen;
pub mod tts;
