//! Discrete speech-unit language modeling at desk scale.
//!
//! The pipeline: log-mel features from WAV audio, a k-means unit codec with
//! adjacent-duplicate removal and Griffin-Lim synthesis, a byte-level
//! vocabulary expanded with unit tokens, an instruction dataset builder
//! (cross-modal ASR/TTS triplets and chain-of-modality quadruplets), a small
//! decoder-only transformer with LoRA adapters, a three-stage trainer, and
//! chain-of-modality inference.

pub mod audio;
pub mod chain;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod lm;
pub mod synth;
pub mod t2u;
pub mod templates;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};

/// Caps the data-parallel worker pool. A no-op for 0 or when a pool already
/// exists; results never depend on the worker count.
pub fn configure_workers(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
