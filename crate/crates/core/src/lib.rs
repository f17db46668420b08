//! Whisper-to-normal voice conversion.
//!
//! The conversion chain is waveform → speech units → log-mel → waveform:
//!
//! * [`stu`] encodes raw 16 kHz audio into continuous speech units, one per
//!   20 ms, using a strided convolution frontend and a transformer stack
//!   pretrained by masked prediction of k-means targets ([`units`]).
//! * [`uts`] maps unit sequences 1:1 onto log-mel frames with a
//!   non-autoregressive transformer trained on a single target voice.
//! * [`dsp::griffin_lim`] turns the predicted mel back into audio.
//!
//! Pretraining data mixes normal speech with pseudo-whisper produced by the
//! noise-excited LPC converter in [`whisperize`]. [`analysis`] measures how
//! close whispered and normal renditions sit in each representation space.

pub mod analysis;
pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod lpc;
pub mod nn;
pub mod pipeline;
pub mod stu;
pub mod units;
pub mod uts;
pub mod whisperize;

pub use audio::AudioClip;
pub use error::{Error, Result};

/// Canonical sample rate for every model-facing signal.
pub const SAMPLE_RATE: u32 = 16_000;

/// Samples per speech unit and per mel frame (20 ms at 16 kHz).
pub const FRAME_HOP: usize = 320;
