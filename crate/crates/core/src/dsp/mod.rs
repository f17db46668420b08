//! Deterministic signal-processing frontend.
//!
//! All transforms compute in `f64`. The STFT is non-centered: frame `t`
//! covers samples `[t·hop, t·hop + n_fft)`. The `*_aligned` variants pad the
//! clip by `(n_fft − hop)/2` on each side so frame `t` is centered on the
//! `t`-th hop block, giving `floor(len / hop)` frames, the same count and
//! timing as the speech-unit encoder.

mod griffin_lim;
mod mel;
mod stft;

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use griffin_lim::{griffin_lim, griffin_lim_with, GriffinLimOptions, GriffinLimOutput};
pub use mel::{dct2, hz_to_mel, mel_to_hz, mfcc, MelFilterbank};
pub use stft::{hann_window, istft, stft, Spectrogram};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::FRAME_HOP;

/// Natural-log floor applied before taking the log of mel energies.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: FRAME_HOP,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "stft hop must satisfy 0 < hop <= n_fft, got hop={} n_fft={}",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a clip of `len` samples, `None` if `len < n_fft`.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| (len - self.n_fft) / self.hop + 1)
    }

    /// Left/right zero padding used by the aligned transforms.
    pub fn alignment_padding(&self) -> (usize, usize) {
        let total = self.n_fft - self.hop;
        (total / 2, total - total / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    #[serde(flatten)]
    pub stft: StftConfig,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            n_mels: 80,
            sample_rate: crate::SAMPLE_RATE,
        }
    }
}

/// Frames × mel-bins matrix of natural-log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f64>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Array2<f64>, n_fft: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("mel spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            data,
            n_fft,
            hop,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
        }
    }

    /// Keeps the first `frames` frames.
    pub fn truncated(&self, frames: usize) -> MelSpectrogram {
        let frames = frames.min(self.frames());
        MelSpectrogram {
            data: self.data.slice(ndarray::s![..frames, ..]).to_owned(),
            ..*self
        }
    }

    /// One row per frame, comma-separated.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.data.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Row-major `f32` copy, the layout used for tensor export.
    pub fn to_f32_row_major(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Log-mel spectrogram with the same frame count as [`stft`].
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let fb = MelFilterbank::new(cfg.n_mels, cfg.stft.n_fft, cfg.sample_rate)?;
    let spec = stft(clip, &cfg.stft)?;
    Ok(fb.log_mel(&spec, cfg.stft.hop))
}

/// Log-mel spectrogram with `floor(len / hop)` frames, centered on hop blocks.
pub fn mel_spectrogram_aligned(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    mel_spectrogram(&pad_for_alignment(clip, &cfg.stft)?, cfg)
}

/// MFCCs computed from [`mel_spectrogram_aligned`].
pub fn mfcc_aligned(clip: &AudioClip, cfg: &MelConfig, n_coef: usize) -> Result<Array2<f64>> {
    mfcc(&mel_spectrogram_aligned(clip, cfg)?, n_coef)
}

fn pad_for_alignment(clip: &AudioClip, cfg: &StftConfig) -> Result<AudioClip> {
    cfg.validate()?;
    if clip.len() < cfg.hop {
        return Err(Error::TooShort {
            what: "clip",
            actual: clip.len(),
            minimum: cfg.hop,
        });
    }
    let (left, right) = cfg.alignment_padding();
    let mut samples = Vec::with_capacity(clip.len() + left + right);
    samples.resize(left, 0.0);
    samples.extend_from_slice(clip.samples());
    samples.resize(left + clip.len() + right, 0.0);
    AudioClip::new(samples, clip.sample_rate())
}

/// Removes the alignment padding from a waveform synthesized from aligned
/// frames, leaving exactly `frames · hop` samples.
pub fn trim_alignment(clip: &AudioClip, cfg: &StftConfig, frames: usize) -> AudioClip {
    let (left, _) = cfg.alignment_padding();
    clip.slice(left, left + frames * cfg.hop)
}

/// Mean absolute difference over the frames both spectrograms share.
pub fn mel_l1(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
    let frames = a.frames().min(b.frames());
    if frames == 0 {
        return 0.0;
    }
    let x = a.data.slice(ndarray::s![..frames, ..]);
    let y = b.data.slice(ndarray::s![..frames, ..]);
    let total: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).sum();
    total / x.len() as f64
}
