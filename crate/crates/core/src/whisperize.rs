//! Pseudo-whisper synthesis by noise-excited LPC resynthesis.
//!
//! Each analysis frame is modelled by an all-pole envelope; the envelope is
//! re-excited with seeded white noise (discarding pitch), tilted, scaled to
//! the original frame loudness minus a fixed attenuation and overlap-added.
//! The output has exactly the input length, so a clip and its pseudo-whisper
//! are frame-synchronous.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dsp::hann_window;
use crate::error::{Error, Result};
use crate::lpc::{bandwidth_expand, lpc_analyze, LpcFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhisperizeConfig {
    pub order: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub noise_seed: u64,
    pub spectral_tilt_db_per_octave: f64,
    pub bandwidth_expansion: f64,
    pub gain_db: f64,
}

impl Default for WhisperizeConfig {
    fn default() -> Self {
        Self {
            order: 16,
            frame_len: 400,
            hop: 160,
            noise_seed: 0,
            spectral_tilt_db_per_octave: -3.0,
            bandwidth_expansion: 0.994,
            gain_db: -6.0,
        }
    }
}

impl WhisperizeConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            noise_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Config(format!(
                "whisperize hop must satisfy 0 < hop <= frame_len, got hop={} frame_len={}",
                self.hop, self.frame_len
            )));
        }
        if self.order == 0 || self.order >= self.frame_len {
            return Err(Error::Config(format!(
                "LPC order must satisfy 0 < order < frame_len, got {}",
                self.order
            )));
        }
        if !(0.0..=1.0).contains(&self.bandwidth_expansion) {
            return Err(Error::Config("bandwidth_expansion must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Frequency above which the tilt is measured; below it the gain is held.
const TILT_PIVOT_HZ: f64 = 100.0;

/// LPC frames of a clip, framed exactly as [`whisperize`] frames it.
pub fn analyze_frames(clip: &AudioClip, cfg: &WhisperizeConfig) -> Result<Vec<LpcFrame>> {
    cfg.validate()?;
    check_length(clip, cfg)?;
    let window = hann_window(cfg.frame_len);
    let x: Vec<f64> = clip.samples().iter().map(|&s| s as f64).collect();
    (0..frame_count(x.len(), cfg))
        .map(|f| lpc_analyze(&windowed(&x, f * cfg.hop, &window), cfg.order))
        .collect()
}

pub fn whisperize(clip: &AudioClip, cfg: &WhisperizeConfig) -> Result<AudioClip> {
    cfg.validate()?;
    check_length(clip, cfg)?;

    let x: Vec<f64> = clip.samples().iter().map(|&s| s as f64).collect();
    let n = x.len();
    let window = hann_window(cfg.frame_len);
    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let nfft = cfg.frame_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let tilt = tilt_curve(nfft, clip.sample_rate(), cfg.spectral_tilt_db_per_octave);
    let attenuation = 10f64.powf(cfg.gain_db / 20.0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let frames = frame_count(n, cfg);
    let mut out = vec![0.0f64; n + cfg.frame_len];
    let mut norm = vec![0.0f64; n + cfg.frame_len];
    let mut poly = vec![Complex64::new(0.0, 0.0); nfft];
    let mut noise = vec![Complex64::new(0.0, 0.0); nfft];

    for f in 0..frames {
        let start = f * cfg.hop;
        let frame = windowed(&x, start, &window);
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        let target_rms = (energy / window_power).sqrt() * attenuation;

        // Draw noise for every frame so the stream does not depend on content.
        for v in noise.iter_mut() {
            *v = Complex64::new(StandardNormal.sample(&mut rng), 0.0);
        }
        if target_rms <= 0.0 {
            continue;
        }

        let lpc = lpc_analyze(&frame, cfg.order)?;
        let a = bandwidth_expand(&lpc.coeffs, cfg.bandwidth_expansion);
        poly.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        poly[0] = Complex64::new(1.0, 0.0);
        for (i, &c) in a.iter().enumerate() {
            poly[i + 1] = Complex64::new(-c, 0.0);
        }
        fwd.process(&mut poly);
        fwd.process(&mut noise);
        for k in 0..nfft {
            let bin = k.min(nfft - k);
            let env = 1.0 / poly[k].norm().max(1e-9);
            noise[k] *= env * tilt[bin];
        }
        inv.process(&mut noise);

        let shaped: Vec<f64> = noise[..cfg.frame_len].iter().map(|c| c.re).collect();
        let rms = (shaped.iter().map(|v| v * v).sum::<f64>() / cfg.frame_len as f64).sqrt();
        if rms <= 0.0 {
            continue;
        }
        let scale = target_rms / rms;
        for (i, &s) in shaped.iter().enumerate() {
            out[start + i] += window[i] * s * scale;
        }
        for (i, &w) in window.iter().enumerate() {
            norm[start + i] += w * w;
        }
    }

    // Independent noise frames add in power, so normalize by √Σw².
    let samples = out[..n]
        .iter()
        .zip(&norm[..n])
        .map(|(&v, &w)| if w > 1e-12 { (v / w.sqrt()) as f32 } else { 0.0 })
        .collect();
    AudioClip::new(samples, clip.sample_rate())
}

fn check_length(clip: &AudioClip, cfg: &WhisperizeConfig) -> Result<()> {
    if clip.len() < cfg.frame_len {
        return Err(Error::TooShort {
            what: "clip",
            actual: clip.len(),
            minimum: cfg.frame_len,
        });
    }
    Ok(())
}

/// Frames needed to cover every sample; the last frame may run past the end.
fn frame_count(len: usize, cfg: &WhisperizeConfig) -> usize {
    (len - cfg.frame_len).div_ceil(cfg.hop) + 1
}

fn windowed(x: &[f64], start: usize, window: &[f64]) -> Vec<f64> {
    window
        .iter()
        .enumerate()
        .map(|(i, w)| x.get(start + i).copied().unwrap_or(0.0) * w)
        .collect()
}

/// Amplitude factor per FFT bin for a constant dB-per-octave slope.
fn tilt_curve(nfft: usize, sample_rate: u32, db_per_octave: f64) -> Vec<f64> {
    (0..=nfft / 2)
        .map(|k| {
            let hz = (k as f64 * sample_rate as f64 / nfft as f64).max(TILT_PIVOT_HZ);
            10f64.powf(db_per_octave * (hz / TILT_PIVOT_HZ).log2() / 20.0)
        })
        .collect()
}
