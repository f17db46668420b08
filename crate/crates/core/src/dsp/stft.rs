use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::StftConfig;
use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Complex STFT, frames × (n_fft/2 + 1).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub n_fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub(crate) struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft: cfg.n_fft,
            hop: cfg.hop,
            window: hann_window(cfg.n_fft),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn forward(&self, samples: &[f64]) -> Result<Array2<Complex64>> {
        let frames = StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
        }
        .frame_count(samples.len())
        .ok_or(Error::TooShort {
            what: "clip",
            actual: samples.len(),
            minimum: self.n_fft,
        })?;
        let bins = self.n_fft / 2 + 1;
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(samples[start + i] * self.window[i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (k, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = buf[k];
            }
        }
        Ok(out)
    }

    /// Least-squares inverse (weighted overlap-add). Output length is
    /// `(frames − 1)·hop + n_fft`.
    pub fn inverse(&self, spec: &Array2<Complex64>) -> Vec<f64> {
        let frames = spec.nrows();
        if frames == 0 {
            return Vec::new();
        }
        let n = self.n_fft;
        let len = (frames - 1) * self.hop + n;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let bins = n / 2 + 1;
        for t in 0..frames {
            let row = spec.row(t);
            for k in 0..bins {
                buf[k] = row[k];
            }
            // Hermitian completion.
            for k in bins..n {
                buf[k] = row[n - k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += w * buf[i].re / n as f64;
                norm[start + i] += w * w;
            }
        }
        for (o, &w) in out.iter_mut().zip(&norm) {
            if w > 1e-10 {
                *o /= w;
            } else {
                *o = 0.0;
            }
        }
        out
    }
}

/// Short-time Fourier transform with a Hann window and no centering.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    let plan = StftPlan::new(cfg)?;
    let samples: Vec<f64> = clip.samples().iter().map(|&s| s as f64).collect();
    Ok(Spectrogram {
        data: plan.forward(&samples)?,
        n_fft: cfg.n_fft,
        hop: cfg.hop,
    })
}

/// Inverse of [`stft`] by windowed least-squares overlap-add.
pub fn istft(spec: &Spectrogram, sample_rate: u32) -> Result<AudioClip> {
    let plan = StftPlan::new(&StftConfig {
        n_fft: spec.n_fft,
        hop: spec.hop,
    })?;
    let samples = plan.inverse(&spec.data).into_iter().map(|s| s as f32).collect();
    AudioClip::new(samples, sample_rate)
}
