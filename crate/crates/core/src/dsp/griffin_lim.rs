use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::stft::StftPlan;
use super::{MelFilterbank, MelSpectrogram, LOG_FLOOR};
use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriffinLimOptions {
    pub iterations: usize,
    /// Multiplicative-update steps for the non-negative mel inversion.
    pub nnls_iterations: usize,
    /// Seed of the initial random phase.
    pub seed: u64,
}

impl Default for GriffinLimOptions {
    fn default() -> Self {
        Self {
            iterations: 32,
            nnls_iterations: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// Linear magnitudes recovered from the mel frames.
    pub target_magnitude: Array2<f64>,
    /// ‖|STFT(y)| − M‖ / ‖M‖ of the returned waveform.
    pub spectral_convergence: f64,
}

/// Waveform of `(frames − 1)·hop + n_fft` samples whose STFT magnitude
/// approximates the linear spectrum implied by `mel`.
pub fn griffin_lim(mel: &MelSpectrogram, iterations: usize) -> Result<AudioClip> {
    Ok(griffin_lim_with(
        mel,
        &GriffinLimOptions {
            iterations,
            ..Default::default()
        },
    )?
    .clip)
}

pub fn griffin_lim_with(mel: &MelSpectrogram, opts: &GriffinLimOptions) -> Result<GriffinLimOutput> {
    if mel.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("mel spectrogram contains non-finite values".into()));
    }
    if mel.frames() == 0 {
        return Err(Error::Invalid("mel spectrogram has no frames".into()));
    }
    let fb = MelFilterbank::new(mel.n_mels(), mel.n_fft, mel.sample_rate)?;
    let target = mel_to_linear(mel, &fb, opts.nnls_iterations);
    let plan = StftPlan::new(&mel.stft_config())?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut phase: Array2<Complex64> = Array2::from_shape_fn(target.raw_dim(), |_| {
        Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
    });

    let mut spec = combine(&target, &phase);
    let mut wave = plan.inverse(&spec);
    for _ in 0..opts.iterations {
        let rebuilt = plan.forward(&wave)?;
        for (p, c) in phase.iter_mut().zip(rebuilt.iter()) {
            let n = c.norm();
            *p = if n > 1e-12 { c / n } else { Complex64::new(1.0, 0.0) };
        }
        spec = combine(&target, &phase);
        wave = plan.inverse(&spec);
    }

    let spectral_convergence = spectral_convergence(&plan.forward(&wave)?, &target);
    let clip = AudioClip::new(wave.into_iter().map(|s| s as f32).collect(), mel.sample_rate)?;
    Ok(GriffinLimOutput {
        clip,
        target_magnitude: target,
        spectral_convergence,
    })
}

fn combine(mag: &Array2<f64>, phase: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = phase.clone();
    out.zip_mut_with(mag, |p, &m| *p *= m);
    out
}

pub(crate) fn spectral_convergence(spec: &Array2<Complex64>, target: &Array2<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, &m) in spec.iter().zip(target.iter()) {
        let d = c.norm() - m;
        num += d * d;
        den += m * m;
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

/// Per-frame non-negative least squares `min ‖F p − m‖, p ≥ 0` by
/// multiplicative updates, returning `sqrt(p)` as linear magnitude.
///
/// Mel entries sitting on the log floor are treated as zero energy.
fn mel_to_linear(mel: &MelSpectrogram, fb: &MelFilterbank, iterations: usize) -> Array2<f64> {
    let n_bins = fb.n_bins();
    let floor = LOG_FLOOR.ln() + 1e-9;
    let mut out = Array2::zeros((mel.frames(), n_bins));

    // Fᵀ F 1: the denominator of the initial guess.
    let mut ones_mel = vec![0.0; fb.n_mels()];
    let ones = vec![1.0; n_bins];
    fb.apply(&ones, &mut ones_mel);
    let mut col_weight = vec![0.0; n_bins];
    fb.apply_transpose(&ones_mel, &mut col_weight);

    let mut m = vec![0.0; fb.n_mels()];
    let mut ftm = vec![0.0; n_bins];
    let mut fp = vec![0.0; fb.n_mels()];
    let mut ftfp = vec![0.0; n_bins];
    for t in 0..mel.frames() {
        for (dst, &v) in m.iter_mut().zip(mel.data.row(t)) {
            *dst = if v <= floor { 0.0 } else { v.exp() };
        }
        fb.apply_transpose(&m, &mut ftm);
        let mut p: Vec<f64> = ftm
            .iter()
            .zip(&col_weight)
            .map(|(&a, &w)| if w > 0.0 { a / w } else { 0.0 })
            .collect();
        for _ in 0..iterations {
            fb.apply(&p, &mut fp);
            fb.apply_transpose(&fp, &mut ftfp);
            for ((pi, &num), &den) in p.iter_mut().zip(&ftm).zip(&ftfp) {
                *pi = if den > 0.0 { *pi * num / den } else { 0.0 };
            }
        }
        for (dst, &v) in out.row_mut(t).iter_mut().zip(&p) {
            *dst = v.max(0.0).sqrt();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, stft, MelConfig, StftConfig};
    use std::f64::consts::PI;

    fn sine_mel(freq: f64) -> MelSpectrogram {
        let clip = AudioClip::from_samples(
            (0..16_000)
                .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
        )
        .unwrap();
        mel_spectrogram(&clip, &MelConfig::default()).unwrap()
    }

    fn dominant_bin(clip: &AudioClip) -> usize {
        let spec = stft(clip, &StftConfig::default()).unwrap();
        let mut total = vec![0.0; spec.bins()];
        for row in spec.magnitudes().rows() {
            for (t, v) in total.iter_mut().zip(row) {
                *t += v;
            }
        }
        total
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn resynthesized_tone_keeps_its_frequency() {
        let mel = sine_mel(440.0);
        let out = griffin_lim(&mel, 32).unwrap();
        let expected = 440.0 * 1024.0 / 16_000.0;
        let got = dominant_bin(&out) as f64;
        assert!((got - expected).abs() <= 1.0 + 0.5, "bin {got} vs {expected}");
    }

    #[test]
    fn output_length_follows_frame_count() {
        let mel = sine_mel(300.0);
        let out = griffin_lim(&mel, 2).unwrap();
        assert_eq!(out.len(), (mel.frames() - 1) * 320 + 1024);
    }

    #[test]
    fn all_floor_mel_is_near_silent() {
        let mel = mel_spectrogram(&AudioClip::silence(8000, 16_000), &MelConfig::default()).unwrap();
        let out = griffin_lim(&mel, 32).unwrap();
        assert!(out.rms() < 1e-3);
    }

    #[test]
    fn iterating_does_not_increase_spectral_convergence() {
        let mel = sine_mel(700.0);
        let sc = |iters| {
            griffin_lim_with(
                &mel,
                &GriffinLimOptions {
                    iterations: iters,
                    ..Default::default()
                },
            )
            .unwrap()
            .spectral_convergence
        };
        let s0 = sc(0);
        let s32 = sc(32);
        assert!(s32 <= s0, "{s32} > {s0}");
    }

    #[test]
    fn non_finite_mel_is_rejected() {
        let mut mel = sine_mel(440.0);
        mel.data[[0, 0]] = f64::NAN;
        assert!(griffin_lim(&mel, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let mel = sine_mel(350.0);
        assert_eq!(griffin_lim(&mel, 4).unwrap(), griffin_lim(&mel, 4).unwrap());
    }
}
