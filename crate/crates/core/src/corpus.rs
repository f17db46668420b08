//! Synthetic speech corpora.
//!
//! Utterances are sequences of vowel-like segments: a glottal pulse train
//! with a drifting pitch contour is passed through a cascade of formant
//! resonators whose targets switch per segment. Every utterance carries its
//! per-20 ms class labels so experiments can check what the models learn.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::whisperize::{whisperize, WhisperizeConfig};
use crate::{FRAME_HOP, SAMPLE_RATE};

/// Formant frequency and bandwidth in Hz.
pub type Formant = (f64, f64);

/// Vowel-like formant targets; classes are taken from the front of the list.
pub const PHONEME_TABLE: [[Formant; 3]; 8] = [
    [(730.0, 110.0), (1090.0, 120.0), (2440.0, 180.0)],
    [(290.0, 90.0), (2250.0, 140.0), (3000.0, 200.0)],
    [(320.0, 90.0), (870.0, 110.0), (2240.0, 180.0)],
    [(530.0, 100.0), (1840.0, 130.0), (2480.0, 180.0)],
    [(570.0, 100.0), (840.0, 110.0), (2410.0, 180.0)],
    [(660.0, 110.0), (1720.0, 130.0), (2410.0, 180.0)],
    [(440.0, 100.0), (1020.0, 120.0), (2240.0, 180.0)],
    [(390.0, 95.0), (1990.0, 130.0), (2550.0, 190.0)],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub f0_hz: f64,
    /// Multiplier applied to every formant frequency (vocal-tract length).
    pub formant_scale: f64,
}

impl Speaker {
    pub const TARGET: Speaker = Speaker {
        f0_hz: 110.0,
        formant_scale: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub clip: AudioClip,
    /// Class of the segment covering the center of each 20 ms block.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub n_utterances: usize,
    pub duration_secs: f64,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    pub seed: u64,
    pub speakers: Vec<Speaker>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_utterances: 24,
            duration_secs: 1.0,
            min_segment_ms: 100.0,
            max_segment_ms: 240.0,
            seed: 0,
            speakers: vec![
                Speaker { f0_hz: 105.0, formant_scale: 1.0 },
                Speaker { f0_hz: 140.0, formant_scale: 1.05 },
                Speaker { f0_hz: 190.0, formant_scale: 1.12 },
                Speaker { f0_hz: 125.0, formant_scale: 0.96 },
            ],
        }
    }
}

impl CorpusConfig {
    /// Single-voice corpus for decoder training.
    pub fn single_speaker(speaker: Speaker, n_utterances: usize, seed: u64) -> Self {
        Self {
            n_utterances,
            seed,
            speakers: vec![speaker],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > PHONEME_TABLE.len() {
            return Err(Error::Config(format!(
                "n_classes must be in 1..={}",
                PHONEME_TABLE.len()
            )));
        }
        if self.speakers.is_empty() {
            return Err(Error::Config("corpus needs at least one speaker".into()));
        }
        if !(self.min_segment_ms > 0.0 && self.min_segment_ms <= self.max_segment_ms) {
            return Err(Error::Config("segment duration bounds are invalid".into()));
        }
        if self.duration_secs * (SAMPLE_RATE as f64) < FRAME_HOP as f64 {
            return Err(Error::Config("utterances must last at least 20 ms".into()));
        }
        Ok(())
    }
}

/// Generates `n_utterances` utterances, cycling through the speakers.
pub fn generate(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let len = (cfg.duration_secs * SAMPLE_RATE as f64).round() as usize;
    (0..cfg.n_utterances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let speaker = cfg.speakers[i % cfg.speakers.len()];
            synth_utterance(cfg, speaker, len, &mut rng)
        })
        .collect()
}

/// Pseudo-whisper version of every clip, seeded by corpus index.
pub fn whisperize_all(clips: &[AudioClip], base_seed: u64) -> Result<Vec<AudioClip>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| whisperize(c, &WhisperizeConfig::with_seed(base_seed.wrapping_add(i as u64))))
        .collect()
}

fn synth_utterance(cfg: &CorpusConfig, speaker: Speaker, len: usize, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    // Segment plan.
    let mut bounds = Vec::new();
    let mut pos = 0usize;
    let mut prev = usize::MAX;
    while pos < len {
        let ms = rng.random_range(cfg.min_segment_ms..=cfg.max_segment_ms);
        let seg = ((ms / 1000.0) * SAMPLE_RATE as f64) as usize;
        let mut class = rng.random_range(0..cfg.n_classes);
        if cfg.n_classes > 1 && class == prev {
            class = (class + 1 + rng.random_range(0..cfg.n_classes - 1)) % cfg.n_classes;
        }
        prev = class;
        bounds.push((pos, (pos + seg.max(1)).min(len), class));
        pos += seg.max(1);
    }

    // Pitch contour: slow sinusoidal drift plus a declination.
    let drift_hz = rng.random_range(0.5..2.0);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let f0: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            speaker.f0_hz * (1.0 + 0.08 * (2.0 * PI * drift_hz * t + drift_phase).sin() - 0.05 * t)
        })
        .collect();
    let mut excitation = pulse_train_contour(&f0, SAMPLE_RATE);
    for v in excitation.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v += 0.02 * n;
    }

    let mut bank = ResonatorBank::new(3);
    let mut out = vec![0.0; len];
    for &(start, end, class) in &bounds {
        let formants: Vec<Formant> = PHONEME_TABLE[class]
            .iter()
            .map(|&(f, bw)| (f * speaker.formant_scale, bw))
            .collect();
        bank.retune(&formants, SAMPLE_RATE);
        for n in start..end {
            out[n] = bank.process(excitation[n]);
        }
    }

    // 15 ms fades at both ends, then peak-normalize with a random level.
    let fade = (0.015 * SAMPLE_RATE as f64) as usize;
    for i in 0..fade.min(len / 2) {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        out[i] *= g;
        out[len - 1 - i] *= g;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let level = rng.random_range(0.35..0.6);
    let samples = out.iter().map(|v| (v / peak * level) as f32).collect();

    let labels = (0..len / FRAME_HOP)
        .map(|t| {
            let center = t * FRAME_HOP + FRAME_HOP / 2;
            bounds
                .iter()
                .find(|&&(s, e, _)| center >= s && center < e)
                .map(|b| b.2)
                .unwrap_or(0)
        })
        .collect();
    Ok(Utterance {
        clip: AudioClip::from_samples(samples)?,
        labels,
    })
}

/// Glottal-like pulse train at a constant fundamental.
pub fn glottal_pulse_train(f0_hz: f64, len: usize, sample_rate: u32) -> Vec<f64> {
    pulse_train_contour(&vec![f0_hz; len], sample_rate)
}

/// Pulse train following a per-sample f0 contour. Each period is a
/// Rosenberg glottal-flow derivative pulse (40% opening, 16% closing).
pub fn pulse_train_contour(f0: &[f64], sample_rate: u32) -> Vec<f64> {
    let mut phase = 0.0f64;
    f0.iter()
        .map(|&f| {
            let v = rosenberg_derivative(phase);
            phase = (phase + f / sample_rate as f64).fract();
            v
        })
        .collect()
}

fn rosenberg_derivative(phase: f64) -> f64 {
    const OPEN: f64 = 0.4;
    const CLOSE: f64 = 0.16;
    if phase < OPEN {
        // d/dφ of 0.5(1 − cos(πφ/OPEN))
        0.5 * PI / OPEN * (PI * phase / OPEN).sin()
    } else if phase < OPEN + CLOSE {
        // d/dφ of cos(π(φ−OPEN)/(2·CLOSE))
        -PI / (2.0 * CLOSE) * (PI * (phase - OPEN) / (2.0 * CLOSE)).sin()
    } else {
        0.0
    }
}

/// Static cascade of two-pole resonators, unity gain at DC.
pub fn formant_filter(x: &[f64], formants: &[Formant], sample_rate: u32) -> Vec<f64> {
    let mut bank = ResonatorBank::new(formants.len());
    bank.retune(formants, sample_rate);
    x.iter().map(|&v| bank.process(v)).collect()
}

struct ResonatorBank {
    coeffs: Vec<(f64, f64, f64)>,
    state: Vec<(f64, f64)>,
}

impl ResonatorBank {
    fn new(n: usize) -> Self {
        Self {
            coeffs: vec![(1.0, 0.0, 0.0); n],
            state: vec![(0.0, 0.0); n],
        }
    }

    fn retune(&mut self, formants: &[Formant], sample_rate: u32) {
        for (c, &(freq, bw)) in self.coeffs.iter_mut().zip(formants) {
            let r = (-PI * bw / sample_rate as f64).exp();
            let theta = 2.0 * PI * freq / sample_rate as f64;
            let a1 = 2.0 * r * theta.cos();
            let a2 = -r * r;
            *c = (1.0 - a1 - a2, a1, a2);
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let mut v = x;
        for (&(b0, a1, a2), s) in self.coeffs.iter().zip(self.state.iter_mut()) {
            let y = b0 * v + a1 * s.0 + a2 * s.1;
            s.1 = s.0;
            s.0 = y;
            v = y;
        }
        v
    }
}
