//! End-to-end conversion, energy VAD and push-to-talk sessions.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dsp::{griffin_lim_with, mel_spectrogram_aligned, trim_alignment, GriffinLimOptions, MelSpectrogram};
use crate::error::{Error, Result};
use crate::stu::{Stu, Tap, UnitSequence};
use crate::uts::{frame_energy, Uts};
use crate::SAMPLE_RATE;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub encode_ms: f64,
    pub decode_ms: f64,
    pub vocode_ms: f64,
    pub total_ms: f64,
}

impl Timings {
    pub fn stage_sum(&self) -> f64 {
        self.encode_ms + self.decode_ms + self.vocode_ms
    }
}

#[derive(Debug, Clone)]
pub struct ConversionResult {
    pub audio_out: AudioClip,
    pub units: UnitSequence,
    pub mel_in: MelSpectrogram,
    pub mel_out: MelSpectrogram,
    pub timings: Timings,
    /// Processing time over input duration.
    pub rtf: f64,
    pub duration_in: f64,
}

/// Compact, serializable view of a [`ConversionResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionSummary {
    pub duration_in: f64,
    pub duration_out: f64,
    pub frames: usize,
    pub rtf: f64,
    pub timings: Timings,
}

impl ConversionResult {
    pub fn summary(&self) -> ConversionSummary {
        ConversionSummary {
            duration_in: self.duration_in,
            duration_out: self.audio_out.duration_secs(),
            frames: self.mel_out.frames(),
            rtf: self.rtf,
            timings: self.timings,
        }
    }
}

/// Encoder, decoder and vocoder settings shared by every conversion.
#[derive(Debug, Clone)]
pub struct Converter {
    pub stu: Arc<Stu>,
    pub uts: Arc<Uts>,
    pub vocoder: GriffinLimOptions,
}

impl Converter {
    pub fn new(stu: Arc<Stu>, uts: Arc<Uts>) -> Result<Self> {
        if stu.config.d_unit != uts.config.d_unit {
            return Err(Error::Incompatible(format!(
                "encoder emits {}-dimensional units, decoder expects {}",
                stu.config.d_unit, uts.config.d_unit
            )));
        }
        Ok(Self {
            stu,
            uts,
            vocoder: GriffinLimOptions::default(),
        })
    }

    pub fn with_vocoder(mut self, vocoder: GriffinLimOptions) -> Self {
        self.vocoder = vocoder;
        self
    }

    /// waveform → units → mel → waveform. The input mel is computed for
    /// inspection outside the timed stages.
    pub fn convert(&self, clip: &AudioClip) -> Result<ConversionResult> {
        let clip = clip.to_canonical_rate()?;
        let mel_cfg = self.uts.config.mel;
        let mel_in = mel_spectrogram_aligned(&clip, &mel_cfg)?;

        let start = Instant::now();
        let units = self.stu.encode(&clip, Tap::Final)?;
        let t_enc = start.elapsed();
        let energy = self.uts.config.energy_conditioning.then(|| frame_energy(&mel_in));
        let mel_out = self.uts.decode_conditioned(&units, energy.as_deref())?;
        let t_dec = start.elapsed();
        let gl = griffin_lim_with(&mel_out, &self.vocoder)?;
        let audio_out = trim_alignment(&gl.clip, &mel_cfg.stft, mel_out.frames());
        let t_total = start.elapsed();

        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        let timings = Timings {
            encode_ms: ms(t_enc),
            decode_ms: ms(t_dec - t_enc),
            vocode_ms: ms(t_total - t_dec),
            total_ms: ms(t_total),
        };
        let duration_in = clip.duration_secs();
        Ok(ConversionResult {
            audio_out,
            units,
            mel_in,
            mel_out,
            rtf: (timings.total_ms / 1e3 / duration_in).max(f64::MIN_POSITIVE),
            timings,
            duration_in,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub energy_threshold_db: f64,
    pub min_silence_ms: f64,
    pub padding_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 20.0,
            energy_threshold_db: -40.0,
            min_silence_ms: 300.0,
            padding_ms: 100.0,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_ms <= 0.0 || self.min_silence_ms < self.frame_ms || self.padding_ms < 0.0 {
            return Err(Error::Config(
                "vad needs frame_ms > 0, min_silence_ms >= frame_ms and padding_ms >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Half-open sample range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Frame level in dB relative to full scale; digital silence is −∞.
pub fn frame_dbfs(frame: &[f32]) -> f64 {
    20.0 * crate::audio::rms(frame).log10()
}

/// Splits a clip at silences of at least `min_silence_ms`, pads each
/// speech region and merges regions the padding makes overlap.
pub fn vad_segment(clip: &AudioClip, cfg: &VadConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let sr = clip.sample_rate() as f64;
    let frame = ((cfg.frame_ms * sr / 1e3).round() as usize).max(1);
    let min_gap = (cfg.min_silence_ms / cfg.frame_ms).ceil() as usize;
    let pad = (cfg.padding_ms * sr / 1e3).round() as usize;
    let len = clip.len();

    let active: Vec<bool> = clip
        .samples()
        .chunks(frame)
        .map(|f| frame_dbfs(f) >= cfg.energy_threshold_db)
        .collect();

    let mut regions: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < active.len() && active[i] {
            i += 1;
        }
        match regions.last_mut() {
            Some(last) if start - last.1 < min_gap => last.1 = i,
            _ => regions.push((start, i)),
        }
    }

    let mut out: Vec<Segment> = Vec::new();
    for (a, b) in regions {
        let start = (a * frame).saturating_sub(pad);
        let end = (b * frame + pad).min(len);
        match out.last_mut() {
            Some(last) if start <= last.end => last.end = last.end.max(end),
            _ => out.push(Segment { start, end }),
        }
    }
    Ok(out)
}

/// Converts every VAD segment of a clip independently.
pub fn segment_convert(converter: &Converter, clip: &AudioClip, vad: &VadConfig) -> Result<Vec<(Segment, ConversionResult)>> {
    let clip = clip.to_canonical_rate()?;
    vad_segment(&clip, vad)?
        .into_iter()
        .map(|s| Ok((s, converter.convert(&clip.slice(s.start, s.end))?)))
        .collect()
}

/// Audio captured between `begin` and `end` is converted as one clip.
#[derive(Debug)]
pub struct PushToTalkSession {
    converter: Converter,
    buffer: Option<Vec<f32>>,
}

impl PushToTalkSession {
    pub fn new(converter: Converter) -> Self {
        Self {
            converter,
            buffer: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.buffer.is_some()
    }

    pub fn begin(&mut self) -> Result<()> {
        if self.buffer.is_some() {
            return Err(Error::Protocol("begin while a talk interval is active".into()));
        }
        self.buffer = Some(Vec::new());
        Ok(())
    }

    /// Appends 16 kHz samples to the active interval.
    pub fn push_audio(&mut self, samples: &[f32]) -> Result<()> {
        match &mut self.buffer {
            Some(buf) => {
                if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("non-finite sample {bad}")));
                }
                buf.extend_from_slice(samples);
                Ok(())
            }
            None => Err(Error::Protocol("audio pushed outside a talk interval".into())),
        }
    }

    /// Closes the interval and converts it. The session returns to idle
    /// whether or not conversion succeeds.
    pub fn end(&mut self) -> Result<ConversionResult> {
        let samples = self
            .buffer
            .take()
            .ok_or_else(|| Error::Protocol("end without begin".into()))?;
        let clip = AudioClip::new(samples, SAMPLE_RATE)?;
        self.converter.convert(&clip)
    }
}
