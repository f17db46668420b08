//! Mono audio clips, WAV I/O and sample-rate conversion.

use std::f64::consts::PI;
use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// A mono waveform. Samples are nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip at the canonical 16 kHz rate.
    pub fn from_samples(samples: Vec<f32>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Copy of `[start, end)`, clamped to the clip bounds.
    pub fn slice(&self, start: usize, end: usize) -> AudioClip {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        AudioClip {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Resamples to `target` Hz. Returns a clone when the rate already matches.
    pub fn resampled(&self, target: u32) -> Result<AudioClip> {
        if target == 0 {
            return Err(Error::Invalid("target sample rate must be positive".into()));
        }
        if target == self.sample_rate {
            return Ok(self.clone());
        }
        Ok(AudioClip {
            samples: resample(&self.samples, self.sample_rate, target),
            sample_rate: target,
        })
    }

    pub fn to_canonical_rate(&self) -> Result<AudioClip> {
        self.resampled(SAMPLE_RATE)
    }
}

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let power: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (power / samples.len() as f64).sqrt()
}

/// Reads a WAV file and resamples it to the canonical rate.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    read_wav_native(path)?.to_canonical_rate()
}

/// Reads a WAV file at its native sample rate, downmixed to mono.
pub fn read_wav_native(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode_wav_reader(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Wav(msg) => Error::Wav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes an in-memory WAV payload and resamples it to the canonical rate.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    decode_wav_reader(std::io::Cursor::new(bytes))?.to_canonical_rate()
}

fn decode_wav_reader<R: Read>(reader: R) -> Result<AudioClip> {
    let mut reader = WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::Format {
            field: "channels",
            value: "0".into(),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (SampleFormat::Int, bits) | (SampleFormat::Float, bits) => {
            return Err(Error::Format {
                field: "bits_per_sample",
                value: format!("{bits} ({:?})", spec.sample_format),
            })
        }
    };
    let channels = spec.channels as usize;
    let samples: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64).sum();
            (sum / channels as f64) as f32
        })
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Wav(e.to_string()),
        hound::Error::Unsupported => Error::Format {
            field: "audio_format",
            value: "non-PCM encoding".into(),
        },
        hound::Error::FormatError(msg) => Error::Wav(msg.to_string()),
        other => Error::Wav(other.to_string()),
    }
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav_to(std::io::BufWriter::new(file), clip).map_err(|e| match e {
        Error::Wav(msg) => Error::Wav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encodes a clip as an in-memory mono 16-bit PCM WAV file.
pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    write_wav_to(&mut buf, clip)?;
    Ok(buf.into_inner())
}

fn write_wav_to<W: Write + Seek>(writer: W, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::new(writer, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s)).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

fn quantize_i16(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Zero crossings of the interpolation kernel on each side at full bandwidth.
const SINC_HALF_ZEROS: usize = 16;

/// Rational polyphase resampler with a Blackman-windowed sinc kernel.
///
/// The kernel is symmetric, so the filter is linear-phase. When downsampling
/// the cutoff is lowered to the output Nyquist frequency.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;
    let out_len = ((input.len() as u128 * to as u128 + from as u128 / 2) / from as u128) as usize;

    let scale = (to as f64 / from as f64).min(1.0);
    let half = (SINC_HALF_ZEROS as f64 / scale).ceil() as isize;
    let taps = (2 * half) as usize;

    // table[phase][j] holds h(k0 - half + 1 + j - t) for t = k0 + phase/up.
    let mut table = vec![0.0f64; up * taps];
    for phase in 0..up {
        let frac = phase as f64 / up as f64;
        for j in 0..taps {
            let offset = (j as isize - half + 1) as f64 - frac;
            table[phase * taps + j] = kernel(offset, scale, half as f64);
        }
    }

    let n = input.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let num = i as u64 * down as u64;
        let k0 = (num / up as u64) as isize;
        let phase = (num % up as u64) as usize;
        let row = &table[phase * taps..(phase + 1) * taps];
        let mut acc = 0.0f64;
        for (j, &h) in row.iter().enumerate() {
            let k = k0 - half + 1 + j as isize;
            if (0..n).contains(&k) {
                acc += h * input[k as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    out
}

fn kernel(offset: f64, scale: f64, half: f64) -> f64 {
    if offset.abs() >= half {
        return 0.0;
    }
    let x = offset * scale;
    let sinc = if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    };
    // Blackman window over [-half, half].
    let u = (offset + half) / (2.0 * half);
    let w = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
    scale * sinc * w
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}
