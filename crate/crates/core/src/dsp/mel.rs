use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{MelSpectrogram, Spectrogram, LOG_FLOOR};
use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist.
///
/// Each filter is stored sparsely as a first bin and a run of weights; a
/// filter touches at most a handful of bins, which keeps the pseudo-inverse
/// used by Griffin-Lim cheap.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 || sample_rate == 0 {
            return Err(Error::Config(format!(
                "invalid filterbank n_mels={n_mels} n_fft={n_fft} sample_rate={sample_rate}"
            )));
        }
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;

        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            let Some(first) = first else {
                return Err(Error::Config(format!(
                    "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; use fewer mels or a larger n_fft"
                )));
            };
            filters.push((first, weights));
        }
        Ok(Self {
            n_mels,
            n_fft,
            sample_rate,
            filters,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Dense n_mels × n_bins copy of the weights.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_mels, self.n_bins()));
        for (m, (first, w)) in self.filters.iter().enumerate() {
            for (j, &v) in w.iter().enumerate() {
                out[[m, first + j]] = v;
            }
        }
        out
    }

    /// Mel energies of one power-spectrum frame.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Transpose product: accumulates filter weights times `mel` into bins.
    pub fn apply_transpose(&self, mel: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&m, (first, w)) in mel.iter().zip(&self.filters) {
            for (j, &v) in w.iter().enumerate() {
                out[first + j] += v * m;
            }
        }
    }

    pub fn log_mel(&self, spec: &Spectrogram, hop: usize) -> MelSpectrogram {
        let frames = spec.frames();
        let mut data = Array2::zeros((frames, self.n_mels));
        let mut power = vec![0.0; spec.bins()];
        let mut mel = vec![0.0; self.n_mels];
        for t in 0..frames {
            for (p, c) in power.iter_mut().zip(spec.data.row(t)) {
                *p = c.norm_sqr();
            }
            self.apply(&power, &mut mel);
            for (d, &m) in data.row_mut(t).iter_mut().zip(&mel) {
                *d = m.max(LOG_FLOOR).ln();
            }
        }
        MelSpectrogram {
            data,
            n_fft: spec.n_fft,
            hop,
            sample_rate: self.sample_rate,
        }
    }
}

/// Orthonormal DCT-II computed with one complex FFT of the even/odd
/// reordered input (Makhoul's method).
pub fn dct2(input: &[f64]) -> Vec<f64> {
    let n = input.len();
    if n == 0 {
        return Vec::new();
    }
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n.div_ceil(2) {
        v[i] = Complex64::new(input[2 * i], 0.0);
    }
    for i in 0..n / 2 {
        v[n - 1 - i] = Complex64::new(input[2 * i + 1], 0.0);
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut v);
    let s0 = (1.0 / n as f64).sqrt();
    let sk = (2.0 / n as f64).sqrt();
    v.iter()
        .enumerate()
        .map(|(k, c)| {
            let ang = -PI * k as f64 / (2.0 * n as f64);
            let re = c.re * ang.cos() - c.im * ang.sin();
            re * if k == 0 { s0 } else { sk }
        })
        .collect()
}

/// Cepstral coefficients: DCT-II of every log-mel frame, first `n_coef` kept.
pub fn mfcc(mel: &MelSpectrogram, n_coef: usize) -> Result<Array2<f64>> {
    if n_coef == 0 || n_coef > mel.n_mels() {
        return Err(Error::Config(format!(
            "n_coef must be in 1..={}, got {n_coef}",
            mel.n_mels()
        )));
    }
    let mut out = Array2::zeros((mel.frames(), n_coef));
    for (t, row) in mel.data.rows().into_iter().enumerate() {
        let c = dct2(&row.to_vec());
        for (o, v) in out.row_mut(t).iter_mut().zip(c) {
            *o = v;
        }
    }
    Ok(out)
}
