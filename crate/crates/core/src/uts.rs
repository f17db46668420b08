//! Unit-to-speech decoder: continuous units in, one log-mel frame per unit
//! out. There is no duration model; the output length is the input length.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dsp::{mel_spectrogram_aligned, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::{init, sinusoidal_positions, Adam, AdamConfig, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, TransformerBlock};
use crate::stu::{Stu, Tap, UnitSequence};

/// Largest unit/mel frame-count difference tolerated before trimming.
pub const MAX_ALIGNMENT_SLACK: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtsConfig {
    pub d_unit: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_mels: usize,
    /// Appends per-frame log energy of the source to every unit.
    pub energy_conditioning: bool,
    pub mel: MelConfig,
    pub seed: u64,
}

impl UtsConfig {
    pub fn desk(d_unit: usize) -> Self {
        Self {
            d_unit,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_mels: 80,
            energy_conditioning: false,
            mel: MelConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_unit == 0 || self.d_model == 0 || self.n_mels == 0 {
            return Err(Error::Config("UTS widths must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mel.n_mels != self.n_mels {
            return Err(Error::Config("n_mels disagrees with the mel configuration".into()));
        }
        self.mel.stft.validate()
    }

    fn input_width(&self) -> usize {
        self.d_unit + usize::from(self.energy_conditioning)
    }
}

#[derive(Debug, Clone)]
pub struct Uts {
    pub config: UtsConfig,
    pub params: ParamStore,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    out: Linear,
    /// Per-bin output de-normalization, fitted from data, never trained.
    mel_mean: ParamId,
    mel_std: ParamId,
}

impl Uts {
    pub fn new(config: UtsConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let input = Linear::new(&mut params, &mut rng, "input", config.input_width(), d);
        let blocks = (0..config.n_layers)
            .map(|i| TransformerBlock::new(&mut params, &mut rng, &format!("block{i}"), d, config.n_heads))
            .collect();
        let final_ln = LayerNorm::new(&mut params, "final_ln", d);
        let out = Linear::new(&mut params, &mut rng, "out", d, config.n_mels);
        let mel_mean = params.add("mel_mean", &[config.n_mels], init::zeros(config.n_mels));
        let mel_std = params.add("mel_std", &[config.n_mels], init::ones(config.n_mels));
        Ok(Self {
            config,
            params,
            input,
            blocks,
            final_ln,
            out,
            mel_mean,
            mel_std,
        })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Sets the output de-normalization to the per-bin mean and standard
    /// deviation of `mels`.
    pub fn fit_mel_stats(&mut self, mels: &[MelSpectrogram]) -> Result<()> {
        let views: Vec<_> = mels.iter().map(|m| m.data.view()).collect();
        if views.is_empty() {
            return Err(Error::InsufficientData("no mel frames for statistics".into()));
        }
        let all = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Invalid(e.to_string()))?;
        if all.ncols() != self.config.n_mels || all.nrows() == 0 {
            return Err(Error::shape("fit_mel_stats", format!("mel width {}", all.ncols())));
        }
        let mean = all.mean_axis(Axis(0)).expect("non-empty");
        let std = all.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-3));
        self.params.get_mut(self.mel_mean).data = mean.iter().map(|&v| v as f32).collect();
        self.params.get_mut(self.mel_std).data = std.iter().map(|&v| v as f32).collect();
        Ok(())
    }

    fn forward(&self, tape: &mut Tape, units: &Array2<f64>, energy: Option<&[f64]>) -> Result<crate::nn::Var> {
        let (t, d) = units.dim();
        if t == 0 {
            return Err(Error::Invalid("empty unit sequence".into()));
        }
        if d != self.config.d_unit {
            return Err(Error::Incompatible(format!(
                "units have width {d}, decoder expects {}",
                self.config.d_unit
            )));
        }
        let width = self.config.input_width();
        let mut data = Vec::with_capacity(t * width);
        for (i, row) in units.outer_iter().enumerate() {
            data.extend(row.iter());
            if self.config.energy_conditioning {
                let e = energy.ok_or_else(|| Error::Invalid("decoder needs per-frame energy".into()))?;
                if e.len() != t {
                    return Err(Error::shape("decode", format!("{} energies for {t} frames", e.len())));
                }
                data.push(e[i]);
            }
        }
        let x = tape.constant(Tensor::new(vec![t, width], data)?)?;
        let mut h = self.input.forward(tape, x)?;
        let pos = tape.constant(sinusoidal_positions(t, self.config.d_model))?;
        h = tape.add(h, pos)?;
        for block in &self.blocks {
            h = block.forward(tape, h, None)?;
        }
        let h = self.final_ln.forward(tape, h)?;
        let y = self.out.forward(tape, h)?;
        let n = self.config.n_mels;
        let tile = |p: &[f32]| Tensor::new(vec![t, n], (0..t).flat_map(|_| p.iter().map(|&v| v as f64)).collect());
        let std = tape.constant(tile(&self.params.get(self.mel_std).data)?)?;
        let mean = tape.constant(tile(&self.params.get(self.mel_mean).data)?)?;
        let y = tape.mul(y, std)?;
        tape.add(y, mean)
    }

    /// Maps `T` units to `T` log-mel frames. Deterministic.
    pub fn decode(&self, units: &UnitSequence) -> Result<MelSpectrogram> {
        self.decode_conditioned(units, None)
    }

    /// [`Uts::decode`] with per-frame source energy, required when the
    /// model was built with `energy_conditioning`.
    pub fn decode_conditioned(&self, units: &UnitSequence, energy: Option<&[f64]>) -> Result<MelSpectrogram> {
        let mut tape = Tape::new(&self.params);
        let y = self.forward(&mut tape, &units.vectors, energy)?;
        let m = &self.config.mel;
        MelSpectrogram::new(tape.value(y).to_array2()?, m.stft.n_fft, m.stft.hop, m.sample_rate)
    }
}

/// Per-frame log energy: the mean log-mel value of each frame.
pub fn frame_energy(mel: &MelSpectrogram) -> Vec<f64> {
    mel.data.mean_axis(Axis(1)).expect("mel has bins").to_vec()
}

/// One training pair: frozen-encoder units and the aligned target mel.
#[derive(Debug, Clone)]
pub struct UtsExample {
    pub units: UnitSequence,
    pub mel: MelSpectrogram,
}

impl UtsExample {
    pub fn energy(&self) -> Vec<f64> {
        frame_energy(&self.mel)
    }
}

/// Encodes every clip with the frozen encoder and pairs it with its mel,
/// trimming both to the shorter length.
pub fn prepare_examples(stu: &Stu, clips: &[AudioClip], mel: &MelConfig) -> Result<Vec<UtsExample>> {
    if clips.is_empty() {
        return Err(Error::InsufficientData("target voice corpus is empty".into()));
    }
    clips
        .iter()
        .map(|clip| {
            let clip = clip.to_canonical_rate()?;
            let units = stu.encode(&clip, Tap::Final)?;
            let mel = mel_spectrogram_aligned(&clip, mel)?;
            let (tu, tm) = (units.frames(), mel.frames());
            if tu.abs_diff(tm) > MAX_ALIGNMENT_SLACK {
                return Err(Error::Config(format!(
                    "unit/mel frame counts differ by more than {MAX_ALIGNMENT_SLACK}: {tu} vs {tm}"
                )));
            }
            let t = tu.min(tm);
            Ok(UtsExample {
                units: UnitSequence {
                    vectors: units.vectors.slice(ndarray::s![..t, ..]).to_owned(),
                    tap: units.tap,
                },
                mel: mel.truncated(t),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtsTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for UtsTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            lr: 1e-3,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtsLossPoint {
    pub step: usize,
    pub l1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtsReport {
    pub curve: Vec<UtsLossPoint>,
}

impl UtsReport {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,l1")?;
        for p in &self.curve {
            writeln!(w, "{},{}", p.step, p.l1)?;
        }
        Ok(())
    }
}

/// Mean L1 between decoded and target mels over `examples`.
pub fn evaluate_l1(uts: &Uts, examples: &[UtsExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let energy = ex.energy();
        let out = uts.decode_conditioned(&ex.units, Some(&energy))?;
        total += crate::dsp::mel_l1(&out, &ex.mel);
    }
    Ok(total / examples.len().max(1) as f64)
}

/// L1 regression of target mels from precomputed (frozen-encoder) units.
/// Only decoder parameters are updated.
pub fn train_uts(uts: &mut Uts, examples: &[UtsExample], cfg: &UtsTrainConfig) -> Result<UtsReport> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let energies: Vec<Vec<f64>> = examples.iter().map(UtsExample::energy).collect();
    let targets: Vec<Tensor> = examples.iter().map(|e| Tensor::from_array2(&e.mel.data)).collect();
    let mut report = UtsReport::default();
    for step in 0..cfg.steps {
        uts.params.clear_grads();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..examples.len());
            let grads = {
                let mut tape = Tape::new(&uts.params);
                let y = uts.forward(&mut tape, &examples[i].units.vectors, Some(&energies[i]))?;
                let loss = tape.l1_loss(y, &targets[i])?;
                loss_sum += tape.value(loss).item();
                tape.backward(loss)?
            };
            uts.params.accumulate_grads(&grads, 1.0 / cfg.batch_size as f64);
        }
        let l1 = loss_sum / cfg.batch_size as f64;
        if !l1.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("L1 is {l1}"),
            });
        }
        uts.params.clip_grad_norm(cfg.grad_clip);
        opt.step(&mut uts.params)?;
        report.curve.push(UtsLossPoint { step, l1 });
    }
    Ok(report)
}
