//! Speech-to-unit encoder.
//!
//! Raw 16 kHz audio passes through five strided convolutions (total stride
//! 320), a transformer stack and a final linear projection, giving one
//! continuous unit vector per 20 ms.
//!
//! Frame arithmetic: the conv stack has a receptive field of 905 samples.
//! The waveform is zero-padded by 292 samples on the left and 293 on the
//! right, so a clip of `L ≥ 320` samples yields exactly `T = floor(L / 320)`
//! frames and frame `t` is centered on sample `320·t + 160`.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::corpus::whisperize_all;
use crate::dsp::{mfcc_aligned, MelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    init, sinusoidal_positions, Adam, AdamConfig, Conv1d, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor,
    TransformerBlock, Var,
};
use crate::units::{kmeans_fit, DiscreteUnitSeq, KMeansConfig, SourceTag, UnitCodebook};
use crate::{FRAME_HOP, SAMPLE_RATE};

/// Number of MFCC coefficients used for first-stage targets.
pub const MFCC_COEFFS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StuConfig {
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_channels: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_unit: usize,
    /// Number of discrete target units.
    pub k: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub temperature: f64,
    /// Transformer layer whose activations define second-stage targets.
    pub target_layer: usize,
    pub seed: u64,
}

impl StuConfig {
    /// Small model that trains in seconds on one CPU core.
    pub fn desk() -> Self {
        Self {
            conv_kernels: vec![10, 8, 8, 4, 4],
            conv_strides: vec![5, 4, 4, 2, 2],
            conv_channels: 32,
            n_layers: 3,
            d_model: 64,
            n_heads: 4,
            d_unit: 64,
            k: 16,
            mask_prob: 0.08,
            mask_span: 10,
            temperature: 0.1,
            target_layer: 2,
            seed: 0,
        }
    }

    /// Full-size architecture: 12 layers, 256-dimensional units, 100 units.
    pub fn paper() -> Self {
        Self {
            conv_channels: 512,
            n_layers: 12,
            d_model: 768,
            d_unit: 256,
            k: 100,
            target_layer: 6,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_kernels.is_empty() || self.conv_kernels.len() != self.conv_strides.len() {
            return bad("conv_kernels and conv_strides must be non-empty and equally long".into());
        }
        if self.conv_strides.iter().product::<usize>() != FRAME_HOP {
            return bad(format!("conv strides must multiply to {FRAME_HOP}"));
        }
        if self.conv_kernels.iter().chain(&self.conv_strides).any(|&v| v == 0) {
            return bad("conv kernels and strides must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.conv_channels == 0 || self.d_model == 0 || self.d_unit == 0 || self.k == 0 {
            return bad("widths and k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return bad("mask_prob must lie in [0, 1] and mask_span be positive".into());
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if self.target_layer > self.n_layers {
            return bad(format!("target_layer {} exceeds n_layers {}", self.target_layer, self.n_layers));
        }
        Ok(())
    }

    /// Input samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Zero padding (left, right) that makes the frame count `floor(L / 320)`.
    pub fn padding(&self) -> (usize, usize) {
        let total = self.receptive_field() - FRAME_HOP;
        (total / 2, total - total / 2)
    }

    /// Shortest clip that produces one frame.
    pub fn min_samples(&self) -> usize {
        FRAME_HOP
    }

    /// Frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len / FRAME_HOP
    }
}

/// Which activations [`Stu::encode`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// 0 is the frontend projection, `1..=n_layers` the transformer blocks.
    Layer(usize),
    /// Post-projection speech units.
    Final,
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tap::Layer(l) => write!(f, "layer{l}"),
            Tap::Final => f.write_str("final"),
        }
    }
}

/// `T × d` continuous vectors at 50 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub vectors: Array2<f64>,
    pub tap: Tap,
}

impl UnitSequence {
    pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / FRAME_HOP as f64;

    pub fn frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Trainable speech-to-unit encoder.
#[derive(Debug, Clone)]
pub struct Stu {
    pub config: StuConfig,
    pub params: ParamStore,
    convs: Vec<Conv1d>,
    feat_ln: LayerNorm,
    feat_proj: Linear,
    mask_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    proj: Linear,
    unit_emb: ParamId,
}

struct Trace {
    taps: Vec<Var>,
    units: Option<Var>,
}

impl Stu {
    /// Freshly initialized model, seeded by `config.seed`.
    pub fn new(config: StuConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = config.conv_channels;
        let mut convs = Vec::new();
        for (i, (&k, &s)) in config.conv_kernels.iter().zip(&config.conv_strides).enumerate() {
            let cin = if i == 0 { 1 } else { c };
            convs.push(Conv1d::new(&mut params, &mut rng, &format!("conv{i}"), cin, c, k, s));
        }
        let d = config.d_model;
        let feat_ln = LayerNorm::new(&mut params, "feat_ln", c);
        let feat_proj = Linear::new(&mut params, &mut rng, "feat_proj", c, d);
        let mask_emb = params.add("mask_emb", &[d], init::uniform(&mut rng, 1.0, d));
        let blocks = (0..config.n_layers)
            .map(|i| TransformerBlock::new(&mut params, &mut rng, &format!("block{i}"), d, config.n_heads))
            .collect();
        let final_ln = LayerNorm::new(&mut params, "final_ln", d);
        let proj = Linear::new(&mut params, &mut rng, "proj", d, config.d_unit);
        let unit_emb = params.add(
            "unit_emb",
            &[config.k, config.d_unit],
            init::uniform(&mut rng, 1.0, config.k * config.d_unit),
        );
        Ok(Self {
            config,
            params,
            convs,
            feat_ln,
            feat_proj,
            mask_emb,
            blocks,
            final_ln,
            proj,
            unit_emb,
        })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Redraws the unit embedding table, used when the target codebook
    /// changes between pretraining stages.
    pub fn reset_unit_embeddings(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.params.get(self.unit_emb).numel();
        self.params.get_mut(self.unit_emb).data = init::uniform(&mut rng, 1.0, n);
    }

    fn prepare_input(&self, clip: &AudioClip) -> Result<Tensor> {
        let clip = clip.to_canonical_rate()?;
        if clip.len() < self.config.min_samples() {
            return Err(Error::TooShort {
                what: "clip",
                actual: clip.len(),
                minimum: self.config.min_samples(),
            });
        }
        let s = clip.samples();
        let n = s.len() as f64;
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / var.sqrt().max(1e-4);
        let (left, right) = self.config.padding();
        let mut data = vec![0.0; left + s.len() + right];
        for (d, &v) in data[left..].iter_mut().zip(s) {
            *d = (v as f64 - mean) * scale;
        }
        Tensor::new(vec![data.len(), 1], data)
    }

    /// Runs the network; stops after tap `stop_at` when no units are needed.
    fn run(&self, tape: &mut Tape, clip: &AudioClip, mask: Option<&[bool]>, stop_at: Option<usize>) -> Result<Trace> {
        let x = self.prepare_input(clip)?;
        let mut h = tape.constant(x)?;
        for conv in &self.convs {
            h = conv.forward(tape, h)?;
            h = tape.gelu(h)?;
        }
        let h = self.feat_ln.forward(tape, h)?;
        let feat = self.feat_proj.forward(tape, h)?;
        let t = tape.value(feat).shape()[0];
        debug_assert_eq!(t, self.config.frames_for(clip.len()));
        let mut taps = vec![feat];
        if stop_at == Some(0) {
            return Ok(Trace { taps, units: None });
        }
        let mut h = match mask {
            Some(m) => {
                let e = tape.param(self.mask_emb);
                tape.mask_replace(feat, e, m)?
            }
            None => feat,
        };
        let pos = tape.constant(sinusoidal_positions(t, self.config.d_model))?;
        h = tape.add(h, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, h, None)?;
            taps.push(h);
            if stop_at == Some(i + 1) {
                return Ok(Trace { taps, units: None });
            }
        }
        let h = self.final_ln.forward(tape, h)?;
        let units = self.proj.forward(tape, h)?;
        Ok(Trace {
            taps,
            units: Some(units),
        })
    }

    fn check_tap(&self, tap: Tap) -> Result<()> {
        match tap {
            Tap::Layer(l) if l > self.config.n_layers => Err(Error::Invalid(format!(
                "tap layer {l} out of range 0..={}",
                self.config.n_layers
            ))),
            _ => Ok(()),
        }
    }

    /// Encodes a clip. Deterministic; safe to call concurrently.
    pub fn encode(&self, clip: &AudioClip, tap: Tap) -> Result<UnitSequence> {
        self.check_tap(tap)?;
        let mut tape = Tape::new(&self.params);
        let stop = match tap {
            Tap::Layer(l) => Some(l),
            Tap::Final => None,
        };
        let trace = self.run(&mut tape, clip, None, stop)?;
        let v = match tap {
            Tap::Layer(l) => trace.taps[l],
            Tap::Final => trace.units.expect("full run"),
        };
        Ok(UnitSequence {
            vectors: tape.value(v).to_array2()?,
            tap,
        })
    }

    /// Every tap in one pass: layers `0..=n_layers`, then the final units.
    pub fn encode_all_taps(&self, clip: &AudioClip) -> Result<Vec<UnitSequence>> {
        let mut tape = Tape::new(&self.params);
        let trace = self.run(&mut tape, clip, None, None)?;
        let mut out = Vec::with_capacity(trace.taps.len() + 1);
        for (l, &v) in trace.taps.iter().enumerate() {
            out.push(UnitSequence {
                vectors: tape.value(v).to_array2()?,
                tap: Tap::Layer(l),
            });
        }
        out.push(UnitSequence {
            vectors: tape.value(trace.units.expect("full run")).to_array2()?,
            tap: Tap::Final,
        });
        Ok(out)
    }

    /// Masked-prediction loss for one clip plus the number of correctly
    /// predicted masked frames.
    fn masked_loss(&self, tape: &mut Tape, clip: &AudioClip, targets: &[usize], mask: &[bool]) -> Result<(Var, usize)> {
        let trace = self.run(tape, clip, Some(mask), None)?;
        let units = trace.units.expect("full run");
        if targets.len() != mask.len() {
            return Err(Error::shape(
                "pretrain",
                format!("{} targets for {} frames", targets.len(), mask.len()),
            ));
        }
        let u = tape.l2_normalize_rows(units)?;
        let e = tape.param(self.unit_emb);
        let e = tape.l2_normalize_rows(e)?;
        let cos = tape.matmul_nt(u, e)?;
        let logits = tape.scale(cos, 1.0 / self.config.temperature)?;
        let loss = tape.masked_cross_entropy(logits, targets, mask)?;
        let lv = tape.value(logits);
        let k = self.config.k;
        let correct = (0..mask.len())
            .filter(|&i| mask[i])
            .filter(|&i| argmax(&lv.data()[i * k..(i + 1) * k]) == targets[i])
            .count();
        Ok((loss, correct))
    }

    /// Mean masked-prediction loss and accuracy over `clips`, with masks
    /// drawn deterministically from `seed`. No parameters change.
    pub fn masked_eval(&self, clips: &[AudioClip], targets: &[DiscreteUnitSeq], seed: u64) -> Result<MaskedEval> {
        if clips.len() != targets.len() || clips.is_empty() {
            return Err(Error::Invalid(format!(
                "{} clips for {} target sequences",
                clips.len(),
                targets.len()
            )));
        }
        let (mut correct, mut total, mut loss) = (0, 0, 0.0);
        for (i, (clip, tgt)) in clips.iter().zip(targets).enumerate() {
            let mask = training_mask(tgt.len(), &self.config, seed.wrapping_add(i as u64));
            let mut tape = Tape::new(&self.params);
            let (l, c) = self.masked_loss(&mut tape, clip, &tgt.ids, &mask)?;
            loss += tape.value(l).item();
            correct += c;
            total += mask.iter().filter(|&&m| m).count();
        }
        Ok(MaskedEval {
            loss: loss / clips.len() as f64,
            accuracy: correct as f64 / total.max(1) as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedEval {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Span mask: every frame starts a span with probability `mask_prob`;
/// spans of `mask_span` frames (clipped at `t`) are unioned.
pub fn mask_spans(t: usize, mask_prob: f64, mask_span: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; t];
    for start in 0..t {
        if rng.random_bool(mask_prob.clamp(0.0, 1.0)) {
            for m in &mut mask[start..(start + mask_span).min(t)] {
                *m = true;
            }
        }
    }
    mask
}

/// [`mask_spans`] that masks one random span when the draw comes out empty,
/// so every training example contributes to the loss.
fn training_mask(t: usize, cfg: &StuConfig, seed: u64) -> Vec<bool> {
    let mut mask = mask_spans(t, cfg.mask_prob, cfg.mask_span, seed);
    if t > 0 && !mask.contains(&true) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let start = rng.random_range(0..t);
        for m in &mut mask[start..(start + cfg.mask_span).min(t)] {
            *m = true;
        }
    }
    mask
}

/// Normal clips paired with their pseudo-whisper renditions. The pairing is
/// only used to keep both versions of an utterance out of the same batch.
#[derive(Debug, Clone)]
pub struct PretrainCorpus {
    pub normal: Vec<AudioClip>,
    pub whisper: Vec<AudioClip>,
}

impl PretrainCorpus {
    /// Whisperizes every clip with a seed derived from its index.
    pub fn mixed(normal: Vec<AudioClip>, whisper_seed: u64) -> Result<Self> {
        let whisper = whisperize_all(&normal, whisper_seed)?;
        Ok(Self { normal, whisper })
    }

    pub fn normal_only(normal: Vec<AudioClip>) -> Self {
        Self {
            normal,
            whisper: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.normal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normal.is_empty()
    }

    pub fn has_whisper(&self) -> bool {
        !self.whisper.is_empty()
    }

    fn clips(&self) -> impl Iterator<Item = &AudioClip> {
        self.normal.iter().chain(&self.whisper)
    }
}

/// Discrete targets for every clip of a [`PretrainCorpus`].
#[derive(Debug, Clone)]
pub struct Targets {
    pub codebook: UnitCodebook,
    pub normal: Vec<DiscreteUnitSeq>,
    pub whisper: Vec<DiscreteUnitSeq>,
}

/// Features that define targets: MFCCs with the utterance mean removed for
/// the first stage, activations of a transformer layer for the second.
pub fn target_features(model: &Stu, clip: &AudioClip, source: SourceTag) -> Result<Array2<f64>> {
    match source {
        SourceTag::Mfcc => {
            let m = mfcc_aligned(&clip.to_canonical_rate()?, &MelConfig::default(), MFCC_COEFFS)?;
            let mean = m.mean_axis(ndarray::Axis(0)).expect("at least one frame");
            Ok(m - mean)
        }
        SourceTag::Layer(l) => Ok(model.encode(clip, Tap::Layer(l))?.vectors),
    }
}

/// Clusters target features over the whole corpus and labels every clip.
pub fn fit_targets(model: &Stu, corpus: &PretrainCorpus, source: SourceTag, kmeans: &KMeansConfig) -> Result<Targets> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("pretraining corpus is empty".into()));
    }
    let feats: Vec<Array2<f64>> = corpus
        .clips()
        .map(|c| target_features(model, c, source))
        .collect::<Result<_>>()?;
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::Invalid(format!("target features: {e}")))?;
    let codebook = kmeans_fit(all.view(), kmeans, source)?;
    let mut seqs = feats
        .iter()
        .map(|f| codebook.assign(f.view()))
        .collect::<Result<Vec<_>>>()?;
    let whisper = seqs.split_off(corpus.normal.len());
    Ok(Targets {
        codebook,
        normal: seqs,
        whisper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability that a drawn utterance is presented in its whispered form.
    pub whisper_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 5e-4,
            whisper_ratio: 0.5,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub masked_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub curve: Vec<LossPoint>,
}

impl PretrainReport {
    const WINDOW: usize = 10;

    /// Mean loss over the first ten steps.
    pub fn initial_loss(&self) -> Option<f64> {
        let n = self.curve.len().min(Self::WINDOW);
        (n > 0).then(|| self.curve[..n].iter().map(|p| p.loss).sum::<f64>() / n as f64)
    }

    /// Mean loss over the last ten steps.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.curve.len().min(Self::WINDOW);
        (n > 0).then(|| self.curve[self.curve.len() - n..].iter().map(|p| p.loss).sum::<f64>() / n as f64)
    }

    /// `step,loss,masked_accuracy` rows with a header.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,masked_accuracy")?;
        for p in &self.curve {
            writeln!(w, "{},{},{}", p.step, p.loss, p.masked_accuracy)?;
        }
        Ok(())
    }
}

/// Masked-prediction training against fixed targets.
///
/// Each step draws `batch_size` distinct utterances; each is shown in its
/// whispered form with probability `whisper_ratio`, so the two renditions of
/// one utterance never share a batch.
pub fn pretrain(model: &mut Stu, corpus: &PretrainCorpus, targets: &Targets, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("pretraining corpus is empty".into()));
    }
    if cfg.whisper_ratio > 0.0 && !corpus.has_whisper() {
        return Err(Error::Config("whisper_ratio > 0 needs whispered clips".into()));
    }
    if !(0.0..=1.0).contains(&cfg.whisper_ratio) || cfg.batch_size == 0 {
        return Err(Error::Config("whisper_ratio must be in [0, 1] and batch_size positive".into()));
    }
    if targets.codebook.k() != model.config.k {
        return Err(Error::Config(format!(
            "codebook has {} units, model expects {}",
            targets.codebook.k(),
            model.config.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let batch = cfg.batch_size.min(corpus.len());
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let picks = sample(&mut rng, corpus.len(), batch);
        let mut loss_sum = 0.0;
        let (mut correct, mut masked) = (0, 0);
        model.params.clear_grads();
        for idx in picks.iter() {
            let whisper = cfg.whisper_ratio > 0.0 && rng.random_bool(cfg.whisper_ratio);
            let (clip, tgt) = if whisper {
                (&corpus.whisper[idx], &targets.whisper[idx])
            } else {
                (&corpus.normal[idx], &targets.normal[idx])
            };
            let mask = training_mask(tgt.len(), &model.config, rng.random());
            let grads = {
                let mut tape = Tape::new(&model.params);
                let (loss, c) = model.masked_loss(&mut tape, clip, &tgt.ids, &mask)?;
                loss_sum += tape.value(loss).item();
                correct += c;
                masked += mask.iter().filter(|&&m| m).count();
                tape.backward(loss)?
            };
            model.params.accumulate_grads(&grads, 1.0 / batch as f64);
        }
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        model.params.clip_grad_norm(cfg.grad_clip);
        opt.step(&mut model.params)?;
        report.curve.push(LossPoint {
            step,
            loss,
            masked_accuracy: correct as f64 / masked.max(1) as f64,
        });
    }
    Ok(report)
}

/// Output of one pretraining stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub targets: Targets,
    pub report: PretrainReport,
}

/// One stage: derive targets (MFCC, or a layer of the current model), then
/// train. A second stage continues from the current weights with a fresh
/// unit embedding table.
pub fn pretrain_stage(
    model: &mut Stu,
    corpus: &PretrainCorpus,
    source: SourceTag,
    kmeans_seed: u64,
    cfg: &PretrainConfig,
) -> Result<StageOutput> {
    let kcfg = KMeansConfig {
        k: model.config.k,
        seed: kmeans_seed,
        ..KMeansConfig::default()
    };
    let targets = fit_targets(model, corpus, source, &kcfg)?;
    if matches!(source, SourceTag::Layer(_)) {
        model.reset_unit_embeddings(model.config.seed ^ 0x5eed);
    }
    let report = pretrain(model, corpus, &targets, cfg)?;
    Ok(StageOutput { targets, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_frontend_arithmetic() {
        let c = StuConfig::desk();
        assert_eq!(c.receptive_field(), 905);
        assert_eq!(c.padding(), (292, 293));
    }

    #[test]
    fn mask_extremes() {
        assert!(mask_spans(50, 0.0, 10, 1).iter().all(|&m| !m));
        assert!(mask_spans(50, 1.0, 50, 1).iter().all(|&m| m));
    }

    #[test]
    fn training_mask_is_never_empty() {
        let cfg = StuConfig {
            mask_prob: 0.0,
            ..StuConfig::desk()
        };
        let m = training_mask(30, &cfg, 4);
        assert_eq!(m.iter().filter(|&&v| v).count(), 10);
    }

    #[test]
    fn invalid_configs() {
        let mut c = StuConfig::desk();
        c.conv_strides = vec![5, 4, 4, 2, 1];
        assert!(c.validate().is_err());
        let mut c = StuConfig::desk();
        c.d_model = 66;
        assert!(c.validate().is_err());
        assert!(StuConfig::preset("huge").is_err());
    }
}
