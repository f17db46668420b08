//! Subcommand definitions and their implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use wesper_core::analysis::{aligned_pairs, layer_distance, project_2d, write_points_csv, Alignment, Pair};
use wesper_core::audio::{load_wav, write_wav};
use wesper_core::corpus::{generate, CorpusConfig, Speaker};
use wesper_core::pipeline::{segment_convert, Converter};
use wesper_core::stu::{fit_targets, pretrain_stage, PretrainConfig, PretrainCorpus, Stu, StuConfig, Tap};
use wesper_core::units::{KMeansConfig, SourceTag};
use wesper_core::uts::{evaluate_l1, prepare_examples, train_uts, Uts, UtsConfig, UtsTrainConfig};
use wesper_core::whisperize::{whisperize, WhisperizeConfig};
use wesper_core::{AudioClip, Error, Result, FRAME_HOP};

use crate::config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "wesper", version, about = "Whisper-to-normal speech conversion")]
pub struct Cli {
    /// TOML configuration file; WESPER_* variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn normal speech into pseudo-whisper.
    Whisperize(WhisperizeArgs),
    /// Write a synthetic vowel corpus as WAV files.
    MakeCorpus(MakeCorpusArgs),
    /// Cluster MFCC or encoder-layer features into a unit codebook.
    FitUnits(FitUnitsArgs),
    /// Run one masked-prediction pretraining stage of the encoder.
    PretrainStu(PretrainArgs),
    /// Train the unit-to-mel decoder on one voice with a frozen encoder.
    TrainUts(TrainUtsArgs),
    /// Convert a whispered recording.
    Convert(ConvertArgs),
    /// Split a recording at silences and convert each segment.
    SegmentConvert(SegmentConvertArgs),
    /// Whisper/normal distance per encoder layer.
    Analyze(AnalyzeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct WhisperizeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gain_db: Option<f64>,
    #[arg(long)]
    pub tilt_db_per_octave: Option<f64>,
    #[arg(long)]
    pub order: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Voices {
    /// Four voices with different pitch and vocal-tract length.
    Mixed,
    /// The single decoder target voice.
    Target,
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub utterances: usize,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = Voices::Mixed)]
    pub voices: Voices,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitUnitsArgs {
    /// Directory of WAV files.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `mfcc` or `layer:N`.
    #[arg(long, default_value = "mfcc", value_parser = parse_source)]
    pub source: SourceTag,
    /// Encoder checkpoint, required for layer features.
    #[arg(long)]
    pub stu: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Also cluster pseudo-whisper renditions of the corpus.
    #[arg(long)]
    pub with_whisper: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Target features: `mfcc` for the first stage, `layer:N` afterwards.
    #[arg(long, default_value = "mfcc", value_parser = parse_source)]
    pub source: SourceTag,
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    pub lr: f64,
    /// Probability of presenting the pseudo-whisper rendition; 0 trains on
    /// normal speech only.
    #[arg(long, default_value_t = PretrainConfig::default().whisper_ratio)]
    pub whisper_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss curve as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Save the target codebook too.
    #[arg(long)]
    pub codebook_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainUtsArgs {
    /// Directory of target-voice WAV files.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub stu: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = UtsTrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = UtsTrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = UtsTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Condition the decoder on per-frame source energy.
    #[arg(long)]
    pub energy: bool,
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelPaths {
    #[arg(long)]
    pub stu: Option<PathBuf>,
    #[arg(long)]
    pub uts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[command(flatten)]
    pub models: ModelPaths,
    /// Write the conversion report as JSON (`-` for stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentConvertArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub models: ModelPaths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignmentArg {
    FrameSync,
    Dtw,
}

impl From<AlignmentArg> for Alignment {
    fn from(a: AlignmentArg) -> Self {
        match a {
            AlignmentArg::FrameSync => Alignment::FrameSync,
            AlignmentArg::Dtw => Alignment::Dtw,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub stu: PathBuf,
    /// Normal-speech corpus, paired with pseudo-whisper renditions.
    #[arg(long, conflicts_with_all = ["normal", "whisper"])]
    pub corpus: Option<PathBuf>,
    #[arg(long, requires = "whisper")]
    pub normal: Option<PathBuf>,
    #[arg(long, requires = "normal")]
    pub whisper: Option<PathBuf>,
    /// Use at most this many corpus pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long, value_enum)]
    pub alignment: Option<AlignmentArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-layer distances as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// 2-D projection of the first pair's final units as CSV.
    #[arg(long)]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[command(flatten)]
    pub models: ModelPaths,
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

fn parse_source(s: &str) -> std::result::Result<SourceTag, String> {
    if s == "mfcc" {
        return Ok(SourceTag::Mfcc);
    }
    s.strip_prefix("layer:")
        .or_else(|| s.strip_prefix("layer"))
        .and_then(|n| n.parse().ok())
        .map(SourceTag::Layer)
        .ok_or_else(|| format!("expected `mfcc` or `layer:N`, got {s:?}"))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Whisperize(a) => cmd_whisperize(a),
        Command::MakeCorpus(a) => cmd_make_corpus(a),
        Command::FitUnits(a) => cmd_fit_units(&cfg, a),
        Command::PretrainStu(a) => cmd_pretrain(&cfg, a),
        Command::TrainUts(a) => cmd_train_uts(&cfg, a),
        Command::Convert(a) => cmd_convert(&cfg, a),
        Command::SegmentConvert(a) => cmd_segment_convert(&cfg, a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Serve(a) => cmd_serve(cfg, a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

/// WAV files of a directory in name order.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<AudioClip>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!("no .wav files in {}", dir.display())));
    }
    paths.iter().map(load_wav).collect()
}

fn cmd_whisperize(a: WhisperizeArgs) -> Result<()> {
    let clip = load_wav(&a.input)?;
    let d = WhisperizeConfig::with_seed(a.seed);
    let cfg = WhisperizeConfig {
        gain_db: a.gain_db.unwrap_or(d.gain_db),
        spectral_tilt_db_per_octave: a.tilt_db_per_octave.unwrap_or(d.spectral_tilt_db_per_octave),
        order: a.order.unwrap_or(d.order),
        ..d
    };
    write_wav(&a.output, &whisperize(&clip, &cfg)?)
}

fn cmd_make_corpus(a: MakeCorpusArgs) -> Result<()> {
    let base = match a.voices {
        Voices::Mixed => CorpusConfig::default(),
        Voices::Target => CorpusConfig::single_speaker(Speaker::TARGET, a.utterances, a.seed),
    };
    let cfg = CorpusConfig {
        n_utterances: a.utterances,
        duration_secs: a.duration,
        n_classes: a.classes,
        seed: a.seed,
        ..base
    };
    let utts = generate(&cfg)?;
    create_dir(&a.out_dir)?;
    let mut labels = serde_json::Map::new();
    for (i, u) in utts.iter().enumerate() {
        let name = format!("utt_{i:04}.wav");
        write_wav(a.out_dir.join(&name), &u.clip)?;
        labels.insert(name, json!(u.labels));
    }
    let manifest = json!({ "config": cfg, "frame_rate": 50, "labels": labels });
    write_file(&a.out_dir.join("manifest.json"), manifest.to_string().as_bytes())
}

fn load_or_new_stu(cfg: &AppConfig, init: Option<&Path>, seed: u64) -> Result<Stu> {
    match init {
        Some(p) => Stu::load(p),
        None => Stu::new(StuConfig {
            seed,
            ..cfg.stu_config()?
        }),
    }
}

fn cmd_fit_units(cfg: &AppConfig, a: FitUnitsArgs) -> Result<()> {
    let model = match (&a.stu, a.source) {
        (Some(p), _) => Stu::load(p)?,
        (None, SourceTag::Mfcc) => Stu::new(cfg.stu_config()?)?,
        (None, SourceTag::Layer(_)) => return Err(Error::Config("layer features need --stu".into())),
    };
    let clips = load_corpus_dir(&a.corpus)?;
    let corpus = if a.with_whisper {
        PretrainCorpus::mixed(clips, a.seed)?
    } else {
        PretrainCorpus::normal_only(clips)
    };
    let kcfg = KMeansConfig {
        k: a.k.unwrap_or(model.config.k),
        seed: a.seed,
        ..KMeansConfig::default()
    };
    let targets = fit_targets(&model, &corpus, a.source, &kcfg)?;
    targets.codebook.save(&a.out)?;
    print_json(&json!({
        "k": targets.codebook.k(),
        "dim": targets.codebook.dim(),
        "source": a.source.to_string(),
        "distortion": targets.codebook.fit_distortion,
    }));
    Ok(())
}

fn cmd_pretrain(cfg: &AppConfig, a: PretrainArgs) -> Result<()> {
    let mut model = load_or_new_stu(cfg, a.init.as_deref(), a.seed)?;
    let clips = load_corpus_dir(&a.corpus)?;
    let corpus = if a.whisper_ratio > 0.0 {
        PretrainCorpus::mixed(clips, a.seed)?
    } else {
        PretrainCorpus::normal_only(clips)
    };
    let pcfg = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        whisper_ratio: a.whisper_ratio,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let out = pretrain_stage(&mut model, &corpus, a.source, a.seed, &pcfg)?;
    model.save(&a.out)?;
    if let Some(path) = &a.codebook_out {
        out.targets.codebook.save(path)?;
    }
    if let Some(path) = &a.curve {
        let mut buf = Vec::new();
        out.report.write_csv(&mut buf).map_err(|e| io_err(path, e))?;
        write_file(path, &buf)?;
    }
    print_json(&json!({
        "steps": a.steps,
        "source": a.source.to_string(),
        "initial_loss": out.report.initial_loss(),
        "final_loss": out.report.final_loss(),
        "checksum": format!("{:016x}", model.checksum()),
    }));
    Ok(())
}

fn cmd_train_uts(cfg: &AppConfig, a: TrainUtsArgs) -> Result<()> {
    let stu = Stu::load(&a.stu)?;
    let clips = load_corpus_dir(&a.corpus)?;
    let mel = cfg.mel_config();
    let examples = prepare_examples(&stu, &clips, &mel)?;
    let mut uts = Uts::new(UtsConfig {
        energy_conditioning: a.energy,
        mel,
        n_mels: mel.n_mels,
        seed: a.seed,
        ..UtsConfig::desk(stu.config.d_unit)
    })?;
    uts.fit_mel_stats(&examples.iter().map(|e| e.mel.clone()).collect::<Vec<_>>())?;
    let initial = evaluate_l1(&uts, &examples)?;
    let tcfg = UtsTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..UtsTrainConfig::default()
    };
    let report = train_uts(&mut uts, &examples, &tcfg)?;
    let fin = evaluate_l1(&uts, &examples)?;
    uts.save(&a.out)?;
    if let Some(path) = &a.curve {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(|e| io_err(path, e))?;
        write_file(path, &buf)?;
    }
    print_json(&json!({ "steps": a.steps, "initial_l1": initial, "final_l1": fin }));
    Ok(())
}

fn converter(cfg: &AppConfig, m: &ModelPaths) -> Result<Converter> {
    let stu = m
        .stu
        .as_ref()
        .or(cfg.models.stu.as_ref())
        .ok_or_else(|| Error::Config("no encoder checkpoint (--stu or models.stu)".into()))?;
    let uts = m
        .uts
        .as_ref()
        .or(cfg.models.uts.as_ref())
        .ok_or_else(|| Error::Config("no decoder checkpoint (--uts or models.uts)".into()))?;
    Converter::new(Arc::new(Stu::load(stu)?), Arc::new(Uts::load(uts)?))
}

fn cmd_convert(cfg: &AppConfig, a: ConvertArgs) -> Result<()> {
    let clip = load_wav(&a.input)?;
    let conv = converter(cfg, &a.models)?;
    let r = conv.convert(&clip)?;
    write_wav(&a.output, &r.audio_out)?;
    if let Some(path) = &a.report {
        let report = serde_json::to_string(&r.summary()).expect("serializable");
        if path.as_os_str() == "-" {
            println!("{report}");
        } else {
            write_file(path, report.as_bytes())?;
        }
    }
    Ok(())
}

fn cmd_segment_convert(cfg: &AppConfig, a: SegmentConvertArgs) -> Result<()> {
    let clip = load_wav(&a.input)?;
    let conv = converter(cfg, &a.models)?;
    let out = segment_convert(&conv, &clip, &cfg.vad)?;
    create_dir(&a.out_dir)?;
    let mut index = Vec::new();
    for (i, (seg, r)) in out.iter().enumerate() {
        let name = format!("segment_{i:03}.wav");
        write_wav(a.out_dir.join(&name), &r.audio_out)?;
        index.push(json!({ "file": name, "start": seg.start, "end": seg.end, "summary": r.summary() }));
    }
    write_file(&a.out_dir.join("segments.json"), json!(index).to_string().as_bytes())?;
    print_json(&json!({ "segments": out.len() }));
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let stu = Stu::load(&a.stu)?;
    let pairs = match (&a.corpus, &a.normal, &a.whisper) {
        (Some(dir), _, _) => {
            let mut clips = load_corpus_dir(dir)?;
            if let Some(n) = a.pairs {
                clips.truncate(n);
            }
            aligned_pairs(&clips, a.seed)?
        }
        (None, Some(n), Some(w)) => {
            let (normal, whisper) = (load_wav(n)?, load_wav(w)?);
            let aligned = normal.len() / FRAME_HOP == whisper.len() / FRAME_HOP;
            vec![Pair {
                normal,
                whisper,
                aligned,
            }]
        }
        _ => return Err(Error::Config("analyze needs --corpus or both --normal and --whisper".into())),
    };
    let alignment = a.alignment.map(Alignment::from).unwrap_or(if pairs.iter().all(|p| p.aligned) {
        Alignment::FrameSync
    } else {
        Alignment::Dtw
    });
    let report = layer_distance(&stu, &pairs, alignment)?;
    if let Some(path) = &a.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(|e| io_err(path, e))?;
        write_file(path, &buf)?;
    }
    if let Some(path) = &a.points {
        let n = stu.encode(&pairs[0].normal, Tap::Final)?.vectors;
        let w = stu.encode(&pairs[0].whisper, Tap::Final)?.vectors;
        let all = ndarray::concatenate(ndarray::Axis(0), &[n.view(), w.view()]).map_err(|e| Error::Invalid(e.to_string()))?;
        let proj = project_2d(all.view())?;
        let labels: Vec<String> = (0..n.nrows())
            .map(|_| "normal".to_string())
            .chain((0..w.nrows()).map(|_| "whisper".to_string()))
            .collect();
        let mut buf = Vec::new();
        write_points_csv(proj.points.view(), &labels, &mut buf).map_err(|e| io_err(path, e))?;
        write_file(path, &buf)?;
    }
    print_json(&serde_json::to_value(&report).expect("serializable"));
    Ok(())
}

fn cmd_serve(mut cfg: AppConfig, a: ServeArgs) -> Result<()> {
    if let Some(h) = a.host {
        cfg.service.host = h;
    }
    if let Some(p) = a.port {
        cfg.service.port = p;
    }
    if a.models.stu.is_some() {
        cfg.models.stu = a.models.stu;
    }
    if a.models.uts.is_some() {
        cfg.models.uts = a.models.uts;
    }
    if a.ui_dir.is_some() {
        cfg.service.ui_dir = a.ui_dir;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| io_err(Path::new("tokio runtime"), e))?;
    rt.block_on(crate::service::serve(cfg))
}

/// One-line machine-readable error and the process exit code for it.
pub fn error_report(e: &Error) -> (String, i32) {
    let line = json!({ "error": { "code": e.code(), "message": e.to_string() } }).to_string();
    let code = match e {
        Error::Io { .. } => 2,
        _ => 1,
    };
    (line, code)
}

/// Writes `line` to stderr, ignoring a closed stream.
pub fn emit(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}
