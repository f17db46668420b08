//! Application configuration: a TOML file plus `WESPER_*` environment
//! overrides.
//!
//! ```toml
//! sample_rate = 16000
//! preset = "desk"
//!
//! [mel]
//! n_fft = 1024
//! hop = 320
//! n_mels = 80
//!
//! [vad]
//! frame_ms = 20.0
//! energy_threshold_db = -40.0
//! min_silence_ms = 300.0
//! padding_ms = 100.0
//!
//! [service]
//! host = "127.0.0.1"
//! port = 8080
//! max_upload_secs = 30.0
//! ui_dir = "ui"
//!
//! [models]
//! stu = "stu.wspr"
//! uts = "uts.wspr"
//! ```
//!
//! An environment variable `WESPER_<KEY>` sets a top-level key and
//! `WESPER_<TABLE>__<KEY>` a key inside a table, e.g.
//! `WESPER_SERVICE__PORT=9000`. Values are parsed as TOML scalars and fall
//! back to strings. Unknown keys from either source are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wesper_core::dsp::{MelConfig, StftConfig};
use wesper_core::pipeline::VadConfig;
use wesper_core::stu::StuConfig;
use wesper_core::{Error, Result, FRAME_HOP, SAMPLE_RATE};

pub const ENV_PREFIX: &str = "WESPER_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelSection {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelSection {
    fn default() -> Self {
        let m = MelConfig::default();
        Self {
            n_fft: m.stft.n_fft,
            hop: m.stft.hop,
            n_mels: m.n_mels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    /// Longest accepted upload, in seconds of audio.
    pub max_upload_secs: f64,
    /// Static files served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            max_upload_secs: 30.0,
            ui_dir: Some(PathBuf::from("ui")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub stu: Option<PathBuf>,
    pub uts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub sample_rate: u32,
    pub preset: String,
    pub mel: MelSection,
    pub vad: VadConfig,
    pub service: ServiceSection,
    pub models: ModelsSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            preset: "desk".into(),
            mel: MelSection::default(),
            vad: VadConfig::default(),
            service: ServiceSection::default(),
            models: ModelsSection::default(),
        }
    }
}

impl AppConfig {
    /// Reads `path` (if given) and applies overrides from the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?),
            None => None,
        };
        Self::from_sources(text.as_deref(), std::env::vars())
    }

    pub fn from_sources(text: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?,
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let value = parse_scalar(&raw);
            match key.split_once("__") {
                None => {
                    table.insert(key, value);
                }
                Some((section, field)) => {
                    let entry = table
                        .entry(section.to_string())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                    match entry {
                        toml::Value::Table(t) => {
                            t.insert(field.to_string(), value);
                        }
                        _ => {
                            return Err(Error::Config(format!(
                                "{ENV_PREFIX}{} overrides a key inside `{section}`, which is not a table",
                                key.to_ascii_uppercase()
                            )))
                        }
                    }
                }
            }
        }
        let cfg: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample_rate must be {SAMPLE_RATE}; other rates are resampled on input"
            )));
        }
        if self.mel.hop != FRAME_HOP {
            return Err(Error::Config(format!("mel.hop must be {FRAME_HOP} to match the unit rate")));
        }
        self.mel_config().stft.validate()?;
        StuConfig::preset(&self.preset)?;
        self.vad.validate()?;
        if !(self.service.max_upload_secs > 0.0) {
            return Err(Error::Config("service.max_upload_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn mel_config(&self) -> MelConfig {
        MelConfig {
            stft: StftConfig {
                n_fft: self.mel.n_fft,
                hop: self.mel.hop,
            },
            n_mels: self.mel.n_mels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn stu_config(&self) -> Result<StuConfig> {
        StuConfig::preset(&self.preset)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_table())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_sources_give_defaults() {
        assert_eq!(AppConfig::from_sources(None, env(&[])).unwrap(), AppConfig::default());
    }

    #[test]
    fn scalars_parse_as_toml() {
        assert_eq!(parse_scalar("9000"), toml::Value::Integer(9000));
        assert_eq!(parse_scalar("-35.5"), toml::Value::Float(-35.5));
        assert_eq!(parse_scalar("models/stu.wspr"), toml::Value::String("models/stu.wspr".into()));
        assert_eq!(parse_scalar("\"quoted\""), toml::Value::String("quoted".into()));
    }
}
