//! HTTP service: conversion and pair analysis over multipart uploads, plus
//! static files for the browser client under `/ui`.
//!
//! Models are loaded once; until they are, `/health` answers and the model
//! endpoints return 503.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::multipart::{Multipart, MultipartRejection};
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use wesper_core::analysis::{layer_distance, Alignment, Pair};
use wesper_core::audio::{decode_wav, encode_wav};
use wesper_core::checkpoint::FORMAT_VERSION;
use wesper_core::dsp::MelSpectrogram;
use wesper_core::pipeline::{ConversionResult, Converter};
use wesper_core::stu::Stu;
use wesper_core::uts::Uts;
use wesper_core::{AudioClip, Error, SAMPLE_RATE};

use crate::config::AppConfig;

/// Worst-case bytes per second of accepted audio (48 kHz stereo f32).
const MAX_BYTES_PER_SEC: f64 = 48_000.0 * 2.0 * 4.0;
const MULTIPART_BOUNDARY: &str = "wesper-part-boundary";

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub kind: &'static str,
    pub path: Option<PathBuf>,
    pub checksum: String,
    pub config: Value,
}

#[derive(Debug)]
pub struct Models {
    pub converter: Converter,
    pub info: Vec<ModelInfo>,
}

impl Models {
    pub fn new(stu: Stu, uts: Uts) -> wesper_core::Result<Self> {
        Self::with_paths(stu, uts, None, None)
    }

    pub fn with_paths(stu: Stu, uts: Uts, stu_path: Option<PathBuf>, uts_path: Option<PathBuf>) -> wesper_core::Result<Self> {
        let to_value = |v: Result<Value, serde_json::Error>| v.unwrap_or(Value::Null);
        let info = vec![
            ModelInfo {
                kind: "stu",
                path: stu_path,
                checksum: format!("{:016x}", stu.checksum()),
                config: to_value(serde_json::to_value(&stu.config)),
            },
            ModelInfo {
                kind: "uts",
                path: uts_path,
                checksum: format!("{:016x}", uts.checksum()),
                config: to_value(serde_json::to_value(&uts.config)),
            },
        ];
        Ok(Self {
            converter: Converter::new(Arc::new(stu), Arc::new(uts))?,
            info,
        })
    }

    pub fn load(stu: &Path, uts: &Path) -> wesper_core::Result<Self> {
        Self::with_paths(Stu::load(stu)?, Uts::load(uts)?, Some(stu.into()), Some(uts.into()))
    }
}

#[derive(Debug, Default)]
struct Shared {
    models: OnceLock<Arc<Models>>,
    load_error: Mutex<Option<String>>,
    max_upload_secs: f64,
}

/// Cheap to clone; every clone sees the same model slot.
#[derive(Debug, Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(max_upload_secs: f64) -> Self {
        Self {
            shared: Arc::new(Shared {
                max_upload_secs,
                ..Default::default()
            }),
        }
    }

    /// Makes models available. Only the first call has an effect.
    pub fn install(&self, models: Models) -> bool {
        self.shared.models.set(Arc::new(models)).is_ok()
    }

    pub fn set_load_error(&self, message: String) {
        *self.shared.load_error.lock().expect("lock poisoned") = Some(message);
    }

    pub fn models(&self) -> Option<Arc<Models>> {
        self.shared.models.get().cloned()
    }

    fn max_upload_secs(&self) -> f64 {
        self.shared.max_upload_secs
    }

    fn load_error(&self) -> Option<String> {
        self.shared.load_error.lock().expect("lock poisoned").clone()
    }
}

pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let body_limit = (state.max_upload_secs() * MAX_BYTES_PER_SEC) as usize + (1 << 20);
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/convert", post(convert))
        .route("/analyze/pair", post(analyze_pair))
        .layer(DefaultBodyLimit::max(body_limit));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    app.with_state(state)
}

/// Binds, starts loading the configured models in the background and
/// serves until interrupted.
pub async fn serve(cfg: AppConfig) -> wesper_core::Result<()> {
    let state = AppState::new(cfg.service.max_upload_secs);
    match (cfg.models.stu.clone(), cfg.models.uts.clone()) {
        (Some(stu), Some(uts)) => {
            let st = state.clone();
            tokio::task::spawn_blocking(move || match Models::load(&stu, &uts) {
                Ok(m) => {
                    tracing::info!(stu = %stu.display(), uts = %uts.display(), "models loaded");
                    st.install(m);
                }
                Err(e) => {
                    tracing::error!(error = %e, "model loading failed");
                    st.set_load_error(e.to_string());
                }
            });
        }
        _ => {
            tracing::warn!("models.stu and models.uts not both set; /convert will answer 503");
            state.set_load_error("no model paths configured".into());
        }
    }
    let ui = cfg.service.ui_dir.as_deref().filter(|d| d.is_dir());
    let app = router(state, ui);
    let addr = format!("{}:{}", cfg.service.host, cfg.service.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::Io {
        path: PathBuf::from(&addr),
        source: e,
    })?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Io {
            path: PathBuf::from(addr),
            source: e,
        })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Wav(_) | Error::Format { .. } | Error::TooShort { .. } | Error::Invalid(_) | Error::Shape { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": { "code": self.code, "message": self.message } }));
        (self.status, body).into_response()
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let models = state.models();
    Json(json!({
        "status": "ok",
        "models_loaded": models.is_some(),
        "load_error": if models.is_some() { None } else { state.load_error() },
        "format_version": FORMAT_VERSION,
        "sample_rate": SAMPLE_RATE,
        "models": models.map(|m| m.info.clone()).unwrap_or_default(),
    }))
}

async fn models(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let m = require_models(&state)?;
    Ok(Json(json!({ "format_version": FORMAT_VERSION, "models": m.info })))
}

fn require_models(state: &AppState) -> Result<Arc<Models>, ApiError> {
    state.models().ok_or_else(|| {
        let why = state.load_error().unwrap_or_else(|| "models are still loading".into());
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", why)
    })
}

/// Reads every part of a multipart body as `(name, bytes)`.
async fn read_parts(multipart: Result<Multipart, MultipartRejection>) -> Result<Vec<(String, Vec<u8>)>, ApiError> {
    let mut multipart = multipart.map_err(|e| ApiError::bad_request(format!("expected multipart/form-data: {e}")))?;
    let mut parts = Vec::new();
    loop {
        let field = multipart.next_field().await.map_err(multipart_error)?;
        let Some(field) = field else { break };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(multipart_error)?;
        parts.push((name, bytes.to_vec()));
    }
    Ok(parts)
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "too_large", e.body_text())
    } else {
        ApiError::bad_request(format!("malformed multipart body: {}", e.body_text()))
    }
}

fn take_part(parts: &mut Vec<(String, Vec<u8>)>, names: &[&str]) -> Option<Vec<u8>> {
    let i = parts.iter().position(|(n, _)| names.contains(&n.as_str()))?;
    Some(parts.remove(i).1)
}

fn decode_upload(bytes: &[u8], what: &str, max_secs: f64) -> Result<AudioClip, ApiError> {
    let clip = decode_wav(bytes).map_err(|e| {
        let mut err = ApiError::from(e);
        err.message = format!("{what}: {}", err.message);
        err
    })?;
    if clip.duration_secs() > max_secs {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            format!("{what} lasts {:.2} s, limit is {max_secs} s", clip.duration_secs()),
        ));
    }
    Ok(clip)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> wesper_core::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertQuery {
    #[serde(default)]
    pub include_mel: bool,
}

/// Row-major `f32` payload, base64-encoded little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelPayload {
    pub shape: [usize; 2],
    pub data: String,
}

impl MelPayload {
    pub fn encode(mel: &MelSpectrogram) -> Self {
        let bytes: Vec<u8> = mel.to_f32_row_major().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: [mel.frames(), mel.n_mels()],
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Option<Vec<f32>> {
        let bytes = B64.decode(&self.data).ok()?;
        if bytes.len() != self.shape[0] * self.shape[1] * 4 {
            return None;
        }
        Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn conversion_json(r: &ConversionResult, include_mel: bool) -> Value {
    let s = r.summary();
    let mut v = json!({
        "rtf": s.rtf,
        "timings": s.timings,
        "duration_in": s.duration_in,
        "duration_out": s.duration_out,
        "frames": s.frames,
        "sample_rate": SAMPLE_RATE,
    });
    if include_mel {
        v["mel_in"] = json!(MelPayload::encode(&r.mel_in));
        v["mel_out"] = json!(MelPayload::encode(&r.mel_out));
    }
    v
}

async fn convert(
    State(state): State<AppState>,
    query: Result<Query<ConvertQuery>, axum::extract::rejection::QueryRejection>,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let models = require_models(&state)?;
    let Query(query) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut parts = read_parts(multipart).await?;
    let bytes = take_part(&mut parts, &["audio", "file", "wav"])
        .or_else(|| (parts.len() == 1).then(|| parts.remove(0).1))
        .ok_or_else(|| ApiError::bad_request("multipart body has no `audio` part"))?;
    let clip = decode_upload(&bytes, "audio", state.max_upload_secs())?;
    let result = blocking(move || models.converter.convert(&clip)).await?;
    let wav = encode_wav(&result.audio_out)?;
    let meta = conversion_json(&result, query.include_mel);

    let wants_multipart = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("multipart/mixed"));
    if wants_multipart {
        let mut body = Vec::with_capacity(wav.len() + 1024);
        let json = serde_json::to_vec(&meta).expect("serializable");
        for (ctype, payload) in [("application/json", &json), ("audio/wav", &wav)] {
            body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}\r\nContent-Type: {ctype}\r\n\r\n").as_bytes());
            body.extend_from_slice(payload);
            body.extend_from_slice(b"\r\n");
        }
        body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
        let ctype = HeaderValue::from_str(&format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}")).expect("ascii");
        return Ok(([(header::CONTENT_TYPE, ctype)], body).into_response());
    }
    let mut meta = meta;
    meta["audio_wav_base64"] = json!(B64.encode(&wav));
    Ok(Json(meta).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeQuery {
    pub alignment: Option<Alignment>,
}

async fn analyze_pair(
    State(state): State<AppState>,
    query: Result<Query<AnalyzeQuery>, axum::extract::rejection::QueryRejection>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Json<Value>, ApiError> {
    let models = require_models(&state)?;
    let Query(query) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut parts = read_parts(multipart).await?;
    let max = state.max_upload_secs();
    let normal = take_part(&mut parts, &["normal"]).ok_or_else(|| ApiError::bad_request("missing `normal` part"))?;
    let whisper = take_part(&mut parts, &["whisper"]).ok_or_else(|| ApiError::bad_request("missing `whisper` part"))?;
    let normal = decode_upload(&normal, "normal", max)?;
    let whisper = decode_upload(&whisper, "whisper", max)?;
    let aligned = normal.len() / wesper_core::FRAME_HOP == whisper.len() / wesper_core::FRAME_HOP;
    let alignment = query
        .alignment
        .unwrap_or(if aligned { Alignment::FrameSync } else { Alignment::Dtw });
    if alignment == Alignment::FrameSync && !aligned {
        return Err(ApiError::bad_request("frame_sync alignment needs clips with equal frame counts"));
    }
    let pair = Pair {
        normal,
        whisper,
        aligned,
    };
    let stu = models.converter.stu.clone();
    let report = blocking(move || layer_distance(&stu, &[pair], alignment)).await?;
    Ok(Json(serde_json::to_value(report).expect("serializable")))
}
