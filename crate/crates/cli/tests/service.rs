use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use proptest::prelude::*;
use serde_json::Value;
use tower::ServiceExt;
use wesper::service::{router, AppState, MelPayload, Models};
use wesper_core::audio::{decode_wav, encode_wav};
use wesper_core::stu::{Stu, StuConfig};
use wesper_core::uts::{Uts, UtsConfig};
use wesper_core::{AudioClip, SAMPLE_RATE};

const BOUNDARY: &str = "test-boundary-7c1";

fn tone_wav(secs: f64, rate: u32) -> Vec<u8> {
    let n = (secs * rate as f64) as usize;
    let s = (0..n).map(|i| 0.3 * (i as f32 * 0.07).sin() + 0.1 * (i as f32 * 0.013).sin()).collect();
    encode_wav(&AudioClip::new(s, rate).unwrap()).unwrap()
}

fn multipart(parts: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.wav\"\r\nContent-Type: audio/wav\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn post(uri: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn loaded_state(max_secs: f64) -> AppState {
    let state = AppState::new(max_secs);
    let stu = Stu::new(StuConfig::desk()).unwrap();
    let uts = Uts::new(UtsConfig::desk(stu.config.d_unit)).unwrap();
    assert!(state.install(Models::new(stu, uts).unwrap()));
    state
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, body, ctype)
}

fn json(body: &[u8]) -> Value {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn health_answers_before_models_load() {
    let state = AppState::new(30.0);
    let app = router(state.clone(), None);
    let (status, body, _) = send(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["models_loaded"], false);
    assert_eq!(v["format_version"], 1);

    let (status, body, _) = send(&app, post("/convert", multipart(&[("audio", &tone_wav(1.0, SAMPLE_RATE))]))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(json(&body)["error"]["code"], "not_loaded");
    let (status, _, _) = send(&app, Request::get("/models").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    // the same router sees models once installed
    let stu = Stu::new(StuConfig::desk()).unwrap();
    let uts = Uts::new(UtsConfig::desk(64)).unwrap();
    state.install(Models::new(stu, uts).unwrap());
    let (status, body, _) = send(&app, Request::get("/models").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["models"][0]["kind"], "stu");
    assert_eq!(v["models"][1]["kind"], "uts");
}

#[tokio::test]
async fn convert_keeps_duration_and_returns_audio() {
    let app = router(loaded_state(30.0), None);
    let (status, body, ctype) = send(
        &app,
        post("/convert?include_mel=true", multipart(&[("audio", &tone_wav(1.0, SAMPLE_RATE))])),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(ctype.as_deref(), Some("application/json"));
    let v = json(&body);
    let out = v["duration_out"].as_f64().unwrap();
    assert!((out - 1.0).abs() <= 2.0 * 1024.0 / 16_000.0, "duration_out {out}");
    assert!(v["rtf"].as_f64().unwrap() > 0.0);
    let wav = base64::engine::general_purpose::STANDARD
        .decode(v["audio_wav_base64"].as_str().unwrap())
        .unwrap();
    let clip = decode_wav(&wav).unwrap();
    assert!((clip.duration_secs() - out).abs() < 1e-9);

    let mel_in: MelPayload = serde_json::from_value(v["mel_in"].clone()).unwrap();
    let mel_out: MelPayload = serde_json::from_value(v["mel_out"].clone()).unwrap();
    assert_eq!(mel_in.shape, [50, 80]);
    assert_eq!(mel_out.shape, mel_in.shape);
    assert_eq!(mel_out.decode().unwrap().len(), 50 * 80);
}

#[tokio::test]
async fn other_sample_rates_are_resampled() {
    let app = router(loaded_state(30.0), None);
    let (status, body, _) = send(&app, post("/convert", multipart(&[("audio", &tone_wav(1.0, 44_100))]))).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert!((v["duration_out"].as_f64().unwrap() - 1.0).abs() <= 0.13);
    assert!(v.get("mel_in").is_none());
}

#[tokio::test]
async fn multipart_response_on_request() {
    let app = router(loaded_state(30.0), None);
    let mut req = post("/convert", multipart(&[("audio", &tone_wav(0.5, SAMPLE_RATE))]));
    req.headers_mut()
        .insert(header::ACCEPT, "multipart/mixed".parse().unwrap());
    let (status, body, ctype) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    let ctype = ctype.unwrap();
    let boundary = ctype.split("boundary=").nth(1).unwrap();
    let text = String::from_utf8_lossy(&body);
    assert_eq!(text.matches(&format!("--{boundary}\r\n")).count(), 2);
    assert!(text.contains("Content-Type: application/json"));
    assert!(text.contains("Content-Type: audio/wav"));
    let wav_start = body.windows(4).position(|w| w == b"RIFF").unwrap();
    let wav_end = body.len() - format!("\r\n--{boundary}--\r\n").len();
    let clip = decode_wav(&body[wav_start..wav_end]).unwrap();
    assert_eq!(clip.len(), 8_000);
}

#[tokio::test]
async fn malformed_uploads_are_400() {
    let app = router(loaded_state(30.0), None);
    let (status, body, _) = send(&app, post("/convert", multipart(&[("audio", b"just some text, not audio")]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json(&body)["error"]["message"].as_str().unwrap().starts_with("audio:"));

    let (status, _, _) = send(&app, post("/convert", b"--nope".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let req = Request::post("/convert")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{}"))
        .unwrap();
    let (status, body, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["error"]["code"], "bad_request");

    let two = multipart(&[("a", &tone_wav(0.1, SAMPLE_RATE)), ("b", &tone_wav(0.1, SAMPLE_RATE))]);
    let (status, _, _) = send(&app, post("/convert", two)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // shorter than one frame
    let (status, _, _) = send(&app, post("/convert", multipart(&[("audio", &tone_wav(0.01, SAMPLE_RATE))]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_uploads_are_413() {
    let app = router(loaded_state(1.0), None);
    let (status, body, _) = send(&app, post("/convert", multipart(&[("audio", &tone_wav(1.5, SAMPLE_RATE))]))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(json(&body)["error"]["code"], "too_large");

    // larger than the byte limit itself
    let huge = vec![0u8; 3 << 20];
    let (status, _, _) = send(&app, post("/convert", multipart(&[("audio", &huge)]))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn analyze_pair_reports_every_tap() {
    let app = router(loaded_state(30.0), None);
    let normal = tone_wav(0.6, SAMPLE_RATE);
    let whisper = {
        let c = decode_wav(&normal).unwrap();
        let w = wesper_core::whisperize::whisperize(&c, &Default::default()).unwrap();
        encode_wav(&w).unwrap()
    };
    let (status, body, _) = send(&app, post("/analyze/pair", multipart(&[("normal", &normal), ("whisper", &whisper)]))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v = json(&body);
    assert_eq!(v["taps"].as_array().unwrap().len(), 5);
    assert_eq!(v["alignment"], "frame_sync");
    assert_eq!(v["metric"], "cosine");

    let longer = tone_wav(0.9, SAMPLE_RATE);
    let (status, body, _) = send(&app, post("/analyze/pair", multipart(&[("normal", &normal), ("whisper", &longer)]))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["alignment"], "dtw");
    let (status, _, _) = send(
        &app,
        post("/analyze/pair?alignment=frame_sync", multipart(&[("normal", &normal), ("whisper", &longer)])),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = send(&app, post("/analyze/pair", multipart(&[("normal", &normal)]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn ui_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>wesper</title>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let app = router(AppState::new(30.0), Some(dir.path()));
    let (status, body, ctype) = send(&app, Request::get("/ui/app.js").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"console.log(1)");
    assert!(ctype.unwrap().contains("javascript"));
    let (status, body, _) = send(&app, Request::get("/ui/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("<title>wesper</title>"));
    let (status, _, _) = send(&app, Request::get("/ui/missing.css").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_sequential_ones() {
    let app = router(loaded_state(30.0), None);
    let clips: Vec<Vec<u8>> = (0..8).map(|i| tone_wav(0.4 + 0.05 * i as f64, SAMPLE_RATE)).collect();
    let mut sequential = Vec::new();
    for c in &clips {
        let (status, body, _) = send(&app, post("/convert", multipart(&[("audio", c)]))).await;
        assert_eq!(status, StatusCode::OK);
        sequential.push(json(&body)["audio_wav_base64"].clone());
    }
    let handles: Vec<_> = clips
        .iter()
        .map(|c| {
            let app = app.clone();
            let req = post("/convert", multipart(&[("audio", c)]));
            tokio::spawn(async move { send(&app, req).await })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(&sequential) {
        let (status, body, _) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&json(&body)["audio_wav_base64"], expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mel_payload_roundtrips(data in (1usize..30).prop_flat_map(|t| prop::collection::vec(-12.0f64..4.0, t * 80))) {
        let t = data.len() / 80;
        let mel = wesper_core::dsp::MelSpectrogram::new(
            ndarray::Array2::from_shape_vec((t, 80), data).unwrap(),
            1024,
            320,
            SAMPLE_RATE,
        )
        .unwrap();
        let payload = MelPayload::encode(&mel);
        prop_assert_eq!(payload.shape, [t, 80]);
        prop_assert_eq!(payload.decode().unwrap(), mel.to_f32_row_major());
        let json = serde_json::to_string(&payload).unwrap();
        let back: MelPayload = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.decode().unwrap(), mel.to_f32_row_major());
    }
}
