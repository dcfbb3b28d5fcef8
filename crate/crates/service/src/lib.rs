//! HTTP inference service: generation and the three timbre edits over the
//! trained checkpoints, synchronous per request.
//!
//! Models are loaded once and shared read-only; every request builds its own
//! generators from its seed, and a semaphore bounds how many run at once.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use timbre_core::checkpoint::sha256_hex;
use timbre_core::config::{RunConfig, ServiceConfig};
use timbre_core::data::MAX_DESCRIPTION_CHARS;
use timbre_core::manipulate::InpaintMask;
use timbre_core::pipeline::{AudioInfo, Command, JobOutput, JobParams, Models, Sidecar};
use timbre_core::spectral::spectral_png_bytes;
use timbre_core::{AudioClip, Error};

mod openapi;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::Shape(_) | Error::Config(_) | Error::Json(_) | Error::Image(_) => StatusCode::BAD_REQUEST,
            Error::Dependency(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub guidance_w: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub queued_ms: f64,
    pub compute_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub id: String,
    /// Base64 WAV when under the inline limit.
    pub audio_base64: Option<String>,
    /// Temporary download path otherwise.
    pub audio_url: Option<String>,
    pub spectrogram_png_base64: String,
    pub sample_rate: u32,
    pub samples: usize,
    pub params: JobParams,
    /// Complete replay record: `timbre replay` accepts this object as-is.
    pub sidecar: Sidecar,
    pub timing: Timing,
}

#[derive(Clone)]
enum LoadState {
    Loading,
    Ready(Arc<Models>),
    Failed(String),
}

/// Expiring in-memory store behind the temporary audio URLs.
#[derive(Default)]
struct TempStore {
    files: HashMap<String, (Vec<u8>, Instant)>,
}

impl TempStore {
    fn purge(&mut self) {
        let now = Instant::now();
        self.files.retain(|_, (_, exp)| *exp > now);
    }
}

pub struct AppState {
    pub run_config: RunConfig,
    pub service: ServiceConfig,
    models: RwLock<LoadState>,
    permits: Semaphore,
    temp: Mutex<TempStore>,
}

impl AppState {
    pub fn new(run_config: RunConfig) -> Arc<Self> {
        let service = run_config.service.clone();
        Arc::new(Self {
            permits: Semaphore::new(service.max_in_flight),
            service,
            run_config,
            models: RwLock::new(LoadState::Loading),
            temp: Mutex::new(TempStore::default()),
        })
    }

    pub fn set_models(&self, models: Models) {
        *self.models.write().expect("state lock") = LoadState::Ready(Arc::new(models));
    }

    pub fn set_failed(&self, reason: String) {
        *self.models.write().expect("state lock") = LoadState::Failed(reason);
    }

    /// Loads checkpoints on a blocking thread; the service answers 503 meanwhile.
    pub async fn load_models(self: Arc<Self>) {
        let cfg = self.run_config.clone();
        let state = self.clone();
        let result = tokio::task::spawn_blocking(move || Models::load(&cfg)).await;
        match result {
            Ok(Ok(models)) => state.set_models(models),
            Ok(Err(e)) => state.set_failed(e.to_string()),
            Err(e) => state.set_failed(e.to_string()),
        }
    }

    fn ready(&self) -> ApiResult<Arc<Models>> {
        match &*self.models.read().expect("state lock") {
            LoadState::Ready(m) => Ok(m.clone()),
            LoadState::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models are still loading")),
            LoadState::Failed(e) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("models failed to load: {e}"))),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = {
        let origin = if state.service.cors_origin == "*" {
            AllowOrigin::any()
        } else {
            match HeaderValue::from_str(&state.service.cors_origin) {
                Ok(v) => AllowOrigin::list([v]),
                Err(_) => AllowOrigin::list(Vec::<HeaderValue>::new()),
            }
        };
        CorsLayer::new()
            .allow_origin(origin)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE])
    };
    let limit = state.service.max_upload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/config", get(config))
        .route("/v1/spec", get(spec))
        .route("/v1/generate", post(generate))
        .route("/v1/transform", post(transform))
        .route("/v1/inpaint", post(inpaint))
        .route("/v1/extend", post(extend))
        .route("/v1/files/:id", get(file))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match &*state.models.read().expect("state lock") {
        LoadState::Ready(m) => (StatusCode::OK, Json(json!({ "status": "ready", "checkpoints": m.checkpoints }))).into_response(),
        LoadState::Loading => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
        LoadState::Failed(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "failed", "error": e }))).into_response(),
    }
}

async fn config(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let models = state.ready()?;
    Ok(Json(json!({
        "config": models.config,
        "checkpoints": models.checkpoints,
        "limits": limits(&state, &models),
    })))
}

fn limits(state: &AppState, models: &Models) -> serde_json::Value {
    json!({
        "timesteps": models.timesteps(),
        "max_steps": state.service.max_steps,
        "default_steps": default_steps(state, models),
        "max_prompt_chars": MAX_DESCRIPTION_CHARS,
        "sample_rate": models.stft.sample_rate,
        "num_samples": models.stft.num_samples(),
        "spectrogram_bins": models.stft.num_bins(),
        "spectrogram_frames": models.stft.num_frames(),
        "inline_limit": state.service.inline_limit,
    })
}

async fn spec(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let models = state.ready().ok();
    Json(openapi::document(&state.service, models.as_deref()))
}

async fn file(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let mut temp = state.temp.lock().expect("temp lock");
    temp.purge();
    let id = id.trim_end_matches(".wav");
    match temp.files.get(id) {
        Some((bytes, _)) => ([(header::CONTENT_TYPE, "audio/wav")], bytes.clone()).into_response(),
        None => ApiError::new(StatusCode::NOT_FOUND, "unknown or expired file").into_response(),
    }
}

fn default_steps(state: &AppState, models: &Models) -> usize {
    models.default_steps().min(state.service.max_steps)
}

/// Shared validation of the common generation fields.
fn base_params(state: &AppState, models: &Models, command: Command, prompt: String, w: f64, seed: Option<u64>, steps: Option<usize>) -> ApiResult<JobParams> {
    if prompt.chars().count() > MAX_DESCRIPTION_CHARS {
        return Err(ApiError::bad_request(format!("prompt longer than {MAX_DESCRIPTION_CHARS} characters")));
    }
    if !(w.is_finite() && w >= 0.0) {
        return Err(ApiError::bad_request("guidance_w must be a finite number >= 0"));
    }
    let steps = steps.unwrap_or_else(|| default_steps(state, models));
    if steps == 0 || steps > state.service.max_steps || steps > models.timesteps() {
        return Err(ApiError::bad_request(format!(
            "steps must lie in 1..={}",
            state.service.max_steps.min(models.timesteps())
        )));
    }
    // Unseeded requests draw one; it is echoed back so the result can be replayed.
    let seed = seed.unwrap_or_else(|| rand::random::<u32>() as u64);
    Ok(JobParams::new(command, prompt, w, seed, steps))
}

async fn run_job(state: Arc<AppState>, models: Arc<Models>, params: JobParams, input: Option<AudioClip>) -> ApiResult<Json<JobResult>> {
    params.validate(models.timesteps())?;
    let queued = Instant::now();
    let _permit = state.permits.acquire().await.map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
    let queued_ms = queued.elapsed().as_secs_f64() * 1e3;
    let started = Instant::now();
    let job_models = models.clone();
    let job_params = params.clone();
    let output: JobOutput = tokio::task::spawn_blocking(move || job_models.run(&job_params, input.as_ref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let compute_ms = started.elapsed().as_secs_f64() * 1e3;

    let wav = output.audio.to_wav_bytes()?;
    let png = spectral_png_bytes(&output.spectral)?;
    let wav_sha = sha256_hex(&wav);
    let id = sha256_hex(format!("{wav_sha}:{}", serde_json::to_string(&params).unwrap_or_default()).as_bytes())[..16].to_string();
    let (audio_base64, audio_url) = if wav.len() <= state.service.inline_limit {
        (Some(BASE64.encode(&wav)), None)
    } else {
        let mut temp = state.temp.lock().expect("temp lock");
        temp.purge();
        let ttl = Duration::from_secs(state.service.temp_ttl_secs);
        temp.files.insert(id.clone(), (wav.clone(), Instant::now() + ttl));
        (None, Some(format!("/v1/files/{id}.wav")))
    };
    let sidecar = Sidecar {
        params: params.clone(),
        checkpoints: models.checkpoints.clone(),
        config: models.config.clone(),
        audio: AudioInfo {
            file: format!("{id}.wav"),
            sample_rate: output.audio.sample_rate,
            samples: output.audio.len(),
            sha256: wav_sha,
        },
        spectrogram: format!("{id}.png"),
    };
    Ok(Json(JobResult {
        id,
        audio_base64,
        audio_url,
        spectrogram_png_base64: BASE64.encode(&png),
        sample_rate: output.audio.sample_rate,
        samples: output.audio.len(),
        params,
        sidecar,
        timing: Timing { queued_ms, compute_ms },
    }))
}

async fn generate(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> ApiResult<Json<JobResult>> {
    let models = state.ready()?;
    let req: GenerateRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))?;
    let params = base_params(&state, &models, Command::Generate, req.prompt, req.guidance_w, req.seed, req.steps)?;
    run_job(state, models, params, None).await
}

/// Fields of a multipart edit request.
#[derive(Default)]
struct EditForm {
    audio: Option<Vec<u8>>,
    mask: Option<Vec<u8>>,
    fields: HashMap<String, String>,
}

impl EditForm {
    async fn read(mut mp: Multipart) -> ApiResult<Self> {
        let mut form = EditForm::default();
        while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(format!("multipart: {e}")))? {
            let name = field.name().unwrap_or_default().to_string();
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(format!("multipart field {name}: {e}")))?;
            match name.as_str() {
                "audio" => form.audio = Some(bytes.to_vec()),
                "mask" => form.mask = Some(bytes.to_vec()),
                "prompt" | "guidance_w" | "seed" | "steps" | "t0" | "target_frames" => {
                    let text = String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request(format!("field {name} is not UTF-8")))?;
                    form.fields.insert(name, text);
                }
                other => return Err(ApiError::bad_request(format!("unknown field {other:?}"))),
            }
        }
        Ok(form)
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> ApiResult<Option<T>> {
        match self.fields.get(name) {
            None => Ok(None),
            Some(v) => v.trim().parse().map(Some).map_err(|_| ApiError::bad_request(format!("field {name}: cannot parse {v:?}"))),
        }
    }

    fn require<T: std::str::FromStr>(&self, name: &str) -> ApiResult<T> {
        self.parse(name)?.ok_or_else(|| ApiError::bad_request(format!("missing field {name}")))
    }

    fn params(&self, state: &AppState, models: &Models, command: Command) -> ApiResult<JobParams> {
        let prompt = self.fields.get("prompt").cloned().unwrap_or_default();
        let w = self.parse("guidance_w")?.unwrap_or(models.config.diffusion.guidance_scale);
        base_params(state, models, command, prompt, w, self.parse("seed")?, self.parse("steps")?)
    }

    /// Decodes the uploaded WAV; anything that is not a readable mono WAV at
    /// the model's sample rate is an unsupported media type.
    fn audio(&self, models: &Models, params: &mut JobParams) -> ApiResult<AudioClip> {
        let bytes = self.audio.as_ref().ok_or_else(|| ApiError::bad_request("missing file field audio"))?;
        let clip = AudioClip::from_wav_bytes(bytes)
            .map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("audio must be a mono WAV: {e}")))?;
        if clip.sample_rate != models.stft.sample_rate {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                format!("audio sample rate {} Hz, expected {} Hz", clip.sample_rate, models.stft.sample_rate),
            ));
        }
        if clip.len() > models.stft.num_samples() {
            return Err(ApiError::bad_request(format!(
                "audio longer than the configured {} samples",
                models.stft.num_samples()
            )));
        }
        params.input_sha256 = Some(sha256_hex(bytes));
        Ok(clip)
    }
}

async fn transform(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Json<JobResult>> {
    let models = state.ready()?;
    let form = EditForm::read(mp).await?;
    let mut params = form.params(&state, &models, Command::Transform)?;
    let t0: usize = form.require("t0")?;
    if t0 > models.timesteps() {
        return Err(ApiError::bad_request(format!("t0 = {t0} exceeds T = {}", models.timesteps())));
    }
    params.t0 = Some(t0);
    let clip = form.audio(&models, &mut params)?;
    run_job(state, models, params, Some(clip)).await
}

async fn inpaint(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Json<JobResult>> {
    let models = state.ready()?;
    let form = EditForm::read(mp).await?;
    let mut params = form.params(&state, &models, Command::Inpaint)?;
    let png = form.mask.as_ref().ok_or_else(|| ApiError::bad_request("missing file field mask"))?;
    let mask = InpaintMask::from_png_bytes(png).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;
    // Surface dimension errors before decoding audio.
    models.latent_mask(&mask)?;
    params.mask = Some(mask.to_rle_json());
    let clip = form.audio(&models, &mut params)?;
    run_job(state, models, params, Some(clip)).await
}

async fn extend(State(state): State<Arc<AppState>>, mp: Multipart) -> ApiResult<Json<JobResult>> {
    let models = state.ready()?;
    let form = EditForm::read(mp).await?;
    let mut params = form.params(&state, &models, Command::Extend)?;
    params.target_frames = Some(form.require("target_frames")?);
    let clip = form.audio(&models, &mut params)?;
    run_job(state, models, params, Some(clip)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_http_status() {
        let status = |e: Error| ApiError::from(e).status;
        assert_eq!(status(Error::InvalidInput("x".into())), StatusCode::BAD_REQUEST);
        assert_eq!(status(Error::Shape("x".into())), StatusCode::BAD_REQUEST);
        assert_eq!(status(Error::Dependency("x".into())), StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(status(Error::Numerical("x".into())), StatusCode::INTERNAL_SERVER_ERROR);
    }

    #[test]
    fn temp_store_drops_expired_files() {
        let mut store = TempStore::default();
        let now = Instant::now();
        store.files.insert("old".into(), (vec![1], now - Duration::from_secs(1)));
        store.files.insert("new".into(), (vec![2], now + Duration::from_secs(60)));
        store.purge();
        assert!(store.files.contains_key("new"));
        assert!(!store.files.contains_key("old"));
    }

    #[test]
    fn generate_request_rejects_unknown_fields() {
        let ok: GenerateRequest = serde_json::from_str(r#"{"prompt":"dark","guidance_w":1.5}"#).unwrap();
        assert_eq!(ok.seed, None);
        assert!(serde_json::from_str::<GenerateRequest>(r#"{"prompt":"dark","guidance_w":1.5,"w":2}"#).is_err());
    }
}
