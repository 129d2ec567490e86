//! JSON-over-HTTP backend protocol.
//!
//! [`router`] serves any in-process backend pair under `/generative/*` and
//! `/embedding/*`; [`RemoteGenerator`] and [`RemoteEmbedder`] implement the
//! backend traits against such a server, so a heavyweight model can run in
//! a separate process. Images travel as base64-encoded PNG.

use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shiftkit::backends::{EmbeddingBackend, GenerativeBackend, Objective};
use shiftkit::generation::{decode_png, encode_png};
use shiftkit::{Error as CoreError, Result as CoreResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerativeInfo {
    pub backend_id: String,
    pub text_embedding_dim: usize,
    pub stochastic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingInfo {
    pub backend_id: String,
    pub dim: usize,
    pub stochastic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub token: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenQuery {
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Presence {
    pub present: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordQuery {
    pub word: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding32 {
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding64 {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PngImage {
    pub png_base64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveRequest {
    pub embedding: Vec<f64>,
    pub png_base64: String,
    pub template: String,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveResponse {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextQuery {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterError {
    pub error: String,
}

pub fn png_to_base64(image: &RgbImage) -> CoreResult<String> {
    Ok(B64.encode(encode_png(image)?))
}

pub fn base64_to_png(data: &str) -> CoreResult<RgbImage> {
    let bytes = B64
        .decode(data)
        .map_err(|e| CoreError::invalid("png_base64", e.to_string()))?;
    decode_png(&bytes)
}

// ---------------------------------------------------------------- server

#[derive(Clone)]
pub struct AdapterState {
    generator: Arc<RwLock<Box<dyn GenerativeBackend>>>,
    embedder: Arc<dyn EmbeddingBackend>,
}

impl AdapterState {
    pub fn new(generator: Box<dyn GenerativeBackend>, embedder: Box<dyn EmbeddingBackend>) -> Self {
        AdapterState {
            generator: Arc::new(RwLock::new(generator)),
            embedder: Arc::from(embedder),
        }
    }
}

struct Failure(CoreError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = match self.0 {
            CoreError::InvalidArgument { .. }
            | CoreError::InvalidTemplate { .. }
            | CoreError::DimensionMismatch { .. }
            | CoreError::DuplicateToken(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(AdapterError {
                error: self.0.to_string(),
            }),
        )
            .into_response()
    }
}

type Reply<T> = std::result::Result<Json<T>, Failure>;

fn lock_err<T>(_: T) -> Failure {
    Failure(CoreError::Backend("adapter state lock poisoned".into()))
}

async fn generative_info(State(s): State<AdapterState>) -> Reply<GenerativeInfo> {
    let g = s.generator.read().map_err(lock_err)?;
    Ok(Json(GenerativeInfo {
        backend_id: g.backend_id().to_string(),
        text_embedding_dim: g.text_embedding_dim(),
        stochastic: g.is_stochastic(),
    }))
}

async fn register(State(s): State<AdapterState>, Json(req): Json<RegisterRequest>) -> Reply<Presence> {
    let mut g = s.generator.write().map_err(lock_err)?;
    g.register_token(&req.token, &req.embedding).map_err(Failure)?;
    Ok(Json(Presence { present: true }))
}

async fn has_token(State(s): State<AdapterState>, Json(req): Json<TokenQuery>) -> Reply<Presence> {
    let g = s.generator.read().map_err(lock_err)?;
    Ok(Json(Presence {
        present: g.has_token(&req.token),
    }))
}

async fn word_embedding(State(s): State<AdapterState>, Json(req): Json<WordQuery>) -> Reply<Embedding32> {
    let g = s.generator.read().map_err(lock_err)?;
    Ok(Json(Embedding32 {
        embedding: g.word_embedding(&req.word).map_err(Failure)?,
    }))
}

async fn generate(State(s): State<AdapterState>, Json(req): Json<GenerateRequest>) -> Reply<PngImage> {
    let g = s.generator.read().map_err(lock_err)?;
    let img = g.generate(&req.prompt, req.seed).map_err(Failure)?;
    Ok(Json(PngImage {
        png_base64: png_to_base64(&img).map_err(Failure)?,
    }))
}

async fn objective(State(s): State<AdapterState>, Json(req): Json<ObjectiveRequest>) -> Reply<ObjectiveResponse> {
    let image = base64_to_png(&req.png_base64).map_err(Failure)?;
    let g = s.generator.read().map_err(lock_err)?;
    let obj = g
        .inversion_objective(&req.embedding, &image, &req.template, req.noise_seed)
        .map_err(Failure)?;
    Ok(Json(ObjectiveResponse {
        loss: obj.loss,
        gradient: obj.gradient,
    }))
}

async fn embedding_info(State(s): State<AdapterState>) -> Json<EmbeddingInfo> {
    Json(EmbeddingInfo {
        backend_id: s.embedder.backend_id().to_string(),
        dim: s.embedder.dim(),
        stochastic: s.embedder.is_stochastic(),
    })
}

async fn embed_image(State(s): State<AdapterState>, Json(req): Json<PngImage>) -> Reply<Embedding64> {
    let image = base64_to_png(&req.png_base64).map_err(Failure)?;
    Ok(Json(Embedding64 {
        embedding: s.embedder.embed_image(&image).map_err(Failure)?,
    }))
}

async fn embed_text(State(s): State<AdapterState>, Json(req): Json<TextQuery>) -> Reply<Embedding64> {
    Ok(Json(Embedding64 {
        embedding: s.embedder.embed_text(&req.text).map_err(Failure)?,
    }))
}

pub fn router(state: AdapterState) -> Router {
    Router::new()
        .route("/generative/info", get(generative_info))
        .route("/generative/register", post(register))
        .route("/generative/has_token", post(has_token))
        .route("/generative/word_embedding", post(word_embedding))
        .route("/generative/generate", post(generate))
        .route("/generative/objective", post(objective))
        .route("/embedding/info", get(embedding_info))
        .route("/embedding/image", post(embed_image))
        .route("/embedding/text", post(embed_text))
        .with_state(state)
}

// ---------------------------------------------------------------- client

#[derive(Debug, Clone)]
struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Client {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn decode<T: DeserializeOwned>(
        &self,
        path: &str,
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> CoreResult<T> {
        let url = format!("{}{path}", self.base);
        let mut resp = resp.map_err(|e| CoreError::Backend(format!("{url}: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let detail = resp
                .body_mut()
                .read_json::<AdapterError>()
                .map(|e| e.error)
                .unwrap_or_default();
            return Err(CoreError::Backend(format!("{url}: HTTP {status}: {detail}")));
        }
        resp.body_mut()
            .read_json::<T>()
            .map_err(|e| CoreError::Backend(format!("{url}: {e}")))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> CoreResult<T> {
        let resp = self.agent.get(&format!("{}{path}", self.base)).call();
        self.decode(path, resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> CoreResult<T> {
        let resp = self.agent.post(&format!("{}{path}", self.base)).send_json(body);
        self.decode(path, resp)
    }
}

/// Generative backend living behind an adapter URL.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    client: Client,
    info: GenerativeInfo,
}

impl RemoteGenerator {
    pub fn connect(base_url: &str) -> CoreResult<Self> {
        let client = Client::new(base_url);
        let info = client.get("/generative/info")?;
        Ok(RemoteGenerator { client, info })
    }
}

impl GenerativeBackend for RemoteGenerator {
    fn backend_id(&self) -> &str {
        &self.info.backend_id
    }

    fn text_embedding_dim(&self) -> usize {
        self.info.text_embedding_dim
    }

    fn register_token(&mut self, token: &str, embedding: &[f32]) -> CoreResult<()> {
        let _: Presence = self.client.post(
            "/generative/register",
            &RegisterRequest {
                token: token.to_string(),
                embedding: embedding.to_vec(),
            },
        )?;
        Ok(())
    }

    fn has_token(&self, token: &str) -> bool {
        self.client
            .post::<_, Presence>(
                "/generative/has_token",
                &TokenQuery {
                    token: token.to_string(),
                },
            )
            .is_ok_and(|p| p.present)
    }

    fn word_embedding(&self, word: &str) -> CoreResult<Vec<f32>> {
        let r: Embedding32 = self
            .client
            .post("/generative/word_embedding", &WordQuery { word: word.to_string() })?;
        Ok(r.embedding)
    }

    fn generate(&self, prompt: &str, seed: u64) -> CoreResult<RgbImage> {
        let r: PngImage = self.client.post(
            "/generative/generate",
            &GenerateRequest {
                prompt: prompt.to_string(),
                seed,
            },
        )?;
        base64_to_png(&r.png_base64)
    }

    fn inversion_objective(
        &self,
        embedding: &[f64],
        image: &RgbImage,
        template: &str,
        noise_seed: u64,
    ) -> CoreResult<Objective> {
        let r: ObjectiveResponse = self.client.post(
            "/generative/objective",
            &ObjectiveRequest {
                embedding: embedding.to_vec(),
                png_base64: png_to_base64(image)?,
                template: template.to_string(),
                noise_seed,
            },
        )?;
        Ok(Objective {
            loss: r.loss,
            gradient: r.gradient,
        })
    }

    fn is_stochastic(&self) -> bool {
        self.info.stochastic
    }
}

/// Embedding backend living behind an adapter URL.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: Client,
    info: EmbeddingInfo,
}

impl RemoteEmbedder {
    pub fn connect(base_url: &str) -> CoreResult<Self> {
        let client = Client::new(base_url);
        let info = client.get("/embedding/info")?;
        Ok(RemoteEmbedder { client, info })
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn backend_id(&self) -> &str {
        &self.info.backend_id
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn embed_image(&self, image: &RgbImage) -> CoreResult<Vec<f64>> {
        let r: Embedding64 = self.client.post(
            "/embedding/image",
            &PngImage {
                png_base64: png_to_base64(image)?,
            },
        )?;
        Ok(r.embedding)
    }

    fn embed_text(&self, text: &str) -> CoreResult<Vec<f64>> {
        let r: Embedding64 = self
            .client
            .post("/embedding/text", &TextQuery { text: text.to_string() })?;
        Ok(r.embedding)
    }

    fn is_stochastic(&self) -> bool {
        self.info.stochastic
    }
}
