//! Uniform access to chat completion and text embedding.
//!
//! ```text
//! Gateway
//! ├── ScriptedBackend  (deterministic, JSON scripts keyed by script key)
//! ├── HttpBackend      (chat-completion HTTP+JSON protocol)
//! └── any other ChatBackend impl (e.g. simulators in the eval harness)
//! ```
//!
//! The gateway owns the structured-output contract: JSON extraction, schema
//! validation and the correction re-prompt loop. Backends only turn a request
//! into text.

mod embedding;
mod http;
mod schema;
mod scripted;
pub mod templates;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use embedding::{normalize_text, EmbeddingError, EmbeddingVector, HashEmbedder};
pub use http::{HttpBackend, HttpBackendConfig};
pub use schema::{string_list, Field, FieldKind, Schema, SchemaRef, SchemaRegistry};
pub use scripted::{ScriptEntry, ScriptFile, ScriptedBackend};

/// Total attempts for a structured completion (first try plus corrections).
pub const STRUCTURED_ATTEMPTS: u32 = 3;

/// Transport retries performed by the live backend before giving up.
pub const TRANSPORT_RETRIES: u32 = 3;

pub const SYSTEM_INSTRUCTION: &str = "You are a helpful assistant.";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("no script entry for key {key:?}")]
    NoScript { key: String },

    #[error("response did not satisfy schema {schema} after {} attempts", raw_outputs.len())]
    SchemaViolation { schema: String, raw_outputs: Vec<String> },

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("unknown schema {0}")]
    UnknownSchema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub schema: Option<SchemaRef>,
    pub temperature: f64,
    pub seed: u64,
    /// Routing key for scripted backends; ignored by live backends.
    pub script_key: Option<String>,
}

impl ChatRequest {
    /// A request with the standard system instruction followed by `user`.
    pub fn new(user: impl Into<String>) -> Self {
        Self::from_messages(vec![Message::system(SYSTEM_INSTRUCTION), Message::user(user)])
    }

    pub fn from_messages(messages: Vec<Message>) -> Self {
        Self { messages, schema: None, temperature: 0.0, seed: 0, script_key: None }
    }

    pub fn with_script_key(mut self, key: impl Into<String>) -> Self {
        self.script_key = Some(key.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_schema(mut self, schema: SchemaRef) -> Self {
        self.schema = Some(schema);
        self.temperature = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first =
            self.messages.first().ok_or_else(|| GatewayError::InvalidRequest("messages must not be empty".into()))?;
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest("first message must be system or user".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.schema.is_some() && self.temperature != 0.0 {
            return Err(GatewayError::InvalidRequest("structured requests must use temperature 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over the role-tagged message sequence.
    pub fn message_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            let tag: &[u8] = match m.role {
                Role::System => b"s",
                Role::User => b"u",
                Role::Assistant => b"a",
            };
            hasher.update(tag);
            hasher.update((m.content.len() as u64).to_le_bytes());
            hasher.update(m.content.as_bytes());
        }
        hasher.finalize().into()
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub parsed: Option<Value>,
    pub attempts: u32,
    pub backend_id: String,
}

/// A source of completions and embeddings.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Raw embedding; the gateway normalizes it.
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Spaces out backend calls by a minimum interval.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_second(requests: f64) -> Self {
        Self { min_interval: Duration::from_secs_f64(1.0 / requests.max(1e-9)), next_slot: Mutex::new(None) }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let start = match *slot {
                Some(t) if t > now => t,
                _ => now,
            };
            *slot = Some(start + self.min_interval);
            start.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    chat_calls: AtomicU64,
    embed_calls: AtomicU64,
}

/// Front door for every model call in the system. Cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    schemas: Arc<SchemaRegistry>,
    limiter: Option<Arc<RateLimiter>>,
    counters: Arc<Counters>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("backend", &self.backend.id()).field("chat_calls", &self.chat_calls()).finish()
    }
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            schemas: Arc::new(SchemaRegistry::builtin()),
            limiter: None,
            counters: Arc::new(Counters::default()),
        }
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        self.limiter = Some(Arc::new(RateLimiter::per_second(requests_per_second)));
        self
    }

    pub fn with_schemas(mut self, schemas: SchemaRegistry) -> Self {
        self.schemas = Arc::new(schemas);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Number of chat calls that reached the backend.
    pub fn chat_calls(&self) -> u64 {
        self.counters.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> u64 {
        self.counters.embed_calls.load(Ordering::SeqCst)
    }

    fn call_backend(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        self.counters.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.backend.chat(req)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        if req.schema.is_some() {
            return self.run_structured(req.clone());
        }
        let text = self.call_backend(req)?;
        Ok(ChatResponse { text, parsed: None, attempts: 1, backend_id: self.backend.id().to_string() })
    }

    /// Completion whose output must parse as JSON and satisfy `schema`.
    ///
    /// Malformed output is echoed back with a correction message, for at most
    /// [`STRUCTURED_ATTEMPTS`] attempts in total.
    pub fn complete_structured(&self, req: &ChatRequest, schema: SchemaRef) -> Result<ChatResponse, GatewayError> {
        let req = req.clone().with_schema(schema);
        req.validate()?;
        self.run_structured(req)
    }

    fn run_structured(&self, mut req: ChatRequest) -> Result<ChatResponse, GatewayError> {
        let schema_ref = req.schema.expect("structured request carries a schema");
        let schema =
            self.schemas.get(schema_ref).ok_or_else(|| GatewayError::UnknownSchema(schema_ref.name().to_string()))?;

        let mut raw_outputs = Vec::with_capacity(STRUCTURED_ATTEMPTS as usize);
        for attempt in 1..=STRUCTURED_ATTEMPTS {
            let text = self.call_backend(&req)?;
            match schema.parse(&text) {
                Ok(parsed) => {
                    return Ok(ChatResponse {
                        text,
                        parsed: Some(parsed),
                        attempts: attempt,
                        backend_id: self.backend.id().to_string(),
                    });
                }
                Err(problem) => {
                    log::debug!("schema {} attempt {attempt} rejected: {problem}", schema.name);
                    req.messages.push(Message::assistant(text.clone()));
                    req.messages.push(Message::user(correction_prompt(schema, &problem)));
                    raw_outputs.push(text);
                }
            }
        }
        Err(GatewayError::SchemaViolation { schema: schema.name.to_string(), raw_outputs })
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        self.counters.embed_calls.fetch_add(1, Ordering::SeqCst);
        let raw = self.backend.embed(text)?;
        EmbeddingVector::from_raw(raw).map_err(|e| GatewayError::Transport { attempts: 1, message: e.to_string() })
    }
}

pub const CORRECTION_MARKER: &str = "Your previous reply could not be used";

fn correction_prompt(schema: &Schema, problem: &str) -> String {
    format!("{CORRECTION_MARKER} ({problem}). Reply again with only a JSON object of the form {}.", schema.format_hint)
}

/// Backend built from a closure; embeddings come from a [`HashEmbedder`].
pub struct FnBackend<F> {
    id: String,
    handler: F,
    embedder: HashEmbedder,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, handler: F) -> Self {
        Self { id: id.into(), handler, embedder: HashEmbedder::default() }
    }

    pub fn with_embedder(mut self, embedder: HashEmbedder) -> Self {
        self.embedder = embedder;
        self
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        (self.handler)(request)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        Ok(self.embedder.embed(text))
    }
}
