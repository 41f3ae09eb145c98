//! Chat-completion and embedding backends.
//!
//! [`RemoteProvider`] speaks the common `/chat/completions` + `/embeddings`
//! JSON protocol with retries and a shared requests-per-minute limiter.
//! [`MockProvider`] is a pure function of (request text, seed) that emits
//! well-formed phase documents, used for every desk-scale run and test.

mod mock;
mod ratelimit;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{mock_complete, mock_embedding, MockProvider, MOCK_EMBEDDING_DIM, MOCK_MODEL};
pub use ratelimit::{Clock, RateLimiter, SystemClock, VirtualClock};
pub use remote::{
    BackoffPolicy, HttpReply, HttpTransport, RemoteProvider, ReqwestTransport, TransportError,
};

pub const DEFAULT_API_KEY_ENV: &str = "REVIEW_SIM_API_KEY";
pub const BASE_URL_ENV: &str = "REVIEW_SIM_BASE_URL";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("content filtered for request {tag}")]
    ContentFiltered { tag: String },
    #[error("request timed out")]
    Timeout,
    #[error("backend unavailable (status {0})")]
    Unavailable(u16),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock backend cannot recognize the prompt shape")]
    UnrecognizedPromptShape,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ProviderError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::RateLimited | ProviderError::Timeout | ProviderError::Unavailable(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Phase/paper/reviewer label for logs and errors.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            turns: vec![Turn {
                role: TurnRole::User,
                content: user.into(),
            }],
            temperature: 0.7,
            max_tokens: 2048,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        match self.turns.last() {
            None => Err(ProviderError::InvalidRequest("no turns".into())),
            Some(t) if t.role != TurnRole::User => {
                Err(ProviderError::InvalidRequest("last turn must be from the user".into()))
            }
            _ if self.temperature < 0.0 => Err(ProviderError::InvalidRequest("negative temperature".into())),
            _ if self.max_tokens == 0 => Err(ProviderError::InvalidRequest("max_tokens must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Appends a failed answer and a correction request.
    pub fn with_retry_turns(&self, previous_answer: &str, correction: &str) -> Self {
        let mut next = self.clone();
        next.turns.push(Turn {
            role: TurnRole::Assistant,
            content: previous_answer.to_string(),
        });
        next.turns.push(Turn {
            role: TurnRole::User,
            content: correction.to_string(),
        });
        next
    }

    /// First user turn: the rendered phase prompt.
    pub fn prompt(&self) -> &str {
        self.turns
            .iter()
            .find(|t| t.role == TurnRole::User)
            .map(|t| t.content.as_str())
            .unwrap_or_default()
    }

    /// System prompt and all turns, as captured on disk.
    pub fn transcript(&self) -> String {
        let mut out = format!("[system]\n{}\n", self.system);
        for t in &self.turns {
            let role = match t.role {
                TurnRole::User => "user",
                TurnRole::Assistant => "assistant",
            };
            out.push_str(&format!("\n[{role}]\n{}\n", t.content));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Which backend and model produced a run's artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIdentity {
    pub backend: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model_name: String,
    pub embedding_model: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub requests_per_minute: u32,
    pub timeout_seconds: f64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4-1106-preview".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_retries: 5,
            requests_per_minute: 60,
            timeout_seconds: 120.0,
            temperature: 0.7,
            max_tokens: 2048,
        }
    }
}

impl ProviderConfig {
    /// Defaults with `REVIEW_SIM_BASE_URL` applied when set.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.trim().is_empty() {
                cfg.base_url = url.trim().trim_end_matches('/').to_string();
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.requests_per_minute < 1 {
            return Err(ProviderError::InvalidRequest("requests_per_minute must be >= 1".into()));
        }
        if self.max_retries > 10 {
            return Err(ProviderError::InvalidRequest("max_retries must be <= 10".into()));
        }
        if !(self.timeout_seconds > 0.0) {
            return Err(ProviderError::InvalidRequest("timeout_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit Euclidean norm. A zero vector is rejected.
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(ProviderError::Protocol("embedding has zero or non-finite norm".into()));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity, clamped to [-1, 1].
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot.clamp(-1.0, 1.0)
    }
}

/// A backend shared by concurrent pipeline workers.
pub trait ChatProvider: Send + Sync {
    fn identity(&self) -> ProviderIdentity;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for &P {
    fn identity(&self) -> ProviderIdentity {
        (**self).identity()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn identity(&self) -> ProviderIdentity {
        (**self).identity()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).complete(request)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed(texts)
    }
}
