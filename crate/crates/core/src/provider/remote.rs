use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::ratelimit::{Clock, RateLimiter, SystemClock};
use super::{
    ChatProvider, ChatRequest, ChatResponse, EmbeddingVector, ProviderConfig, ProviderError,
    ProviderIdentity, TurnRole,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

/// Minimal blocking HTTP surface the remote provider needs.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &[u8],
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ProviderError::Protocol(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &[u8],
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let response = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .header("content-type", "application/json")
            .timeout(timeout)
            .body(body.to_vec())
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Connect(e.to_string())
                }
            })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        Ok(HttpReply { status, body })
    }
}

/// Exponential backoff with additive jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackoffPolicy {
    pub base: Duration,
    pub max: Duration,
    /// Jitter is uniform in `[0, jitter_fraction * delay)`.
    pub jitter_fraction: f64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(500),
            max: Duration::from_secs(30),
            jitter_fraction: 0.5,
        }
    }
}

impl BackoffPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base.saturating_mul(1u32 << attempt.min(16)).min(self.max);
        let jitter = if self.jitter_fraction > 0.0 {
            rand::thread_rng().gen_range(0.0..self.jitter_fraction) * exp.as_secs_f64()
        } else {
            0.0
        };
        exp + Duration::from_secs_f64(jitter)
    }
}

/// Client for servers implementing the `/chat/completions` JSON shape.
pub struct RemoteProvider {
    config: ProviderConfig,
    api_key: String,
    transport: Box<dyn HttpTransport>,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    backoff: BackoffPolicy,
    retries: AtomicU64,
}

impl RemoteProvider {
    /// Reads the API key from the configured environment variable; fails
    /// with [`ProviderError::Auth`] before any network activity if it is
    /// unset.
    pub fn from_env(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                ProviderError::Auth(format!("environment variable {} is not set", config.api_key_env))
            })?;
        let transport = ReqwestTransport::new()?;
        Ok(Self::with_transport(
            config,
            api_key,
            Box::new(transport),
            Arc::new(SystemClock::default()),
            BackoffPolicy::default(),
        ))
    }

    pub fn with_transport(
        config: ProviderConfig,
        api_key: String,
        transport: Box<dyn HttpTransport>,
        clock: Arc<dyn Clock>,
        backoff: BackoffPolicy,
    ) -> Self {
        let limiter = RateLimiter::per_minute(config.requests_per_minute, clock.clone());
        Self {
            config,
            api_key,
            transport,
            limiter,
            clock,
            backoff,
            retries: AtomicU64::new(0),
        }
    }

    /// Total retries performed so far across all callers.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn send_with_retry(&self, url: &str, body: &[u8], tag: &str) -> Result<Value, ProviderError> {
        let timeout = Duration::from_secs_f64(self.config.timeout_seconds);
        let mut attempt = 0u32;
        loop {
            self.limiter.acquire();
            let outcome = self
                .transport
                .post_json(url, &self.api_key, body, timeout)
                .map_err(|e| match e {
                    TransportError::Timeout => ProviderError::Timeout,
                    TransportError::Connect(msg) => {
                        log::debug!("{tag}: connection error: {msg}");
                        ProviderError::Unavailable(0)
                    }
                })
                .and_then(|reply| classify_reply(reply, tag));
            match outcome {
                Ok(v) => {
                    if attempt > 0 {
                        log::info!("{tag}: succeeded after {attempt} retries");
                    }
                    return Ok(v);
                }
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let delay = self.backoff.delay(attempt);
                    attempt += 1;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    log::warn!("{tag}: {e}; retry {attempt}/{} in {delay:?}", self.config.max_retries);
                    self.clock.sleep(delay);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn classify_reply(reply: HttpReply, tag: &str) -> Result<Value, ProviderError> {
    let body_mentions_filter = reply.body.contains("content_filter") || reply.body.contains("content_policy");
    match reply.status {
        200..=299 => serde_json::from_str(&reply.body)
            .map_err(|e| ProviderError::Protocol(format!("invalid JSON response: {e}"))),
        401 | 403 => Err(ProviderError::Auth(format!("status {}", reply.status))),
        429 => Err(ProviderError::RateLimited),
        408 | 504 => Err(ProviderError::Timeout),
        400 if body_mentions_filter => Err(ProviderError::ContentFiltered { tag: tag.to_string() }),
        500..=599 => Err(ProviderError::Unavailable(reply.status)),
        s => Err(ProviderError::Protocol(format!("unexpected status {s}: {}", truncate(&reply.body, 200)))),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// JSON body for a chat completion.
pub fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let mut messages = Vec::with_capacity(request.turns.len() + 1);
    if !request.system.is_empty() {
        messages.push(json!({"role": "system", "content": request.system}));
    }
    for t in &request.turns {
        let role = match t.role {
            TurnRole::User => "user",
            TurnRole::Assistant => "assistant",
        };
        messages.push(json!({"role": role, "content": t.content}));
    }
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

impl ChatProvider for RemoteProvider {
    fn identity(&self) -> ProviderIdentity {
        ProviderIdentity {
            backend: "remote".into(),
            model: self.config.model_name.clone(),
        }
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let mut request = request.clone();
        request.temperature = self.config.temperature;
        request.max_tokens = self.config.max_tokens;
        let body = serde_json::to_vec(&chat_body(&self.config.model_name, &request))
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let value = self.send_with_retry(&self.url("chat/completions"), &body, &request.tag)?;
        let choice = value
            .pointer("/choices/0")
            .ok_or_else(|| ProviderError::Protocol("response has no choices".into()))?;
        if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
            return Err(ProviderError::ContentFiltered { tag: request.tag.clone() });
        }
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| ProviderError::Protocol("response has no message content".into()))?;
        let usage = |k: &str| value.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(ChatResponse {
            text: text.to_string(),
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("no texts to embed".into()));
        }
        let body = serde_json::to_vec(&json!({"model": self.config.embedding_model, "input": texts}))
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let value = self.send_with_retry(&self.url("embeddings"), &body, "embeddings")?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Protocol("embedding response has no data".into()))?;
        if data.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let index = item.get("index").and_then(Value::as_u64).map(|x| x as usize).unwrap_or(i);
                let values = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ProviderError::Protocol("embedding item without vector".into()))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| ProviderError::Protocol("non-numeric embedding".into())))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((index, values))
            })
            .collect::<Result<_, ProviderError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        rows.into_iter().map(|(_, v)| EmbeddingVector::new(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::VirtualClock;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<HttpReply, TransportError>>>,
        calls: AtomicU64,
        bodies: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<HttpReply, TransportError>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                calls: AtomicU64::new(0),
                bodies: Mutex::new(Vec::new()),
            }
        }
    }

    impl HttpTransport for Arc<Scripted> {
        fn post_json(&self, _url: &str, bearer: &str, body: &[u8], _t: Duration) -> Result<HttpReply, TransportError> {
            assert_eq!(bearer, "k");
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.bodies.lock().unwrap().push(String::from_utf8(body.to_vec()).unwrap());
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn ok_reply(text: &str) -> Result<HttpReply, TransportError> {
        Ok(HttpReply {
            status: 200,
            body: json!({
                "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                "usage": {"prompt_tokens": 11, "completion_tokens": 7}
            })
            .to_string(),
        })
    }

    fn status(code: u16) -> Result<HttpReply, TransportError> {
        Ok(HttpReply { status: code, body: "{}".into() })
    }

    fn provider(script: Arc<Scripted>, clock: Arc<VirtualClock>) -> RemoteProvider {
        let config = ProviderConfig { max_retries: 3, ..ProviderConfig::default() };
        RemoteProvider::with_transport(config, "k".into(), Box::new(script), clock, BackoffPolicy::default())
    }

    #[test]
    fn retries_429_then_succeeds() {
        let script = Arc::new(Scripted::new(vec![status(429), status(429), ok_reply("hello")]));
        let clock = Arc::new(VirtualClock::new());
        let p = provider(script.clone(), clock.clone());
        let r = p.complete(&ChatRequest::new("s", "u", "tag")).unwrap();
        assert_eq!(r.text, "hello");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (11, 7));
        assert_eq!(p.retry_count(), 2);
        assert_eq!(script.calls.load(Ordering::SeqCst), 3);
        let sleeps = clock.sleeps();
        assert_eq!(sleeps.len(), 2);
        assert!(sleeps[0] >= Duration::from_millis(500) && sleeps[0] < Duration::from_millis(750));
        assert!(sleeps[1] >= Duration::from_millis(1000) && sleeps[1] < Duration::from_millis(1500));
    }

    #[test]
    fn non_retryable_errors_are_not_resubmitted() {
        for (reply, expected) in [
            (status(401), ProviderError::Auth("status 401".into())),
            (
                Ok(HttpReply { status: 400, body: r#"{"error":{"code":"content_filter"}}"#.into() }),
                ProviderError::ContentFiltered { tag: "tag".into() },
            ),
        ] {
            let script = Arc::new(Scripted::new(vec![reply]));
            let p = provider(script.clone(), Arc::new(VirtualClock::new()));
            assert_eq!(p.complete(&ChatRequest::new("s", "u", "tag")), Err(expected));
            assert_eq!(script.calls.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn gives_up_after_max_retries() {
        let script = Arc::new(Scripted::new(vec![Err(TransportError::Timeout); 4]));
        let p = provider(script.clone(), Arc::new(VirtualClock::new()));
        assert_eq!(p.complete(&ChatRequest::new("s", "u", "t")), Err(ProviderError::Timeout));
        assert_eq!(script.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn filtered_finish_reason() {
        let body = json!({"choices": [{"message": {"content": "x"}, "finish_reason": "content_filter"}]}).to_string();
        let script = Arc::new(Scripted::new(vec![Ok(HttpReply { status: 200, body })]));
        let p = provider(script, Arc::new(VirtualClock::new()));
        assert_eq!(
            p.complete(&ChatRequest::new("s", "u", "p1/phase1/r2")),
            Err(ProviderError::ContentFiltered { tag: "p1/phase1/r2".into() })
        );
    }

    #[test]
    fn wire_body_shape() {
        let script = Arc::new(Scripted::new(vec![ok_reply("x")]));
        let p = provider(script.clone(), Arc::new(VirtualClock::new()));
        p.complete(&ChatRequest::new("sys", "hello", "t")).unwrap();
        let body: Value = serde_json::from_str(&script.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "gpt-4-1106-preview");
        assert_eq!(body["messages"][0], json!({"role": "system", "content": "sys"}));
        assert_eq!(body["messages"][1], json!({"role": "user", "content": "hello"}));
        assert_eq!(body["max_tokens"], 2048);
    }

    #[test]
    fn missing_key_fails_before_network() {
        let config = ProviderConfig {
            api_key_env: "REVIEW_SIM_TEST_KEY_THAT_IS_NEVER_SET".into(),
            ..ProviderConfig::default()
        };
        assert!(matches!(RemoteProvider::from_env(config), Err(ProviderError::Auth(_))));
    }

    #[test]
    fn embeddings_are_reordered_and_normalized() {
        let body = json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 4.0]}
        ]})
        .to_string();
        let script = Arc::new(Scripted::new(vec![Ok(HttpReply { status: 200, body })]));
        let p = provider(script, Arc::new(VirtualClock::new()));
        let v = p.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v[0].values(), &[0.6, 0.8]);
        assert_eq!(v[1].values(), &[0.0, 1.0]);
    }
}
