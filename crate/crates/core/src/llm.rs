//! Chat-completion backends.
//!
//! [`LlmClient`] wraps any [`ChatBackend`] with the input budget check, retry
//! with exponential backoff on transport failures, an in-flight cap, and event
//! logging. Two backends ship: [`HttpBackend`] for OpenAI-style endpoints and
//! [`MockBackend`], which replays a script of canned replies.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::store::{emit, EventKind, EventSink, NullSink};

/// Opening tag the synthesis prompt asks the model to wrap its answer in.
pub const OUTPUT_TAG: &str = "output_api_implementations";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("input of ~{estimated} tokens exceeds the budget of {budget}")]
    BudgetExceeded { estimated: usize, budget: usize },
    #[error("backend refused: {0}")]
    BackendRefusal(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("bad request: {0}")]
    InvalidRequest(String),
    #[error("mock script: {0}")]
    Script(String),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            max_input_tokens: 32_000,
            max_output_tokens: 8_000,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Rough token count: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Synthesis,
    ApoEdit,
    Critique,
    OracleGen,
    QualityEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
    pub purpose: Purpose,
}

impl ChatRequest {
    pub fn new(purpose: Purpose, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            params: GenerationParams::default(),
            purpose,
        }
    }

    pub fn user(purpose: Purpose, content: impl Into<String>) -> Self {
        Self::new(purpose, vec![ChatMessage::user(content)])
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn estimated_input_tokens(&self) -> usize {
        self.messages.iter().map(|m| estimate_tokens(&m.content)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;

    /// One completion attempt, no retries.
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 1_000,
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self {
            max_retries,
            initial_backoff_ms: 0,
            multiplier: 2,
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = u64::from(self.multiplier).saturating_pow(retry);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor))
    }
}

/// Backend plus the policies shared by every call through it.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    permits: Arc<Semaphore>,
    sink: Arc<dyn EventSink>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            permits: Arc::new(Semaphore::new(8)),
            sink: Arc::new(NullSink),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.permits = Arc::new(Semaphore::new(n.max(1)));
        self
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = sink;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::InvalidRequest("request has no messages".into()));
        }
        request.params.validate()?;
        let estimated = request.estimated_input_tokens();
        if estimated > request.params.max_input_tokens {
            return Err(LlmError::BudgetExceeded {
                estimated,
                budget: request.params.max_input_tokens,
            });
        }

        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| LlmError::Transport(e.to_string()))?;

        let mut attempt = 0u32;
        let result = loop {
            match self.backend.complete(request).await {
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let wait = self.retry.backoff(attempt);
                    tracing::debug!("{} attempt {} failed: {e}; retrying in {wait:?}", self.backend.id(), attempt + 1);
                    attempt += 1;
                    tokio::time::sleep(wait).await;
                }
                other => break other,
            }
        };

        let mut response = match result {
            Ok(r) => r,
            Err(e) => {
                emit(
                    self.sink.as_ref(),
                    EventKind::LlmCall,
                    json!({
                        "backend": self.backend.id(),
                        "purpose": request.purpose,
                        "attempts": attempt + 1,
                        "error": e.to_string(),
                    }),
                );
                return Err(e);
            }
        };
        if response.content.trim().is_empty() {
            return Err(LlmError::BackendRefusal("empty completion".into()));
        }
        let max_chars = request.params.max_output_tokens.saturating_mul(4);
        if response.content.chars().count() > max_chars {
            tracing::warn!("completion exceeds output budget; truncating to {max_chars} chars");
            response.content = response.content.chars().take(max_chars).collect();
        }

        let prompt_hash = self
            .sink
            .put_blob(request.transcript().as_bytes())
            .unwrap_or_default();
        let reply_hash = self
            .sink
            .put_blob(response.content.as_bytes())
            .unwrap_or_default();
        emit(
            self.sink.as_ref(),
            EventKind::LlmCall,
            json!({
                "backend": response.backend_id,
                "purpose": request.purpose,
                "attempts": attempt + 1,
                "prompt_blob": prompt_hash,
                "reply_blob": reply_hash,
                "latency_ms": response.latency_ms,
            }),
        );
        Ok(response)
    }

    /// Convenience for single-user-message calls.
    pub async fn ask(
        &self,
        purpose: Purpose,
        prompt: impl Into<String>,
        params: &GenerationParams,
    ) -> Result<String, LlmError> {
        let req = ChatRequest::user(purpose, prompt).with_params(params.clone());
        Ok(self.complete(&req).await?.content)
    }
}

// ---------------------------------------------------------------------------
// Mock backend

/// One scripted rule. `purpose` and every `contains` substring must match the
/// request; `reply` (or the n-th of `replies` on the n-th hit, the last one
/// repeating) is returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match", default)]
    pub matcher: ScriptMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<Purpose>,
    #[serde(default, skip_serializing_if = "Needles::is_empty")]
    pub contains: Needles,
}

/// A single substring or a list that must all be present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Needles {
    #[default]
    None,
    One(String),
    All(Vec<String>),
}

impl Needles {
    fn is_empty(&self) -> bool {
        matches!(self, Needles::None)
    }

    fn matches(&self, haystack: &str) -> bool {
        match self {
            Needles::None => true,
            Needles::One(s) => haystack.contains(s.as_str()),
            Needles::All(v) => v.iter().all(|s| haystack.contains(s.as_str())),
        }
    }
}

impl ScriptEntry {
    pub fn new(purpose: Option<Purpose>, contains: &[&str], reply: impl Into<String>) -> Self {
        let contains = match contains {
            [] => Needles::None,
            [one] => Needles::One(one.to_string()),
            many => Needles::All(many.iter().map(|s| s.to_string()).collect()),
        };
        Self {
            matcher: ScriptMatch { purpose, contains },
            reply: Some(reply.into()),
            replies: Vec::new(),
        }
    }

    pub fn sequence(purpose: Option<Purpose>, contains: &[&str], replies: Vec<String>) -> Self {
        let mut e = Self::new(purpose, contains, "");
        e.reply = None;
        e.replies = replies;
        e
    }

    fn matches(&self, request: &ChatRequest, transcript: &str) -> bool {
        self.matcher.purpose.is_none_or(|p| p == request.purpose)
            && self.matcher.contains.matches(transcript)
    }

    fn reply_for_hit(&self, hit: usize) -> Option<&str> {
        if !self.replies.is_empty() {
            let i = hit.min(self.replies.len() - 1);
            return Some(self.replies[i].as_str());
        }
        self.reply.as_deref()
    }
}

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    entries: Vec<ScriptEntry>,
    hits: Mutex<Vec<usize>>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, LlmError> {
        for (i, e) in entries.iter().enumerate() {
            if e.reply.is_none() && e.replies.is_empty() {
                return Err(LlmError::Script(format!("entry {i} has no reply")));
            }
        }
        Ok(Self {
            id: "mock".into(),
            hits: Mutex::new(vec![0; entries.len()]),
            entries,
            calls: AtomicU64::new(0),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn parse(json_text: &str) -> Result<Self, LlmError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(json_text).map_err(|e| LlmError::Script(e.to_string()))?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::parse(&text)?.with_id(format!("mock:{}", path.display())))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let transcript = request.transcript();
        let reply = {
            let mut hits = self.hits.lock().unwrap();
            let idx = self
                .entries
                .iter()
                .position(|e| e.matches(request, &transcript));
            match idx {
                Some(i) => {
                    let hit = hits[i];
                    hits[i] += 1;
                    self.entries[i].reply_for_hit(hit).map(str::to_string)
                }
                None => None,
            }
        };
        let content = reply.ok_or_else(|| {
            LlmError::BackendRefusal(format!(
                "no scripted reply for purpose {:?}",
                request.purpose
            ))
        })?;
        Ok(ChatResponse {
            token_usage: Some(TokenUsage {
                input: request.estimated_input_tokens(),
                output: estimate_tokens(&content),
            }),
            content,
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_http_timeout")]
    pub timeout_secs: u64,
}

fn default_http_timeout() -> u64 {
    300
}

impl HttpBackendConfig {
    /// Reads `APRIL_LLM_URL`, `APRIL_LLM_KEY` and `APRIL_LLM_MODEL`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("APRIL_LLM_URL").ok()?;
        Some(Self {
            url,
            model: std::env::var("APRIL_LLM_MODEL").unwrap_or_else(|_| "default".into()),
            api_key: std::env::var("APRIL_LLM_KEY").ok(),
            timeout_secs: default_http_timeout(),
        })
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, LlmError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

#[async_trait]
impl ChatBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = WireRequest {
            model: &self.config.model,
            messages: &request.messages,
            temperature: request.params.temperature,
            top_p: request.params.top_p,
            max_tokens: request.params.max_output_tokens,
            seed: request.params.seed,
        };
        let start = Instant::now();
        let mut req = self.client.post(&self.config.url).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .await
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if matches!(status, 408 | 429 | 500..=599) {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body: text });
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| LlmError::Transport(format!("malformed response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::BackendRefusal("no content in response".into()))?;
        Ok(ChatResponse {
            content,
            backend_id: self.id(),
            latency_ms: start.elapsed().as_millis() as u64,
            token_usage: parsed.usage.map(|u| TokenUsage {
                input: u.prompt_tokens,
                output: u.completion_tokens,
            }),
        })
    }
}

// ---------------------------------------------------------------------------
// Tagged output

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("no <{0}> ... </{0}> pair found")]
    MissingTag(String),
    #[error("<{0}> encloses only whitespace")]
    EmptyPayload(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub payload: String,
    /// Number of further complete tag pairs after the one returned.
    pub extra_pairs: usize,
}

/// Payload of the first `<tag ...>...</tag>` pair, trimmed. The opening tag
/// may carry attributes.
pub fn extract_tag(content: &str, tag: &str) -> Result<Extracted, TagError> {
    let pairs = tag_pairs(content, tag);
    let Some((_, first)) = pairs.first() else {
        return Err(TagError::MissingTag(tag.to_string()));
    };
    let payload = first.trim();
    if payload.is_empty() {
        return Err(TagError::EmptyPayload(tag.to_string()));
    }
    Ok(Extracted {
        payload: payload.to_string(),
        extra_pairs: pairs.len() - 1,
    })
}

/// All complete `<tag attrs>body</tag>` pairs in order, as (attributes, body).
pub fn tag_pairs<'a>(content: &'a str, tag: &str) -> Vec<(&'a str, &'a str)> {
    let open_prefix = format!("<{tag}");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = content;
    while let Some(start) = rest.find(&open_prefix) {
        let after = &rest[start + open_prefix.len()..];
        // `<tagname_longer` is a different tag
        match after.chars().next() {
            Some('>') | Some(' ') | Some('\t') | Some('\n') => {}
            _ => {
                rest = after;
                continue;
            }
        }
        let Some(gt) = after.find('>') else { break };
        let attrs = after[..gt].trim();
        let body_start = &after[gt + 1..];
        let Some(end) = body_start.find(&close) else { break };
        out.push((attrs, &body_start[..end]));
        rest = &body_start[end + close.len()..];
    }
    out
}

/// Reads `name="value"` from a tag's attribute text.
pub fn tag_attribute(attrs: &str, name: &str) -> Option<String> {
    let key = format!("{name}=\"");
    let start = attrs.find(&key)? + key.len();
    let end = attrs[start..].find('"')?;
    Some(attrs[start..start + end].to_string())
}

pub fn extract_tagged_output(content: &str) -> Result<String, TagError> {
    let extracted = extract_tag(content, OUTPUT_TAG)?;
    if extracted.extra_pairs > 0 {
        tracing::warn!(
            "completion has {} extra <{OUTPUT_TAG}> pairs; using the first",
            extracted.extra_pairs
        );
    }
    Ok(extracted.payload)
}

pub fn wrap_in_tags(payload: &str) -> String {
    format!("<{OUTPUT_TAG}>{payload}</{OUTPUT_TAG}>")
}
