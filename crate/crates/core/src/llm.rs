//! Chat-completion gateway with a live HTTP backend, a record/replay cache, and a
//! scripted backend for tests.
//!
//! Every request is reduced to a [`CacheKey`]: the SHA-256 of a canonical JSON form with
//! sorted fields and normalised line endings. Exchanges are stored one file per key under
//! `<cache>/<first two hex digits>/<digest>.json`, so a replayed run sees exactly the
//! responses a recorded run saw.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_BASE_URL: &str = "CHARTFORGE_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "CHARTFORGE_LLM_API_KEY";

pub const DEFAULT_MODEL: &str = "gpt-4";
pub const GENERATION_TEMPERATURE: f64 = 0.7;
pub const EVALUATION_TEMPERATURE: f64 = 0.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: GENERATION_TEMPERATURE,
            max_tokens: 2048,
            model_id: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_text.trim().is_empty() {
            return Err(Error::invalid("chat request has empty user text"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::invalid(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be positive"));
        }
        Ok(())
    }
}

/// Hex SHA-256 digest of a canonicalised [`ChatRequest`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn shard(&self) -> &str {
        &self.0[..2]
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn normalize_text(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    unified.trim_end_matches('\n').to_string()
}

/// Canonical JSON form of a request: keys sorted, line endings normalised to `\n`,
/// trailing newlines dropped.
pub fn canonical_form(request: &ChatRequest) -> String {
    let mut fields = BTreeMap::new();
    fields.insert("max_tokens", serde_json::json!(request.max_tokens));
    fields.insert("model_id", serde_json::json!(request.model_id));
    fields.insert("system_text", serde_json::json!(normalize_text(&request.system_text)));
    fields.insert("temperature", serde_json::json!(request.temperature));
    fields.insert("user_text", serde_json::json!(normalize_text(&request.user_text)));
    serde_json::to_string(&fields).expect("canonical request serialises")
}

pub fn cache_key(request: &ChatRequest) -> CacheKey {
    let digest = Sha256::digest(canonical_form(request).as_bytes());
    CacheKey(hex::encode(digest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
    Scripted,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Live => "live",
            BackendKind::Replay => "replay",
            BackendKind::Scripted => "scripted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub response_text: String,
    pub backend: BackendKind,
    pub cache_key: CacheKey,
}

/// On-disk store of recorded exchanges.
#[derive(Clone, Debug)]
pub struct ReplayCache {
    root: PathBuf,
}

impl ReplayCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ReplayCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(key.shard()).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<ChatExchange>> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Store an exchange. The first write for a key wins; later writes for the same key
    /// leave the stored file untouched.
    pub fn put(&self, exchange: &ChatExchange) -> Result<()> {
        let path = self.path_for(&exchange.cache_key);
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("cache path has a shard directory");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, exchange)?;
        tmp.write_all(b"\n")?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(()),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(e.error.into()),
        }
    }

    /// Number of stored exchanges.
    pub fn len(&self) -> Result<usize> {
        let mut n = 0;
        if !self.root.exists() {
            return Ok(0);
        }
        for shard in fs::read_dir(&self.root)? {
            let shard = shard?;
            if shard.file_type()?.is_dir() {
                n += fs::read_dir(shard.path())?
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count();
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

/// Source of canned responses for the scripted backend.
pub trait Responder: Send {
    fn respond(&mut self, request: &ChatRequest) -> Result<String>;
}

impl<F> Responder for F
where
    F: FnMut(&ChatRequest) -> Result<String> + Send,
{
    fn respond(&mut self, request: &ChatRequest) -> Result<String> {
        self(request)
    }
}

/// Returns queued responses in order; an exhausted queue is a backend error.
#[derive(Debug, Default)]
pub struct ScriptQueue {
    responses: VecDeque<Result<String, String>>,
}

impl ScriptQueue {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptQueue {
            responses: responses.into_iter().map(|s| Ok(s.into())).collect(),
        }
    }

    pub fn push(&mut self, response: impl Into<String>) {
        self.responses.push_back(Ok(response.into()));
    }

    /// Queue a simulated backend failure.
    pub fn push_failure(&mut self, message: impl Into<String>) {
        self.responses.push_back(Err(message.into()));
    }
}

impl Responder for ScriptQueue {
    fn respond(&mut self, _request: &ChatRequest) -> Result<String> {
        match self.responses.pop_front() {
            Some(Ok(text)) => Ok(text),
            Some(Err(message)) => Err(Error::Backend { status: None, message }),
            None => Err(Error::Backend {
                status: None,
                message: "scripted responses exhausted".into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

/// Token bucket limiting live calls to a number of requests per minute.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let capacity = requests.max(1) as f64;
        RateLimiter {
            capacity,
            refill_per_sec: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until a token is available, then take it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.refill_per_sec).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.refill_per_sec
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug)]
pub struct LiveClient {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl LiveClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        LiveClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build(),
        }
    }

    /// Read base URL and key from the environment.
    pub fn from_env() -> Result<Self> {
        let key = std::env::var(ENV_API_KEY)
            .map_err(|_| Error::config(format!("live backend requires {ENV_API_KEY}")))?;
        let base = std::env::var(ENV_BASE_URL).unwrap_or_else(|_| "https://api.openai.com/v1".to_string());
        Ok(LiveClient::new(base, key))
    }

    fn call(&self, request: &ChatRequest) -> std::result::Result<String, CallError> {
        let body = serde_json::json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
        });
        let url = format!("{}/chat/completions", self.base_url);
        let response = self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        match response {
            Ok(resp) => {
                let value: serde_json::Value = resp
                    .into_json()
                    .map_err(|e| CallError::Fatal(None, format!("unreadable response body: {e}")))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| CallError::Fatal(None, "response has no choices[0].message.content".into()))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let retry_after = resp
                    .header("Retry-After")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .map(Duration::from_secs_f64);
                let text = resp.into_string().unwrap_or_default();
                if code == 429 || code >= 500 {
                    Err(CallError::Retryable(Some(code), text, retry_after))
                } else {
                    Err(CallError::Fatal(Some(code), text))
                }
            }
            Err(e) => Err(CallError::Retryable(None, e.to_string(), None)),
        }
    }
}

enum CallError {
    Retryable(Option<u16>, String, Option<Duration>),
    Fatal(Option<u16>, String),
}

enum Mode {
    Live(LiveClient),
    Replay,
    Scripted(Mutex<Box<dyn Responder>>),
}

/// Uniform entry point for every LLM call in the pipeline. Shareable across threads.
pub struct Gateway {
    mode: Mode,
    cache: Option<ReplayCache>,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.kind())
            .field("cache", &self.cache)
            .finish()
    }
}

impl Gateway {
    /// Live backend recording every exchange into `cache`.
    pub fn live(client: LiveClient, cache: ReplayCache) -> Self {
        Gateway {
            mode: Mode::Live(client),
            cache: Some(cache),
            limiter: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn replay(cache: ReplayCache) -> Self {
        Gateway {
            mode: Mode::Replay,
            cache: Some(cache),
            limiter: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn scripted(responder: impl Responder + 'static) -> Self {
        Gateway {
            mode: Mode::Scripted(Mutex::new(Box::new(responder))),
            cache: None,
            limiter: None,
            retry: RetryPolicy::default(),
        }
    }

    /// Also record scripted exchanges into `cache` (used to build replay fixtures).
    pub fn recording_into(mut self, cache: ReplayCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::per_minute(requests_per_minute));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn kind(&self) -> BackendKind {
        match self.mode {
            Mode::Live(_) => BackendKind::Live,
            Mode::Replay => BackendKind::Replay,
            Mode::Scripted(_) => BackendKind::Scripted,
        }
    }

    pub fn cache(&self) -> Option<&ReplayCache> {
        self.cache.as_ref()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatExchange> {
        request.validate()?;
        let key = cache_key(request);
        let response_text = match &self.mode {
            Mode::Replay => {
                let cache = self.cache.as_ref().expect("replay gateway has a cache");
                match cache.get(&key)? {
                    Some(hit) => hit.response_text,
                    None => return Err(Error::CacheMiss { digest: key.to_string() }),
                }
            }
            Mode::Scripted(responder) => {
                let mut responder = responder.lock().expect("scripted responder poisoned");
                responder.respond(request)?
            }
            Mode::Live(client) => self.call_live(client, request)?,
        };
        let exchange = ChatExchange {
            request: request.clone(),
            response_text,
            backend: self.kind(),
            cache_key: key,
        };
        if !matches!(self.mode, Mode::Replay) {
            if let Some(cache) = &self.cache {
                cache.put(&exchange)?;
            }
        }
        Ok(exchange)
    }

    fn call_live(&self, client: &LiveClient, request: &ChatRequest) -> Result<String> {
        let mut attempt = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match client.call(request) {
                Ok(text) => return Ok(text),
                Err(CallError::Fatal(status, message)) => return Err(Error::Backend { status, message }),
                Err(CallError::Retryable(status, message, retry_after)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(Error::Backend { status, message });
                    }
                    let delay = retry_after.unwrap_or_else(|| self.retry.delay(attempt));
                    log::warn!("live backend attempt {} failed ({message}); retrying in {delay:?}", attempt + 1);
                    thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}
