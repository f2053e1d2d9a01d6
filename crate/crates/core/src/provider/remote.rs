//! Configuration-driven HTTP adapter for chat/completions style endpoints.
//!
//! ```toml
//! name = "gpt-4o"
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! style = "chat"                 # or "completion"
//! model = "gpt-4o"
//! api_key_env = "OPENAI_API_KEY"
//! auth_header = "Authorization"
//! auth_prefix = "Bearer "
//! role = "user"
//! system_sections = []           # prompt sections sent as a system message
//! max_tokens_field = "max_tokens"
//! response_path = "choices.0.message.content"
//!
//! [retry]
//! max_retries = 5
//! base_delay_ms = 1000
//! max_delay_ms = 30000
//!
//! [rate_limit]
//! max_in_flight = 4
//! requests_per_minute = 60
//!
//! [extra]                        # merged verbatim into the request body
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::limits::{RateLimitConfig, RateLimiter, RetryPolicy};
use super::{CompletionProvider, CompletionRecord, CompletionRequest, ProviderError};
use crate::prompting::Section;
use crate::util::now_ms;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiStyle {
    #[default]
    Chat,
    Completion,
}

fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}
fn default_role() -> String {
    "user".into()
}
fn default_max_tokens_field() -> String {
    "max_tokens".into()
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub name: String,
    pub endpoint: String,
    #[serde(default)]
    pub style: ApiStyle,
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the credential; unset means no auth header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "default_role")]
    pub role: String,
    #[serde(default)]
    pub system_sections: Vec<Section>,
    #[serde(default = "default_max_tokens_field")]
    pub max_tokens_field: String,
    #[serde(default)]
    pub response_path: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub rate_limit: RateLimitConfig,
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl RemoteConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ProviderError> {
        toml::from_str(s).map_err(|e| ProviderError::Config(e.to_string()))
    }

    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ProviderError::Config(e.to_string()))
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn response_path(&self) -> &str {
        self.response_path.as_deref().unwrap_or(match self.style {
            ApiStyle::Chat => "choices.0.message.content",
            ApiStyle::Completion => "choices.0.text",
        })
    }

    fn credential(&self) -> Result<Option<String>, ProviderError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ProviderError::Config(format!("environment variable {var} is not set"))),
        }
    }
}

/// Follows a dotted path such as `choices.0.message.content`.
pub fn json_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').filter(|p| !p.is_empty()).try_fold(value, |v, part| match v {
        Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get(i)),
        Value::Object(map) => map.get(part),
        _ => None,
    })
}

/// Blocking JSON-over-HTTP with retries and a shared rate limiter.
#[derive(Debug, Clone)]
pub struct HttpClient {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limiter: Arc<RateLimiter>,
}

impl HttpClient {
    pub fn new(timeout: Duration, retry: RetryPolicy, limiter: Arc<RateLimiter>) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(HttpClient { client, retry, limiter })
    }

    pub fn limiter(&self) -> &Arc<RateLimiter> {
        &self.limiter
    }

    pub fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<Value, ProviderError> {
        self.retry.run(|| {
            let _permit = self.limiter.acquire();
            let mut req = self.client.post(url).json(body);
            for (k, v) in headers {
                req = req.header(k.as_str(), v.as_str());
            }
            let resp = req.send().map_err(|e| (ProviderError::Transport(e.to_string()), None))?;
            let status = resp.status().as_u16();
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let text = resp.text().map_err(|e| (ProviderError::Transport(e.to_string()), None))?;
            match status {
                200..=299 => serde_json::from_str(&text)
                    .map_err(|e| (ProviderError::Malformed(format!("invalid JSON body: {e}")), None)),
                401 | 403 => Err((ProviderError::Auth { status }, None)),
                _ => Err((ProviderError::Http { status, body: truncate(&text, 500) }, retry_after)),
            }
        })
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

pub struct RemoteProvider {
    config: RemoteConfig,
    http: HttpClient,
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self, ProviderError> {
        let limiter = Arc::new(RateLimiter::from_config(&config.rate_limit));
        Self::with_limiter(config, limiter)
    }

    /// Shares `limiter` with other clients of the same endpoint.
    pub fn with_limiter(config: RemoteConfig, limiter: Arc<RateLimiter>) -> Result<Self, ProviderError> {
        let http = HttpClient::new(Duration::from_secs(config.timeout_secs), config.retry, limiter)?;
        Ok(RemoteProvider { config, http })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// The JSON body sent for `request`.
    pub fn build_body(&self, request: &CompletionRequest) -> Value {
        let cfg = &self.config;
        let mut body = Map::new();
        body.insert("model".into(), json!(request.model_id));
        match cfg.style {
            ApiStyle::Chat => {
                let (system, user) = split_prompt(request, &cfg.system_sections);
                let mut messages = Vec::new();
                if !system.is_empty() {
                    messages.push(json!({"role": "system", "content": system}));
                }
                messages.push(json!({"role": cfg.role, "content": user}));
                body.insert("messages".into(), Value::Array(messages));
            }
            ApiStyle::Completion => {
                body.insert("prompt".into(), json!(request.prompt.text));
            }
        }
        body.insert("temperature".into(), json!(request.temperature));
        body.insert(cfg.max_tokens_field.clone(), json!(request.max_new_tokens));
        for (k, v) in &cfg.extra {
            body.insert(k.clone(), v.clone());
        }
        Value::Object(body)
    }

    fn headers(&self) -> Result<Vec<(String, String)>, ProviderError> {
        Ok(match self.config.credential()? {
            Some(key) => vec![(self.config.auth_header.clone(), format!("{}{key}", self.config.auth_prefix))],
            None => Vec::new(),
        })
    }
}

/// Moves the configured sections into a system message; the rest of the
/// prompt stays together as the user message.
fn split_prompt(request: &CompletionRequest, system_sections: &[Section]) -> (String, String) {
    if system_sections.is_empty() {
        return (String::new(), request.prompt.text.clone());
    }
    let mut system = String::new();
    let mut user = String::new();
    for (section, (a, b)) in &request.prompt.section_offsets {
        let part = &request.prompt.text[*a..*b];
        if system_sections.contains(section) {
            system.push_str(part);
        } else {
            user.push_str(part);
        }
    }
    (system.trim_end().to_string(), user)
}

impl CompletionProvider for RemoteProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionRecord, ProviderError> {
        request.validate()?;
        let headers = self.headers()?;
        let body = self.build_body(request);
        let started = Instant::now();
        let response = self.http.post_json(&self.config.endpoint, &headers, &body)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let path = self.config.response_path();
        let text = json_path(&response, path)
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Malformed(format!("no string at `{path}`")))?;
        let mut provider_meta = BTreeMap::new();
        provider_meta.insert("provider".into(), self.config.name.clone());
        provider_meta.insert("endpoint".into(), self.config.endpoint.clone());
        for key in ["id", "model", "system_fingerprint"] {
            if let Some(v) = response.get(key).and_then(Value::as_str) {
                provider_meta.insert(key.into(), v.to_string());
            }
        }
        if let Some(usage) = response.get("usage") {
            provider_meta.insert("usage".into(), usage.to_string());
        }
        Ok(CompletionRecord {
            request_hash: request.request_hash(),
            response_text: text.to_string(),
            latency_ms,
            provider_meta,
            timestamp_ms: now_ms(),
        })
    }

    fn is_remote(&self) -> bool {
        true
    }
}
