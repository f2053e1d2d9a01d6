//! Completion providers: remote LLM endpoints and deterministic mocks.
//!
//! Providers return the raw response text. Extraction of actions happens in
//! [`crate::dsl`].

mod cache;
mod limits;
mod mock;
mod remote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptText;
use crate::util::sha256_hex;

pub use cache::{cached_complete, CacheOutcome, ResponseCache};
pub use limits::{Permit, RateLimitConfig, RateLimiter, RetryPolicy};
pub use mock::{EchoOracle, NearestNeighbor};
pub use remote::{json_path, ApiStyle, HttpClient, RemoteConfig, RemoteProvider};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 500;

/// Identifies the corpus turn a request was issued for. Not part of the
/// request hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TurnRef {
    pub game_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt: PromptText,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<TurnRef>,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, prompt: PromptText) -> Self {
        CompletionRequest {
            model_id: model_id.into(),
            prompt,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            turn: None,
        }
    }

    pub fn for_turn(mut self, game_id: impl Into<String>, turn_index: usize) -> Self {
        self.turn = Some(TurnRef { game_id: game_id.into(), turn_index });
        self
    }

    /// SHA-256 over `(model_id, prompt text, temperature, max_new_tokens)`.
    pub fn request_hash(&self) -> String {
        let key = serde_json::to_string(&(
            &self.model_id,
            &self.prompt.text,
            self.temperature,
            self.max_new_tokens,
        ))
        .expect("tuple serializes");
        sha256_hex(key.as_bytes())
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.temperature >= 0.0) {
            return Err(ProviderError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(ProviderError::Config("max_new_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_hash: String,
    pub response_text: String,
    pub latency_ms: u64,
    pub provider_meta: BTreeMap<String, String>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("gave up after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that turns a prompt into raw text.
pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionRecord, ProviderError>;

    /// False for providers whose output depends on the turn rather than the
    /// prompt alone; the cache then keys on the turn as well.
    fn prompt_determined(&self) -> bool {
        true
    }

    /// Whether the provider talks to the network.
    fn is_remote(&self) -> bool {
        false
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for std::sync::Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionRecord, ProviderError> {
        (**self).complete(request)
    }

    fn prompt_determined(&self) -> bool {
        (**self).prompt_determined()
    }

    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{render_prompt, PromptConfig, TemplateSet};

    fn prompt(text: &str) -> PromptText {
        render_prompt(&PromptConfig::with_k(0), &TemplateSet::builtin(), &[], text)
    }

    #[test]
    fn defaults_match_decoding_setup() {
        let r = CompletionRequest::new("m", prompt("x"));
        assert_eq!(r.temperature, 0.0);
        assert_eq!(r.max_new_tokens, 500);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn hash_covers_all_request_fields() {
        let base = CompletionRequest::new("m", prompt("x"));
        let hotter = CompletionRequest { temperature: 0.7, ..base.clone() };
        let longer = CompletionRequest { max_new_tokens: 501, ..base.clone() };
        let other_model = CompletionRequest { model_id: "n".into(), ..base.clone() };
        let other_prompt = CompletionRequest::new("m", prompt("y"));
        let hashes = [&base, &hotter, &longer, &other_model, &other_prompt].map(|r| r.request_hash());
        for i in 0..hashes.len() {
            for j in i + 1..hashes.len() {
                assert_ne!(hashes[i], hashes[j]);
            }
        }
        assert_eq!(base.request_hash(), base.clone().for_turn("g", 3).request_hash());
    }

    #[test]
    fn invalid_requests() {
        let mut r = CompletionRequest::new("m", prompt("x"));
        r.temperature = -1.0;
        assert!(r.validate().is_err());
        r.temperature = 0.0;
        r.max_new_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn retryability() {
        assert!(ProviderError::Transport("reset".into()).is_retryable());
        assert!(ProviderError::Http { status: 503, body: String::new() }.is_retryable());
        assert!(ProviderError::Http { status: 429, body: String::new() }.is_retryable());
        assert!(!ProviderError::Http { status: 400, body: String::new() }.is_retryable());
        assert!(!ProviderError::Auth { status: 401 }.is_retryable());
        assert!(!ProviderError::Malformed("x".into()).is_retryable());
    }
}
