//! Similarity retrieval of in-context examples from the training turns.
//!
//! Instructions are embedded into unit vectors, so a dot product is the
//! cosine similarity. The index is an exact scan.
//!
//! # Index file layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic        8 bytes   "BAPIDX01"
//! name_len     u32       provider name length
//! name         bytes     UTF-8 provider name
//! dimension    u32
//! count        u64       number of entries
//! entries      count times:
//!   id_len     u32, game_id bytes (UTF-8)
//!   turn       u64
//!   text_len   u32, instruction bytes (UTF-8)
//!   n_actions  u32, then per action:
//!     kind u8 (0 place, 1 pick), color u8 (red, blue, orange, purple,
//!     yellow, green = 0..5), x i32, y i32, z i32
//!   vector     dimension x f64
//! footer       32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TurnPair;
use crate::dsl::{Action, ActionKind, Color};
use crate::provider::{HttpClient, ProviderError, RateLimitConfig, RateLimiter, RetryPolicy};
use crate::util::{atomic_write, sha256_hex};

pub const DEFAULT_K: usize = 3;
pub const LEXICAL_DIMENSION: usize = 2048;
const MAGIC: &[u8; 8] = b"BAPIDX01";

/// The part of a training turn that retrieval and prompting need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub game_id: String,
    pub turn_index: usize,
    pub instruction: String,
    pub gold_actions: Vec<Action>,
}

impl From<&TurnPair> for Example {
    fn from(p: &TurnPair) -> Self {
        Example {
            game_id: p.game_id.clone(),
            turn_index: p.turn_index,
            instruction: p.instruction.clone(),
            gold_actions: p.gold_actions.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding is the zero vector")]
    ZeroVector,
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Provider(e) if e.is_retryable())
    }
}

/// Deterministic text embedder producing unit vectors of a fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        (**self).embed(text)
    }
}

pub fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>, EmbedError> {
    provider.embed(text)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, EmbedError> {
    let norm = dot(&v, &v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Offline embedder: hashed character-trigram counts over the lowercased,
/// whitespace-collapsed, space-padded text.
#[derive(Debug, Clone)]
pub struct LexicalEmbedder {
    name: String,
    dimension: usize,
}

impl LexicalEmbedder {
    pub fn new(dimension: usize) -> Self {
        LexicalEmbedder { name: format!("lexical-3gram-{dimension}"), dimension: dimension.max(1) }
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

impl Default for LexicalEmbedder {
    fn default() -> Self {
        Self::new(LEXICAL_DIMENSION)
    }
}

impl EmbeddingProvider for LexicalEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let padded: Vec<char> = format!(" {collapsed} ").chars().collect();
        let mut v = vec![0.0; self.dimension];
        let mut bump = |gram: &[char]| {
            let s: String = gram.iter().collect();
            v[(Self::fnv1a(s.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        };
        if padded.len() < 3 {
            bump(&padded);
        } else {
            padded.windows(3).for_each(|w| bump(w));
        }
        normalize(v)
    }
}

/// Remote embedding endpoint configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub name: String,
    pub endpoint: String,
    #[serde(default)]
    pub model: Option<String>,
    pub dimension: usize,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "default_input_field")]
    pub input_field: String,
    #[serde(default = "default_embedding_path")]
    pub response_path: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub rate_limit: RateLimitConfig,
}

fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}
fn default_input_field() -> String {
    "input".into()
}
fn default_embedding_path() -> String {
    "data.0.embedding".into()
}
fn default_timeout() -> u64 {
    60
}

impl RemoteEmbedderConfig {
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ProviderError::Config(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| ProviderError::Config(e.to_string()))
        }
    }
}

/// Sentence-embedding service client; output is re-normalized to unit length.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    http: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, ProviderError> {
        let limiter = Arc::new(RateLimiter::from_config(&config.rate_limit));
        let http = HttpClient::new(Duration::from_secs(config.timeout_secs), config.retry, limiter)?;
        Ok(RemoteEmbedder { config, http })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let cfg = &self.config;
        let mut body = serde_json::Map::new();
        body.insert(cfg.input_field.clone(), json!(text));
        if let Some(model) = &cfg.model {
            body.insert("model".into(), json!(model));
        }
        let headers = match &cfg.api_key_env {
            Some(var) => {
                let key = std::env::var(var)
                    .map_err(|_| ProviderError::Config(format!("environment variable {var} is not set")))?;
                vec![(cfg.auth_header.clone(), format!("{}{key}", cfg.auth_prefix))]
            }
            None => Vec::new(),
        };
        let resp = self.http.post_json(&cfg.endpoint, &headers, &Value::Object(body))?;
        let values = crate::provider::json_path(&resp, &cfg.response_path)
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed(format!("no array at `{}`", cfg.response_path)))?;
        let v = values
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric embedding".into())))
            .collect::<Result<Vec<f64>, _>>()?;
        if v.len() != cfg.dimension {
            return Err(EmbedError::Dimension { expected: cfg.dimension, got: v.len() });
        }
        normalize(v)
    }
}

/// Embeddings keyed by `(provider name, SHA-256 of text)`, persisted as
/// JSONL next to the index.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: Mutex<HashMap<(String, String), Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    provider: String,
    text_sha256: String,
    /// Little-endian f64 bytes, hex encoded.
    vector: String,
}

impl EmbeddingCache {
    /// Cache file used for an index stored at `index_path`.
    pub fn path_for_index(index_path: &Path) -> PathBuf {
        let mut name = index_path.file_name().unwrap_or_default().to_os_string();
        name.push(".embcache.jsonl");
        index_path.with_file_name(name)
    }

    /// Loads a cache file; a missing file gives an empty cache and bad
    /// lines are skipped.
    pub fn load(path: &Path) -> Self {
        let mut map = HashMap::new();
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines() {
                let Ok(entry) = serde_json::from_str::<CacheLine>(line) else { continue };
                let Ok(bytes) = hex::decode(&entry.vector) else { continue };
                if bytes.len() % 8 != 0 {
                    continue;
                }
                let v = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                map.insert((entry.provider, entry.text_sha256), v);
            }
        }
        EmbeddingCache { entries: Mutex::new(map) }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let map = self.entries.lock().expect("cache lock");
        let mut keys: Vec<_> = map.keys().collect();
        keys.sort();
        let mut out = String::new();
        for key in keys {
            let bytes: Vec<u8> = map[key].iter().flat_map(|x| x.to_le_bytes()).collect();
            let line = CacheLine { provider: key.0.clone(), text_sha256: key.1.clone(), vector: hex::encode(bytes) };
            out.push_str(&serde_json::to_string(&line).map_err(io::Error::other)?);
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Wraps a provider with an [`EmbeddingCache`].
pub struct CachingEmbedder<'a> {
    inner: &'a dyn EmbeddingProvider,
    cache: &'a EmbeddingCache,
}

impl<'a> CachingEmbedder<'a> {
    pub fn new(inner: &'a dyn EmbeddingProvider, cache: &'a EmbeddingCache) -> Self {
        CachingEmbedder { inner, cache }
    }
}

impl EmbeddingProvider for CachingEmbedder<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let key = (self.inner.name().to_string(), sha256_hex(text.as_bytes()));
        if let Some(v) = self.cache.entries.lock().expect("cache lock").get(&key) {
            if v.len() == self.inner.dimension() {
                return Ok(v.clone());
            }
        }
        let v = self.inner.embed(text)?;
        self.cache.entries.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub example: Example,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleIndex {
    pub provider_name: String,
    pub dimension: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub example: Example,
    pub similarity: f64,
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("index checksum mismatch")]
    Checksum,
    #[error("index was built with `{found}`, expected `{expected}`")]
    ProviderMismatch { expected: String, found: String },
}

/// Embeds every training turn. Entries are stored in `(game_id, turn_index)`
/// order regardless of input order.
pub fn build_index(
    provider: &dyn EmbeddingProvider,
    train_pairs: &[TurnPair],
    parallelism: usize,
) -> Result<ExampleIndex, IndexError> {
    let examples: Vec<Example> = train_pairs.iter().map(Example::from).collect();
    build_index_from_examples(provider, examples, parallelism)
}

pub fn build_index_from_examples(
    provider: &dyn EmbeddingProvider,
    mut examples: Vec<Example>,
    parallelism: usize,
) -> Result<ExampleIndex, IndexError> {
    examples.sort_by(|a, b| (&a.game_id, a.turn_index).cmp(&(&b.game_id, b.turn_index)));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| IndexError::Corrupt(format!("thread pool: {e}")))?;
    let vectors: Vec<Vec<f64>> = pool.install(|| {
        examples
            .par_iter()
            .map(|e| provider.embed(&e.instruction))
            .collect::<Result<_, _>>()
    })?;
    let dimension = provider.dimension();
    if let Some(v) = vectors.iter().find(|v| v.len() != dimension) {
        return Err(EmbedError::Dimension { expected: dimension, got: v.len() }.into());
    }
    Ok(ExampleIndex {
        provider_name: provider.name().to_string(),
        dimension,
        entries: examples
            .into_iter()
            .zip(vectors)
            .map(|(example, vector)| IndexEntry { example, vector })
            .collect(),
    })
}

impl ExampleIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` most similar entries to an already-embedded query, by
    /// descending similarity, ties by `(game_id, turn_index)`.
    pub fn top_k_vector(&self, query: &[f64], k: usize) -> Vec<Retrieved> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(f64, &IndexEntry)> =
            self.entries.iter().map(|e| (dot(query, &e.vector), e)).collect();
        scored.sort_by(|(sa, a), (sb, b)| {
            sb.total_cmp(sa)
                .then_with(|| a.example.game_id.cmp(&b.example.game_id))
                .then_with(|| a.example.turn_index.cmp(&b.example.turn_index))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(similarity, e)| Retrieved { example: e.example.clone(), similarity })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_str(&mut out, &self.provider_name);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for entry in &self.entries {
            let e = &entry.example;
            put_str(&mut out, &e.game_id);
            out.extend_from_slice(&(e.turn_index as u64).to_le_bytes());
            put_str(&mut out, &e.instruction);
            out.extend_from_slice(&(e.gold_actions.len() as u32).to_le_bytes());
            for a in &e.gold_actions {
                out.push(match a.kind {
                    ActionKind::Place => 0,
                    ActionKind::Pick => 1,
                });
                out.push(Color::ALL.iter().position(|c| *c == a.color).expect("closed color set") as u8);
                for v in [a.x, a.y, a.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for x in &entry.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(IndexError::Corrupt("file too short".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != footer {
            return Err(IndexError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let provider_name = r.string()?;
        let dimension = r.u32()? as usize;
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let game_id = r.string()?;
            let turn_index = r.u64()? as usize;
            let instruction = r.string()?;
            let n = r.u32()? as usize;
            let mut gold_actions = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let kind = match r.u8()? {
                    0 => ActionKind::Place,
                    1 => ActionKind::Pick,
                    k => return Err(IndexError::Corrupt(format!("bad action kind {k}"))),
                };
                let color = *Color::ALL
                    .get(r.u8()? as usize)
                    .ok_or_else(|| IndexError::Corrupt("bad color".into()))?;
                let (x, y, z) = (r.i32()?, r.i32()?, r.i32()?);
                gold_actions.push(Action { kind, color, x, y, z });
            }
            let vector = (0..dimension).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            entries.push(IndexEntry {
                example: Example { game_id, turn_index, instruction, gold_actions },
                vector,
            });
        }
        if r.pos != body.len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        Ok(ExampleIndex { provider_name, dimension, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        atomic_write(path, &self.to_bytes()).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Embeds `instruction` and returns its `k` nearest training turns.
pub fn top_k(
    index: &ExampleIndex,
    provider: &dyn EmbeddingProvider,
    instruction: &str,
    k: usize,
) -> Result<Vec<Retrieved>, IndexError> {
    if provider.name() != index.provider_name {
        return Err(IndexError::ProviderMismatch {
            expected: provider.name().to_string(),
            found: index.provider_name.clone(),
        });
    }
    if k == 0 || index.is_empty() {
        return Ok(Vec::new());
    }
    let query = provider.embed(instruction)?;
    Ok(index.top_k_vector(&query, k))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| IndexError::Corrupt("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], IndexError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32, IndexError> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| IndexError::Corrupt("invalid UTF-8".into()))
    }
}
