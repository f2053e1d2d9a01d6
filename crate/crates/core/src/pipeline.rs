//! End-to-end commands. All state lives on disk:
//!
//! ```text
//! <runs_dir>/<run_id>/manifest.json
//!                     prompts/<game>__<turn>.txt
//!                     responses/<game>__<turn>.json
//!                     reports/{eval,analysis}.{json,txt}
//! <cache_dir>/responses/ab/cd/<key>.json
//! <cache_dir>/index/<embedder>-<corpus digest>.bapidx
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{analyze, load_annotations, AnalysisError, AnalysisReport, Category, Lexicons};
use crate::corpus::{
    all_pairs, corpus_files, load_all, load_all_strict, split_stats, to_jsonl_line, CorpusError, DialogueGame,
    Split, SplitStats, TurnPair,
};
use crate::eval::{evaluate_run, EvalReport, MatchMode, Metrics, RunArtifacts};
use crate::import::{import_raw, is_raw_root, ImportError};
use crate::prompting::{ablation_configs, render_prompt, PromptConfig, PromptError, TemplateSet};
use crate::provider::{
    cached_complete, CacheOutcome, CompletionProvider, CompletionRecord, CompletionRequest, EchoOracle,
    NearestNeighbor, RemoteConfig, RemoteProvider, ResponseCache,
};
use crate::retrieval::{
    build_index, top_k, CachingEmbedder, EmbeddingCache, EmbeddingProvider, Example, ExampleIndex, IndexError,
    LexicalEmbedder, RemoteEmbedder, RemoteEmbedderConfig, LEXICAL_DIMENSION,
};
use crate::util::{atomic_write, now_ms, sanitize_component, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Import(#[from] ImportError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unknown run `{0}`")]
    UnknownRun(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.into(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    atomic_write(path, text.as_bytes()).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// SHA-256 over the corpus files, in name order, each prefixed by its name.
pub fn corpus_digest(path: &Path) -> Result<String, PipelineError> {
    let mut acc = Vec::new();
    for file in corpus_files(path)? {
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        let name = file.file_name().unwrap_or_default().to_string_lossy().into_owned();
        acc.extend_from_slice(format!("{name}\n{}\n", sha256_hex(&bytes)).as_bytes());
    }
    Ok(sha256_hex(&acc))
}

// ---------------------------------------------------------------- convert

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertReport {
    pub stats: Vec<SplitStats>,
    pub files: Vec<PathBuf>,
}

/// Normalizes a raw root or an existing normalized corpus into
/// `<out>/{train,dev,test}.jsonl` plus `stats.json`.
///
/// Game order within a split follows the input, so converting already
/// normalized output reproduces it byte for byte.
pub fn cmd_convert(input: &Path, out: &Path) -> Result<ConvertReport, PipelineError> {
    let games = if is_raw_root(input) { import_raw(input)? } else { load_all_strict(input)? };
    if out.is_file() {
        return Err(PipelineError::Config(format!("{} is a file; expected an output directory", out.display())));
    }
    let mut by_split: BTreeMap<Split, Vec<DialogueGame>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for g in games {
        by_split.get_mut(&g.split).expect("all splits present").push(g);
    }
    let mut stats = Vec::new();
    let mut files = Vec::new();
    for (split, games) in &by_split {
        let path = out.join(format!("{}.jsonl", split.as_str()));
        let body: String = games.iter().map(|g| to_jsonl_line(g) + "\n").collect();
        write_text(&path, &body)?;
        stats.push(split_stats(*split, games));
        files.push(path);
    }
    write_json(&out.join(STATS_FILE), &stats)?;
    Ok(ConvertReport { stats, files })
}

// ------------------------------------------------------------------ specs

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Echo,
    NearestNeighbor,
    Remote { config: PathBuf },
}

impl ProviderSpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, ProviderSpec::Remote { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Lexical { dimension: usize },
    Remote { config: PathBuf },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Lexical { dimension: LEXICAL_DIMENSION }
    }
}

impl EmbedderSpec {
    /// `lexical`, `lexical:<dim>` or a path to a remote embedder config.
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        match s.split_once(':') {
            _ if s == "lexical" => Ok(EmbedderSpec::default()),
            Some(("lexical", dim)) => dim
                .parse()
                .ok()
                .filter(|d| *d > 0)
                .map(|dimension| EmbedderSpec::Lexical { dimension })
                .ok_or_else(|| PipelineError::Config(format!("bad lexical dimension {dim:?}"))),
            _ => Ok(EmbedderSpec::Remote { config: PathBuf::from(s) }),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, PipelineError> {
        Ok(match self {
            EmbedderSpec::Lexical { dimension } => Arc::new(LexicalEmbedder::new(*dimension)),
            EmbedderSpec::Remote { config } => {
                let cfg = RemoteEmbedderConfig::load(config).map_err(|e| PipelineError::Config(e.to_string()))?;
                Arc::new(RemoteEmbedder::new(cfg).map_err(|e| PipelineError::Config(e.to_string()))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub corpus: PathBuf,
    pub split: Split,
    pub provider: ProviderSpec,
    pub model_id: Option<String>,
    pub prompt: PromptConfig,
    pub template_dir: Option<PathBuf>,
    pub embedder: EmbedderSpec,
    pub index_path: Option<PathBuf>,
    pub runs_dir: PathBuf,
    pub cache_dir: PathBuf,
    /// Concurrent turns; `None` picks 4 for remote providers, CPU count otherwise.
    pub parallel: Option<usize>,
    /// Only the first `n` turns of the split.
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, split: Split, provider: ProviderSpec) -> Self {
        RunConfig {
            run_id: None,
            corpus: corpus.into(),
            split,
            provider,
            model_id: None,
            prompt: PromptConfig::default(),
            template_dir: None,
            embedder: EmbedderSpec::default(),
            index_path: None,
            runs_dir: PathBuf::from("runs"),
            cache_dir: PathBuf::from(".bap-cache"),
            parallel: None,
            limit: None,
        }
    }

    pub fn parallelism(&self) -> usize {
        self.parallel.filter(|p| *p > 0).unwrap_or_else(|| {
            if self.provider.is_remote() {
                4
            } else {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            }
        })
    }
}

// --------------------------------------------------------------- manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnState {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnStatus {
    pub game_id: String,
    pub turn_index: usize,
    pub state: TurnState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalInfo {
    pub embedder: String,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus_path: PathBuf,
    pub corpus_digest: String,
    pub split: Split,
    pub provider: String,
    pub provider_spec: ProviderSpec,
    pub model_id: String,
    pub prompt_config: PromptConfig,
    pub retrieval: RetrievalInfo,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub turns: Vec<TurnStatus>,
}

impl RunManifest {
    pub fn load(runs_dir: &Path, run_id: &str) -> Result<Self, PipelineError> {
        let path = run_dir(runs_dir, run_id).join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(PipelineError::UnknownRun(run_id.to_string()));
        }
        read_json(&path)
    }

    pub fn save(&self, runs_dir: &Path) -> Result<(), PipelineError> {
        write_json(&run_dir(runs_dir, &self.run_id).join(MANIFEST_FILE), self)
    }

    pub fn count(&self, state: TurnState) -> usize {
        self.turns.iter().filter(|t| t.state == state).count()
    }

    pub fn is_complete(&self) -> bool {
        self.count(TurnState::Done) == self.turns.len()
    }

    /// Everything except timestamps and per-turn progress.
    fn same_setup(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| RunManifest { created_ms: 0, updated_ms: 0, turns: Vec::new(), ..m.clone() };
        let ids = |m: &RunManifest| m.turns.iter().map(|t| (t.game_id.clone(), t.turn_index)).collect::<Vec<_>>();
        strip(self) == strip(other) && ids(self) == ids(other)
    }
}

pub fn run_dir(runs_dir: &Path, run_id: &str) -> PathBuf {
    runs_dir.join(sanitize_component(run_id))
}

fn turn_file(game_id: &str, turn_index: usize, ext: &str) -> String {
    format!("{}__{turn_index}.{ext}", sanitize_component(game_id))
}

// -------------------------------------------------------------------- run

/// Counters of one `cmd_run` invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub turns: usize,
    /// Turns whose stored response was reused without touching the cache.
    pub reused: usize,
    pub cache_hits: usize,
    pub provider_calls: usize,
    pub failed: usize,
}

fn load_split_pairs(corpus: &Path, split: Split) -> Result<(Vec<TurnPair>, Vec<DialogueGame>), PipelineError> {
    let loaded = load_all(corpus)?;
    for d in &loaded.diagnostics {
        log::warn!("{}:{}: skipping record ({}: {})", d.source_file.display(), d.line, d.field, d.message);
    }
    let games: Vec<DialogueGame> = loaded.games;
    let split_games: Vec<DialogueGame> = games.iter().filter(|g| g.split == split).cloned().collect();
    Ok((all_pairs(&split_games), games))
}

fn default_index_path(cfg: &RunConfig, embedder: &dyn EmbeddingProvider, digest: &str) -> PathBuf {
    cfg.index_path.clone().unwrap_or_else(|| {
        cfg.cache_dir
            .join("index")
            .join(format!("{}-{}.bapidx", sanitize_component(embedder.name()), &digest[..16]))
    })
}

/// Loads the training-split index at `path`, building and saving it first
/// when absent.
pub fn ensure_index(
    path: &Path,
    embedder: &dyn EmbeddingProvider,
    train: &[TurnPair],
    parallelism: usize,
) -> Result<ExampleIndex, PipelineError> {
    if path.is_file() {
        let index = ExampleIndex::load(path)?;
        if index.provider_name != embedder.name() {
            return Err(IndexError::ProviderMismatch {
                expected: embedder.name().to_string(),
                found: index.provider_name,
            }
            .into());
        }
        return Ok(index);
    }
    let cache_path = EmbeddingCache::path_for_index(path);
    let cache = EmbeddingCache::load(&cache_path);
    let index = build_index(&CachingEmbedder::new(embedder, &cache), train, parallelism)?;
    index.save(path)?;
    cache.save(&cache_path).map_err(io_err(&cache_path))?;
    Ok(index)
}

/// Builds the training-split index of `corpus` at `out`.
pub fn cmd_index(corpus: &Path, out: &Path, embedder: &EmbedderSpec, parallel: usize) -> Result<ExampleIndex, PipelineError> {
    let (train, _) = load_split_pairs(corpus, Split::Train)?;
    let embedder = embedder.build()?;
    if out.is_file() {
        fs::remove_file(out).map_err(io_err(out))?;
    }
    ensure_index(out, embedder.as_ref(), &train, parallel.max(1))
}

fn build_provider(
    spec: &ProviderSpec,
    pairs: &[TurnPair],
    index: Option<Arc<ExampleIndex>>,
    embedder: Arc<dyn EmbeddingProvider>,
) -> Result<(Arc<dyn CompletionProvider>, Option<String>), PipelineError> {
    Ok(match spec {
        ProviderSpec::Echo => (Arc::new(EchoOracle::new(pairs)), None),
        ProviderSpec::NearestNeighbor => {
            let index = index.ok_or_else(|| PipelineError::Config("nearest-neighbor needs an index".into()))?;
            (Arc::new(NearestNeighbor::new(index, embedder)), None)
        }
        ProviderSpec::Remote { config } => {
            let cfg = RemoteConfig::load(config).map_err(|e| PipelineError::Config(e.to_string()))?;
            let model = cfg.model.clone();
            (Arc::new(RemoteProvider::new(cfg).map_err(|e| PipelineError::Config(e.to_string()))?), model)
        }
    })
}

fn default_run_id(cfg: &RunConfig, provider: &str, model: &str) -> String {
    let model = if model == provider { String::new() } else { format!("-{model}") };
    sanitize_component(&format!("{provider}{model}-{}-{}", cfg.split.as_str(), cfg.prompt.slug()))
}

struct TurnJob<'a> {
    pair: &'a TurnPair,
    prior: Option<&'a TurnStatus>,
}

enum TurnResult {
    Reused(TurnStatus),
    Fetched(TurnStatus, CacheOutcome),
    Failed(TurnStatus),
}

/// Runs every turn of a split through retrieval, prompting and the
/// provider, storing prompts and raw responses in the run directory.
/// Completed turns of an earlier invocation are skipped; failed turns are
/// recorded in the manifest and do not abort the run.
pub fn cmd_run(cfg: &RunConfig) -> Result<(RunManifest, RunOutcome), PipelineError> {
    let digest = corpus_digest(&cfg.corpus)?;
    let (mut pairs, games) = load_split_pairs(&cfg.corpus, cfg.split)?;
    if let Some(n) = cfg.limit {
        pairs.truncate(n);
    }
    let parallelism = cfg.parallelism();
    let templates = TemplateSet::resolve(&cfg.prompt.template_set, cfg.template_dir.as_deref())?;
    let embedder = cfg.embedder.build()?;

    let needs_index = cfg.prompt.k_examples > 0 || cfg.provider == ProviderSpec::NearestNeighbor;
    let (index, index_digest) = if needs_index {
        let train_games: Vec<DialogueGame> = games.iter().filter(|g| g.split == Split::Train).cloned().collect();
        let path = default_index_path(cfg, embedder.as_ref(), &digest);
        let index = ensure_index(&path, embedder.as_ref(), &all_pairs(&train_games), parallelism)?;
        let d = sha256_hex(&fs::read(&path).map_err(io_err(&path))?);
        (Some(Arc::new(index)), Some(d))
    } else {
        (None, None)
    };

    let (provider, config_model) = build_provider(&cfg.provider, &pairs, index.clone(), embedder.clone())?;
    let model_id = cfg
        .model_id
        .clone()
        .or(config_model)
        .unwrap_or_else(|| provider.name().to_string());
    let run_id = cfg.run_id.clone().unwrap_or_else(|| default_run_id(cfg, provider.name(), &model_id));
    let dir = run_dir(&cfg.runs_dir, &run_id);

    let now = now_ms();
    let fresh = RunManifest {
        run_id: run_id.clone(),
        corpus_path: cfg.corpus.clone(),
        corpus_digest: digest,
        split: cfg.split,
        provider: provider.name().to_string(),
        provider_spec: cfg.provider.clone(),
        model_id: model_id.clone(),
        prompt_config: cfg.prompt.clone(),
        retrieval: RetrievalInfo { embedder: embedder.name().to_string(), k: cfg.prompt.k_examples, index_digest },
        created_ms: now,
        updated_ms: now,
        turns: pairs
            .iter()
            .map(|p| TurnStatus {
                game_id: p.game_id.clone(),
                turn_index: p.turn_index,
                state: TurnState::Pending,
                request_hash: None,
                error: None,
            })
            .collect(),
    };
    let mut manifest = match RunManifest::load(&cfg.runs_dir, &run_id) {
        Ok(old) if old.same_setup(&fresh) => RunManifest { updated_ms: now, ..old },
        Ok(_) => {
            return Err(PipelineError::Config(format!(
                "run `{run_id}` already exists with a different configuration"
            )))
        }
        Err(PipelineError::UnknownRun(_)) => fresh,
        Err(e) => return Err(e),
    };
    manifest.save(&cfg.runs_dir)?;

    let cache = ResponseCache::new(cfg.cache_dir.join("responses"));
    let prior: HashMap<(&str, usize), &TurnStatus> =
        manifest.turns.iter().map(|t| ((t.game_id.as_str(), t.turn_index), t)).collect();
    let jobs: Vec<TurnJob> = pairs
        .iter()
        .map(|pair| TurnJob { pair, prior: prior.get(&(pair.game_id.as_str(), pair.turn_index)).copied() })
        .collect();

    let done = AtomicUsize::new(0);
    let total = jobs.len();
    let exclude_self = cfg.split == Split::Train;
    let run_turn = |job: &TurnJob| -> TurnResult {
        let pair = job.pair;
        let mut status = TurnStatus {
            game_id: pair.game_id.clone(),
            turn_index: pair.turn_index,
            state: TurnState::Failed,
            request_hash: None,
            error: None,
        };
        let fail = |mut s: TurnStatus, msg: String| {
            log::warn!("{}#{}: {msg}", s.game_id, s.turn_index);
            s.error = Some(msg);
            TurnResult::Failed(s)
        };

        let k = cfg.prompt.k_examples;
        let examples: Vec<Example> = match &index {
            Some(index) if k > 0 => {
                let want = if exclude_self { k + 1 } else { k };
                match top_k(index, embedder.as_ref(), &pair.instruction, want) {
                    Ok(hits) => hits
                        .into_iter()
                        .map(|h| h.example)
                        .filter(|e| !(exclude_self && e.game_id == pair.game_id && e.turn_index == pair.turn_index))
                        .take(k)
                        .collect(),
                    Err(e) => return fail(status, format!("retrieval: {e}")),
                }
            }
            _ => Vec::new(),
        };
        let prompt = render_prompt(&cfg.prompt, &templates, &examples, &pair.instruction);
        let request = CompletionRequest::new(model_id.clone(), prompt).for_turn(pair.game_id.clone(), pair.turn_index);
        let hash = request.request_hash();
        status.request_hash = Some(hash.clone());

        let prompt_path = dir.join("prompts").join(turn_file(&pair.game_id, pair.turn_index, "txt"));
        let response_path = dir.join("responses").join(turn_file(&pair.game_id, pair.turn_index, "json"));

        if job.prior.is_some_and(|p| p.state == TurnState::Done && p.request_hash.as_deref() == Some(&hash)) {
            if let Ok(bytes) = fs::read(&response_path) {
                if serde_json::from_slice::<CompletionRecord>(&bytes).is_ok_and(|r| r.request_hash == hash) {
                    status.state = TurnState::Done;
                    return TurnResult::Reused(status);
                }
            }
        }
        if let Err(e) = atomic_write(&prompt_path, request.prompt.text.as_bytes()) {
            return fail(status, format!("writing prompt: {e}"));
        }
        match cached_complete(provider.as_ref(), &request, &cache) {
            Ok((record, outcome)) => {
                let mut bytes = serde_json::to_vec_pretty(&record).expect("record serializes");
                bytes.push(b'\n');
                if let Err(e) = atomic_write(&response_path, &bytes) {
                    return fail(status, format!("writing response: {e}"));
                }
                status.state = TurnState::Done;
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if n % 100 == 0 {
                    log::info!("{run_id}: {n}/{total} turns");
                }
                TurnResult::Fetched(status, outcome)
            }
            Err(e) => fail(status, e.to_string()),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let results: Vec<TurnResult> = pool.install(|| jobs.par_iter().map(run_turn).collect());

    let mut outcome = RunOutcome { run_id: run_id.clone(), turns: results.len(), ..Default::default() };
    manifest.turns = results
        .into_iter()
        .map(|r| match r {
            TurnResult::Reused(s) => {
                outcome.reused += 1;
                s
            }
            TurnResult::Fetched(s, CacheOutcome::Hit) => {
                outcome.cache_hits += 1;
                s
            }
            TurnResult::Fetched(s, _) => {
                outcome.provider_calls += 1;
                s
            }
            TurnResult::Failed(s) => {
                outcome.failed += 1;
                s
            }
        })
        .collect();
    manifest.updated_ms = now_ms();
    manifest.save(&cfg.runs_dir)?;
    Ok((manifest, outcome))
}

// ------------------------------------------------------------------- eval

/// Turn pairs of a stored run, in manifest order. Fails if the corpus
/// changed since the run was made.
pub fn run_pairs(manifest: &RunManifest) -> Result<Vec<TurnPair>, PipelineError> {
    let digest = corpus_digest(&manifest.corpus_path)?;
    if digest != manifest.corpus_digest {
        return Err(PipelineError::Config(format!(
            "corpus at {} changed since run `{}` was made",
            manifest.corpus_path.display(),
            manifest.run_id
        )));
    }
    let (pairs, _) = load_split_pairs(&manifest.corpus_path, manifest.split)?;
    let mut by_id: HashMap<(String, usize), TurnPair> =
        pairs.into_iter().map(|p| ((p.game_id.clone(), p.turn_index), p)).collect();
    manifest
        .turns
        .iter()
        .map(|t| {
            by_id.remove(&(t.game_id.clone(), t.turn_index)).ok_or_else(|| {
                PipelineError::Config(format!("turn {}#{} is not in the corpus", t.game_id, t.turn_index))
            })
        })
        .collect()
}

/// Stored raw responses of every completed turn.
pub fn run_responses(runs_dir: &Path, manifest: &RunManifest) -> Result<HashMap<(String, usize), String>, PipelineError> {
    let dir = run_dir(runs_dir, &manifest.run_id).join("responses");
    let mut out = HashMap::new();
    for t in manifest.turns.iter().filter(|t| t.state == TurnState::Done) {
        let path = dir.join(turn_file(&t.game_id, t.turn_index, "json"));
        let record: CompletionRecord = read_json(&path)?;
        out.insert((t.game_id.clone(), t.turn_index), record.response_text);
    }
    Ok(out)
}

pub fn render_eval_table(rows: &[(String, Metrics, Metrics)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}  {:>6}\n",
        "Model", "P", "R", "F1", "F1 (net)", "Turns"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 44)));
    for (label, m, net) in rows {
        out.push_str(&format!(
            "{label:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>8.4}  {:>6}\n",
            m.precision, m.recall, m.f1, net.f1, m.turn_count
        ));
    }
    out
}

pub fn run_label(manifest: &RunManifest) -> String {
    if manifest.model_id == manifest.provider {
        manifest.provider.clone()
    } else {
        format!("{} ({})", manifest.model_id, manifest.provider)
    }
}

/// Scores a stored run and writes `reports/eval.{json,txt}`.
pub fn cmd_eval(runs_dir: &Path, run_id: &str, mode: MatchMode) -> Result<EvalReport, PipelineError> {
    let manifest = RunManifest::load(runs_dir, run_id)?;
    let run = RunArtifacts { pairs: run_pairs(&manifest)?, responses: run_responses(runs_dir, &manifest)? };
    let report = evaluate_run(&run, mode);
    let reports = run_dir(runs_dir, run_id).join("reports");
    write_json(&reports.join("eval.json"), &report)?;
    let mut text = render_eval_table(&[(run_label(&manifest), report.overall, report.variant_net_gold)]);
    if !report.missing.is_empty() {
        text.push_str(&format!("\n{} turns without a completion were scored as empty.\n", report.missing.len()));
    }
    if !report.grounding.is_empty() {
        text.push_str(&format!("{} turns contain predictions the world rejects.\n", report.grounding.len()));
    }
    write_text(&reports.join("eval.txt"), &text)?;
    Ok(report)
}

// ---------------------------------------------------------------- analyze

pub fn cmd_analyze(
    runs_dir: &Path,
    run_id: &str,
    lexicons: &Lexicons,
    annotations: Option<&Path>,
) -> Result<AnalysisReport, PipelineError> {
    let manifest = RunManifest::load(runs_dir, run_id)?;
    let pairs = run_pairs(&manifest)?;
    let eval = evaluate_run(
        &RunArtifacts { pairs: pairs.clone(), responses: run_responses(runs_dir, &manifest)? },
        MatchMode::Multiset,
    );
    let annotations = annotations.map(load_annotations).transpose()?;
    let report = analyze(&eval, &pairs, lexicons, annotations.as_deref())?;
    let reports = run_dir(runs_dir, run_id).join("reports");
    write_json(&reports.join("analysis.json"), &report)?;
    write_text(&reports.join("analysis.txt"), &crate::analysis::render_analysis_table(&report))?;
    Ok(report)
}

// ----------------------------------------------------------------- ablate

/// F1 of the ten ablation rows as published, in `ablation_configs()` order.
pub const REFERENCE_ABLATION_F1: [f64; 10] = [0.15, 0.17, 0.18, 0.18, 0.18, 0.18, 0.19, 0.17, 0.17, 0.17];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub label: String,
    pub run_id: String,
    pub config: PromptConfig,
    pub metrics: Metrics,
    pub failed_turns: usize,
    pub reference_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub prefix: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn failed_turns(&self) -> usize {
        self.rows.iter().map(|r| r.failed_turns).sum()
    }
}

pub fn render_ablation_table(report: &AblationReport) -> String {
    let width = report.rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:>3}  {:<width$}  {:>6}  {:>9}\n", "#", "Prompt", "F1", "Reference");
    out.push_str(&format!("{}\n", "-".repeat(width + 25)));
    for r in &report.rows {
        out.push_str(&format!("{:>3}  {:<width$}  {:>6.4}  {:>9.2}\n", r.row, r.label, r.metrics.f1, r.reference_f1));
    }
    out
}

/// Runs and scores every ablation configuration on the dev split. `base`
/// supplies the corpus, provider and directories; its split and section
/// choices are overridden per row.
pub fn cmd_ablate(base: &RunConfig, prefix: &str) -> Result<AblationReport, PipelineError> {
    let mut rows = Vec::new();
    for (i, row_cfg) in ablation_configs().into_iter().enumerate() {
        let prompt = PromptConfig {
            template_set: base.prompt.template_set.clone(),
            net_clean_examples: base.prompt.net_clean_examples,
            ..row_cfg
        };
        let run_id = sanitize_component(&format!("{prefix}-{}", prompt.slug()));
        let cfg = RunConfig { run_id: Some(run_id.clone()), split: Split::Dev, prompt: prompt.clone(), ..base.clone() };
        let (_, outcome) = cmd_run(&cfg)?;
        let report = cmd_eval(&base.runs_dir, &run_id, MatchMode::Multiset)?;
        rows.push(AblationRow {
            row: i + 1,
            label: prompt.label(),
            run_id,
            config: prompt,
            metrics: report.overall,
            failed_turns: outcome.failed,
            reference_f1: REFERENCE_ABLATION_F1[i],
        });
    }
    let report = AblationReport { prefix: prefix.to_string(), rows };
    let dir = base.runs_dir.join(sanitize_component(prefix));
    write_json(&dir.join("ablation.json"), &report)?;
    write_text(&dir.join("ablation.txt"), &render_ablation_table(&report))?;
    Ok(report)
}

// ----------------------------------------------------------------- report

/// Published test-split F1 per model.
pub const REFERENCE_F1: [(&str, f64); 5] = [
    ("GPT-4", 0.39),
    ("Llama-3-70b", 0.33),
    ("Llama-3-8b", 0.18),
    ("Llama-3-8b (fine-tuned)", 0.19),
    ("BAP (fine-tuned)", 0.21),
];

/// Published share of test turns per category and the fraction of those
/// predicted exactly, for the strongest model.
pub const REFERENCE_CATEGORIES: [(Category, f64, f64); 3] = [
    (Category::Spatial, 0.7542, 0.2603),
    (Category::Shape, 0.2985, 0.1826),
    (Category::Anaphora, 0.4681, 0.2553),
];

/// Accepted F1 band for a reproduction of the strongest model.
pub const REPRODUCTION_F1_RANGE: (f64, f64) = (0.34, 0.44);
/// Accepted absolute deviation of category correct-fractions.
pub const REPRODUCTION_CATEGORY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCell {
    pub category: Category,
    pub utterance_fraction: f64,
    pub correct_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub label: String,
    pub split: Split,
    pub metrics: Metrics,
    pub net_metrics: Metrics,
    pub categories: Vec<CategoryCell>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionCheck {
    pub run_id: String,
    pub quantity: String,
    pub observed: Option<f64>,
    pub low: f64,
    pub high: f64,
    pub in_range: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub checks: Vec<ReproductionCheck>,
}

/// Range checks of one run against the published strongest-model numbers.
pub fn reproduction_checks(row: &ReportRow) -> Vec<ReproductionCheck> {
    let (lo, hi) = REPRODUCTION_F1_RANGE;
    let mut checks = vec![ReproductionCheck {
        run_id: row.run_id.clone(),
        quantity: "micro-F1".into(),
        observed: Some(row.metrics.f1),
        low: lo,
        high: hi,
        in_range: (lo..=hi).contains(&row.metrics.f1),
    }];
    for (cat, _, target) in REFERENCE_CATEGORIES {
        let observed = row.categories.iter().find(|c| c.category == cat).and_then(|c| c.correct_fraction);
        let (low, high) = (target - REPRODUCTION_CATEGORY_TOLERANCE, target + REPRODUCTION_CATEGORY_TOLERANCE);
        checks.push(ReproductionCheck {
            run_id: row.run_id.clone(),
            quantity: format!("{cat} correct"),
            observed,
            low,
            high,
            in_range: observed.is_some_and(|o| o >= low - 1e-12 && o <= high + 1e-12),
        });
    }
    checks
}

pub fn render_comparison(report: &ComparisonReport) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", v * 100.0));
    let mut labels: Vec<String> = report.rows.iter().map(|r| r.label.clone()).collect();
    labels.extend(REFERENCE_F1.iter().map(|(m, _)| format!("{m} [reference]")));
    let width = labels.iter().map(String::len).max().unwrap_or(5).max(5);

    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>8}  {:>9}  {:>9}  {:>9}\n",
        "Model", "P", "R", "F1", "F1 (net)", "spatial%", "shape%", "anaphora%"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 68)));
    for r in &report.rows {
        let cat = |c: Category| fmt_opt(r.categories.iter().find(|x| x.category == c).and_then(|x| x.correct_fraction));
        out.push_str(&format!(
            "{:<width$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>8.4}  {:>9}  {:>9}  {:>9}\n",
            r.label,
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1,
            r.net_metrics.f1,
            cat(Category::Spatial),
            cat(Category::Shape),
            cat(Category::Anaphora),
        ));
    }
    for (i, (model, f1)) in REFERENCE_F1.iter().enumerate() {
        let cat = |c: Category| {
            if i == 0 {
                fmt_opt(REFERENCE_CATEGORIES.iter().find(|x| x.0 == c).map(|x| x.2))
            } else {
                "-".to_string()
            }
        };
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>6.2}  {:>8}  {:>9}  {:>9}  {:>9}\n",
            format!("{model} [reference]"),
            "-",
            "-",
            f1,
            "-",
            cat(Category::Spatial),
            cat(Category::Shape),
            cat(Category::Anaphora),
        ));
    }
    if !report.checks.is_empty() {
        out.push_str("\nReproduction checks (test-split runs):\n");
        for c in &report.checks {
            out.push_str(&format!(
                "  {:<4} {:<24} {:<20} observed {:>8}  target [{:.4}, {:.4}]\n",
                if c.in_range { "ok" } else { "out" },
                c.run_id,
                c.quantity,
                c.observed.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                c.low,
                c.high
            ));
        }
    }
    out
}

/// Model x F1 comparison of stored runs next to the published numbers.
/// Writes `<runs_dir>/comparison.{json,txt}`.
pub fn cmd_report(runs_dir: &Path, run_ids: &[String], lexicons: &Lexicons) -> Result<ComparisonReport, PipelineError> {
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for id in run_ids {
        let manifest = RunManifest::load(runs_dir, id)?;
        let pairs = run_pairs(&manifest)?;
        let eval = evaluate_run(
            &RunArtifacts { pairs: pairs.clone(), responses: run_responses(runs_dir, &manifest)? },
            MatchMode::Multiset,
        );
        let analysis = analyze(&eval, &pairs, lexicons, None)?;
        let row = ReportRow {
            run_id: manifest.run_id.clone(),
            label: run_label(&manifest),
            split: manifest.split,
            metrics: eval.overall,
            net_metrics: eval.variant_net_gold,
            categories: analysis
                .categories
                .iter()
                .map(|c| CategoryCell {
                    category: c.category,
                    utterance_fraction: c.utterance_fraction,
                    correct_fraction: c.correct_fraction,
                })
                .collect(),
            complete: manifest.is_complete(),
        };
        if row.split == Split::Test {
            checks.extend(reproduction_checks(&row));
        }
        rows.push(row);
    }
    let report = ComparisonReport { rows, checks };
    write_json(&runs_dir.join("comparison.json"), &report)?;
    write_text(&runs_dir.join("comparison.txt"), &render_comparison(&report))?;
    Ok(report)
}
