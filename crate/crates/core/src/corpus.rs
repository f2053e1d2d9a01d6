//! Dialogue games in the normalized JSONL schema and their conversion into
//! instruction / gold-action turn pairs.
//!
//! One game per line:
//!
//! ```json
//! {"game_id":"g1","split":"test","events":[
//!   {"kind":"utterance","speaker":"architect","text":"place a green block"},
//!   {"kind":"builder_action","action":{"kind":"place","color":"green","x":0,"y":1,"z":4}}]}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dsl::{Action, ActionKind, Color};
use crate::world::{GridSpec, ReplayMode, TurnContext, Violation, WorldState};

/// Separator placed between aggregated utterances.
pub const UTTERANCE_SEPARATOR: &str = ". ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "val" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::UnknownSplit(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Architect,
    Builder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Utterance { speaker: Speaker, text: String },
    BuilderAction { action: Action },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueGame {
    pub game_id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_structure_id: Option<String>,
    pub events: Vec<Event>,
}

/// One aggregated instruction and the builder-action block that followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnPair {
    pub game_id: String,
    pub turn_index: usize,
    pub instruction: String,
    pub gold_actions: Vec<Action>,
    /// World reached by leniently replaying all earlier turns of the game.
    pub world_before: WorldState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub game_count: usize,
    pub pair_count: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{source_file}:{line}: schema violation in `{field}`: {message}")]
    SchemaViolation { source_file: PathBuf, line: usize, field: String, message: String },
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
}

/// A record that could not be loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub source_file: PathBuf,
    /// 1-based line number, which is also the record index within the file.
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn into_error(self) -> CorpusError {
        CorpusError::SchemaViolation {
            source_file: self.source_file,
            line: self.line,
            field: self.field,
            message: self.message,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedCorpus {
    pub games: Vec<DialogueGame>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Lists the `.jsonl` files behind `path` in name order.
pub fn corpus_files(path: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "jsonl") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every game of `split`. Bad records become diagnostics.
pub fn load_corpus(path: &Path, split: Split) -> Result<LoadedCorpus, CorpusError> {
    let mut all = load_all(path)?;
    all.games.retain(|g| g.split == split);
    Ok(all)
}

/// Loads all splits. Bad records become diagnostics.
pub fn load_all(path: &Path) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    let mut seen: HashSet<(Split, String)> = HashSet::new();
    for file in corpus_files(path)? {
        let text = fs::read_to_string(&file)
            .map_err(|source| CorpusError::Io { path: file.clone(), source })?;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_record(line) {
                Ok(game) => {
                    if seen.insert((game.split, game.game_id.clone())) {
                        out.games.push(game);
                    } else {
                        out.diagnostics.push(Diagnostic {
                            source_file: file.clone(),
                            line: idx + 1,
                            field: "game_id".into(),
                            message: format!("duplicate game_id `{}` in split", game.game_id),
                        });
                    }
                }
                Err((field, message)) => out.diagnostics.push(Diagnostic {
                    source_file: file.clone(),
                    line: idx + 1,
                    field,
                    message,
                }),
            }
        }
    }
    Ok(out)
}

/// Like [`load_all`] but the first bad record is an error.
pub fn load_all_strict(path: &Path) -> Result<Vec<DialogueGame>, CorpusError> {
    let mut loaded = load_all(path)?;
    if !loaded.diagnostics.is_empty() {
        return Err(loaded.diagnostics.swap_remove(0).into_error());
    }
    Ok(loaded.games)
}

type FieldError = (String, String);

/// Parses and validates one JSONL record, naming the offending field on error.
pub fn parse_record(line: &str) -> Result<DialogueGame, FieldError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ("<record>".to_string(), format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ("<record>".to_string(), "record is not an object".to_string()))?;
    let err = |field: &str, msg: &str| (field.to_string(), msg.to_string());

    let game_id = match obj.get("game_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err(err("game_id", "empty")),
        Some(_) => return Err(err("game_id", "expected string")),
        None => return Err(err("game_id", "missing")),
    };
    let split = match obj.get("split") {
        Some(Value::String(s)) => s.parse::<Split>().map_err(|e| err("split", &e.to_string()))?,
        Some(_) => return Err(err("split", "expected string")),
        None => return Err(err("split", "missing")),
    };
    let target_structure_id = match obj.get("target_structure_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(err("target_structure_id", "expected string")),
    };
    let raw_events = match obj.get("events") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(err("events", "expected array")),
        None => return Err(err("events", "missing")),
    };
    let events = raw_events
        .iter()
        .enumerate()
        .map(|(i, ev)| parse_event(ev).map_err(|(f, m)| (format!("events[{i}].{f}"), m)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DialogueGame { game_id, split, target_structure_id, events })
}

fn parse_event(ev: &Value) -> Result<Event, FieldError> {
    let err = |field: &str, msg: String| (field.to_string(), msg);
    let obj = ev.as_object().ok_or_else(|| err("", "event is not an object".into()))?;
    match obj.get("kind").and_then(Value::as_str) {
        Some("utterance") => {
            if obj.contains_key("action") {
                return Err(err("action", "not allowed on utterance".into()));
            }
            let speaker = match obj.get("speaker").and_then(Value::as_str) {
                Some("architect") => Speaker::Architect,
                Some("builder") => Speaker::Builder,
                Some(other) => return Err(err("speaker", format!("unknown speaker `{other}`"))),
                None => return Err(err("speaker", "missing".into())),
            };
            let text = obj
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| err("text", "missing or not a string".into()))?;
            Ok(Event::Utterance { speaker, text: text.to_string() })
        }
        Some("builder_action") => {
            if obj.contains_key("text") || obj.contains_key("speaker") {
                return Err(err("text", "not allowed on builder_action".into()));
            }
            let a = obj
                .get("action")
                .and_then(Value::as_object)
                .ok_or_else(|| err("action", "missing or not an object".into()))?;
            let kind = match a.get("kind").and_then(Value::as_str) {
                Some("place") => ActionKind::Place,
                Some("pick") => ActionKind::Pick,
                other => return Err(err("action.kind", format!("expected place|pick, got {other:?}"))),
            };
            let color = a
                .get("color")
                .and_then(Value::as_str)
                .ok_or_else(|| err("action.color", "missing".into()))
                .and_then(|c| {
                    c.parse::<Color>().map_err(|_| err("action.color", format!("unknown color `{c}`")))
                })?;
            let coord = |name: &str| -> Result<i32, FieldError> {
                a.get(name)
                    .and_then(Value::as_i64)
                    .and_then(|v| i32::try_from(v).ok())
                    .ok_or_else(|| err(&format!("action.{name}"), "missing or not an integer".into()))
            };
            Ok(Event::BuilderAction {
                action: Action { kind, color, x: coord("x")?, y: coord("y")?, z: coord("z")? },
            })
        }
        Some(other) => Err(err("kind", format!("unknown event kind `{other}`"))),
        None => Err(err("kind", "missing".into())),
    }
}

/// Serializes a game as one normalized JSONL line (no trailing newline).
pub fn to_jsonl_line(game: &DialogueGame) -> String {
    serde_json::to_string(game).expect("game serializes")
}

/// Splits a game into turn pairs with gold replay on the corpus grid.
pub fn aggregate_turns(game: &DialogueGame) -> Vec<TurnPair> {
    aggregate_turns_with(game, &GridSpec::corpus()).0
}

/// Splits a game into turn pairs, replaying gold actions leniently on `spec`
/// to fill `world_before`. Replay violations are returned, not fatal.
pub fn aggregate_turns_with(game: &DialogueGame, spec: &GridSpec) -> (Vec<TurnPair>, Vec<Violation>) {
    let mut pairs = Vec::new();
    let mut violations = Vec::new();
    let mut world = WorldState::new(spec.clone());
    let mut utterances: Vec<&str> = Vec::new();
    let mut block: Vec<Action> = Vec::new();

    let mut flush = |utterances: &mut Vec<&str>, block: &mut Vec<Action>, world: &mut WorldState| {
        if block.is_empty() {
            return;
        }
        let turn_index = pairs.len();
        let gold_actions = std::mem::take(block);
        let (next, vs) = world.apply_sequence(&gold_actions, ReplayMode::Lenient);
        violations.extend(vs.into_iter().map(|mut v| {
            v.turn_context = TurnContext {
                game_id: Some(game.game_id.clone()),
                turn_index: Some(turn_index),
                action_index: v.turn_context.action_index,
            };
            v
        }));
        pairs.push(TurnPair {
            game_id: game.game_id.clone(),
            turn_index,
            instruction: utterances.join(UTTERANCE_SEPARATOR),
            gold_actions,
            world_before: std::mem::replace(world, next),
        });
        utterances.clear();
    };

    for event in &game.events {
        match event {
            Event::Utterance { text, .. } => {
                flush(&mut utterances, &mut block, &mut world);
                utterances.push(text.trim());
            }
            Event::BuilderAction { action } => block.push(*action),
        }
    }
    flush(&mut utterances, &mut block, &mut world);
    (pairs, violations)
}

/// Turn pairs of every game, in game order.
pub fn all_pairs(games: &[DialogueGame]) -> Vec<TurnPair> {
    games.iter().flat_map(aggregate_turns).collect()
}

pub fn split_stats(split: Split, games: &[DialogueGame]) -> SplitStats {
    SplitStats {
        split,
        game_count: games.len(),
        pair_count: games.iter().map(|g| aggregate_turns(g).len()).sum(),
    }
}
