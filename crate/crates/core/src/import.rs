//! Best-effort importer for raw dialogue logs.
//!
//! Two input shapes are understood:
//!
//! * transcripts, one event per line:
//!   `<Architect> text`, `<Builder> text`,
//!   `Builder puts down a red block at X:0 Y:1 Z:4`,
//!   `Builder picks up a red block at X:0 Y:1 Z:4`;
//! * observation logs (`*observations.json`) holding a `WorldStates` array of
//!   snapshots with `ChatHistory` and `BlocksInGrid`. Consecutive snapshots
//!   are diffed into utterances and place/pick actions.
//!
//! A raw root directory holds the game files (searched recursively) and a
//! `splits.json` mapping split names to lists of game ids.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::corpus::{DialogueGame, Event, Speaker, Split};
use crate::dsl::{Action, ActionKind, Cell, Color};

pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}: no {SPLITS_FILE} found")]
    NoSplits(PathBuf),
    #[error("game `{0}` is listed in the splits file but no log was found")]
    MissingGame(String),
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> ImportError {
    ImportError::Parse { path: path.into(), line, message: message.into() }
}

/// `<Architect> hello` / `Architect: hello`.
fn parse_chat(line: &str) -> Option<(Speaker, String)> {
    let line = line.trim();
    let (who, rest) = if let Some(stripped) = line.strip_prefix('<') {
        stripped.split_once('>')?
    } else {
        line.split_once(':')?
    };
    let speaker = match who.trim().to_ascii_lowercase().as_str() {
        "architect" | "a" => Speaker::Architect,
        "builder" | "b" => Speaker::Builder,
        _ => return None,
    };
    Some((speaker, rest.trim().to_string()))
}

/// `Builder puts down a red block at X:0 Y:1 Z:4`.
fn parse_action_line(line: &str) -> Option<Action> {
    let lower = line.trim().to_ascii_lowercase();
    let rest = lower.strip_prefix("builder ")?;
    let (kind, rest) = if let Some(r) = rest.strip_prefix("puts down ") {
        (ActionKind::Place, r)
    } else if let Some(r) = rest.strip_prefix("picks up ") {
        (ActionKind::Pick, r)
    } else {
        return None;
    };
    let (what, coords) = rest.split_once(" at ")?;
    let color: Color = what.split_whitespace().find_map(|w| w.parse().ok())?;
    let mut xyz = [None; 3];
    for part in coords.split_whitespace() {
        let (axis, value) = part.split_once(':')?;
        let slot = match axis {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => return None,
        };
        xyz[slot] = Some(value.trim_end_matches([',', '.']).parse().ok()?);
    }
    Some(Action { kind, color, x: xyz[0]?, y: xyz[1]?, z: xyz[2]? })
}

/// Parses a transcript. Blank lines are skipped; anything else unrecognised
/// is an error naming the line.
pub fn parse_transcript(text: &str, path: &Path) -> Result<Vec<Event>, ImportError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(action) = parse_action_line(line) {
            events.push(Event::BuilderAction { action });
        } else if let Some((speaker, text)) = parse_chat(line) {
            events.push(Event::Utterance { speaker, text });
        } else {
            return Err(parse_err(path, i + 1, format!("unrecognised line {:?}", line.trim())));
        }
    }
    Ok(events)
}

fn block_color(block: &Value) -> Option<Color> {
    if let Some(c) = block.get("Colour").or_else(|| block.get("Color")).and_then(Value::as_str) {
        return c.parse().ok();
    }
    // e.g. "cwc_minecraft_red_rn"
    let ty = block.get("Type").and_then(Value::as_str)?;
    ty.split(|c: char| !c.is_ascii_alphabetic()).find_map(|w| w.parse().ok())
}

fn block_cell(block: &Value) -> Option<Cell> {
    let c = block.get("AbsoluteCoordinates").unwrap_or(block);
    let get = |k: &str| c.get(k).and_then(Value::as_i64).and_then(|v| i32::try_from(v).ok());
    Some((get("X")?, get("Y")?, get("Z")?))
}

/// Diffs consecutive world snapshots into events. New chat lines of a
/// snapshot come before its block changes; removals come before additions.
pub fn parse_observations(json: &str, path: &Path) -> Result<Vec<Event>, ImportError> {
    let root: Value = serde_json::from_str(json).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
    let states = root
        .get("WorldStates")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, 1, "missing WorldStates array"))?;
    let mut events = Vec::new();
    let mut chat_seen = 0usize;
    let mut grid: BTreeMap<Cell, Color> = BTreeMap::new();
    for (si, state) in states.iter().enumerate() {
        let bad = |m: String| parse_err(path, 1, format!("WorldStates[{si}]: {m}"));
        let chat = state.get("ChatHistory").and_then(Value::as_array).map(Vec::as_slice).unwrap_or(&[]);
        for line in chat.iter().skip(chat_seen) {
            let line = line.as_str().ok_or_else(|| bad("non-string chat line".into()))?;
            match parse_chat(line) {
                Some((speaker, text)) => events.push(Event::Utterance { speaker, text }),
                None => log::warn!("{}: skipping chat line {line:?}", path.display()),
            }
        }
        chat_seen = chat_seen.max(chat.len());

        let Some(blocks) = state.get("BlocksInGrid").and_then(Value::as_array) else { continue };
        let mut next = BTreeMap::new();
        for b in blocks {
            let cell = block_cell(b).ok_or_else(|| bad(format!("block without coordinates: {b}")))?;
            let color = block_color(b).ok_or_else(|| bad(format!("block with unknown color: {b}")))?;
            next.insert(cell, color);
        }
        for (&(x, y, z), &color) in &grid {
            if next.get(&(x, y, z)) != Some(&color) {
                events.push(Event::BuilderAction { action: Action::pick(color, x, y, z) });
            }
        }
        for (&(x, y, z), &color) in &next {
            if grid.get(&(x, y, z)) != Some(&color) {
                events.push(Event::BuilderAction { action: Action::place(color, x, y, z) });
            }
        }
        grid = next;
    }
    Ok(events)
}

/// Structure id embedded in game ids such as `B1-A3-C8-1522432497386`.
pub fn structure_id(game_id: &str) -> Option<String> {
    game_id
        .split(['-', '_'])
        .find(|p| p.len() > 1 && p.starts_with('C') && p[1..].bytes().all(|b| b.is_ascii_digit()))
        .map(str::to_string)
}

fn collect_logs(dir: &Path, out: &mut HashMap<String, PathBuf>) -> Result<(), ImportError> {
    let io = |source| ImportError::Io { path: dir.into(), source };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).map_err(io)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(io)?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_logs(&p, out)?;
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let id = if name.ends_with("observations.json") {
            p.parent().and_then(|d| d.file_name()).and_then(|n| n.to_str()).map(str::to_string)
        } else if name.ends_with(".txt") {
            p.file_stem().and_then(|n| n.to_str()).map(str::to_string)
        } else {
            None
        };
        if let Some(id) = id {
            out.entry(id).or_insert(p);
        }
    }
    Ok(())
}

pub fn import_file(path: &Path) -> Result<Vec<Event>, ImportError> {
    let text = fs::read_to_string(path).map_err(|source| ImportError::Io { path: path.into(), source })?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_observations(&text, path)
    } else {
        parse_transcript(&text, path)
    }
}

/// Imports every game listed in `<root>/splits.json`, ordered by split then
/// game id.
pub fn import_raw(root: &Path) -> Result<Vec<DialogueGame>, ImportError> {
    let splits_path = root.join(SPLITS_FILE);
    if !splits_path.is_file() {
        return Err(ImportError::NoSplits(root.into()));
    }
    let text =
        fs::read_to_string(&splits_path).map_err(|source| ImportError::Io { path: splits_path.clone(), source })?;
    let listing: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| parse_err(&splits_path, e.line(), e.to_string()))?;
    let mut logs = HashMap::new();
    collect_logs(root, &mut logs)?;

    let mut games = Vec::new();
    for (name, ids) in listing {
        let split: Split = name.parse().map_err(|_| parse_err(&splits_path, 1, format!("unknown split {name:?}")))?;
        for id in ids {
            let path = logs.get(&id).ok_or_else(|| ImportError::MissingGame(id.clone()))?;
            games.push(DialogueGame {
                target_structure_id: structure_id(&id),
                events: import_file(path)?,
                game_id: id,
                split,
            });
        }
    }
    games.sort_by(|a, b| (a.split, &a.game_id).cmp(&(b.split, &b.game_id)));
    Ok(games)
}

/// Whether `path` looks like a raw root rather than normalized JSONL.
pub fn is_raw_root(path: &Path) -> bool {
    path.is_dir() && path.join(SPLITS_FILE).is_file()
}
