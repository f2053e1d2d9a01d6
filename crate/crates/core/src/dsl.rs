//! The place/pick action language.
//!
//! Builder actions are written as Python-style calls:
//!
//! ```text
//! call    := name "(" args ")" [";"]
//! name    := "place" | "pick"
//! args    := arg { "," arg } [","]
//! arg     := keyword "=" value | value
//! keyword := "color" | "x" | "y" | "z"
//! value   := quoted-string | identifier | integer
//! ```
//!
//! Positional arguments bind to `color, x, y, z` in that order; keyword
//! arguments may follow in any order. Single, double, backtick and
//! typographic quotes are all accepted around the color.
//!
//! Serialization is canonical: `place(color='green',x=0,y=1,z=4)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block colors available to the builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Orange,
    Purple,
    Yellow,
    Green,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Blue,
        Color::Orange,
        Color::Purple,
        Color::Yellow,
        Color::Green,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Yellow => "yellow",
            Color::Green => "green",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Color {
    type Err = ParseError;

    /// Case-insensitive, exact names only.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Color::ALL
            .into_iter()
            .find(|c| c.as_str() == lower)
            .ok_or_else(|| ParseError::UnknownColor(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Place,
    Pick,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Place => "place",
            ActionKind::Pick => "pick",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Integer grid cell `(x, y, z)`; `y` is height.
pub type Cell = (i32, i32, i32);

/// One grounded builder step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub color: Color,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Action {
    pub fn place(color: Color, x: i32, y: i32, z: i32) -> Self {
        Action { kind: ActionKind::Place, color, x, y, z }
    }

    pub fn pick(color: Color, x: i32, y: i32, z: i32) -> Self {
        Action { kind: ActionKind::Pick, color, x, y, z }
    }

    pub fn cell(&self) -> Cell {
        (self.x, self.y, self.z)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(color='{}',x={},y={},z={})",
            self.kind, self.color, self.x, self.y, self.z
        )
    }
}

impl FromStr for Action {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action_call(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("unknown color `{0}`")]
    UnknownColor(String),
    #[error("coordinate `{arg}` is not an integer: `{value}`")]
    NonIntegerCoordinate { arg: &'static str, value: String },
    #[error("missing argument `{0}`")]
    MissingArgument(&'static str),
    #[error("malformed call: {0}")]
    Syntax(String),
}

/// Canonical form: single quotes, no spaces, fixed argument order.
pub fn serialize_action(a: &Action) -> String {
    a.to_string()
}

/// Serializes a sequence one call per line.
pub fn serialize_actions(actions: &[Action]) -> String {
    let mut out = String::new();
    for (i, a) in actions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&serialize_action(a));
    }
    out
}

const QUOTES: [char; 7] = ['\'', '"', '`', '\u{2018}', '\u{2019}', '\u{201c}', '\u{201d}'];
const SLOTS: [&str; 4] = ["color", "x", "y", "z"];

/// Parses a single call such as `place(color='green', x=0, y=1, z=4)`.
pub fn parse_action_call(text: &str) -> Result<Action, ParseError> {
    let text = text.trim();
    let text = text.strip_suffix(';').unwrap_or(text).trim_end();
    let open = text
        .find('(')
        .ok_or_else(|| ParseError::Syntax("expected `(`".into()))?;
    let name = text[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
        return Err(ParseError::Syntax(format!("bad function name `{name}`")));
    }
    let kind = match name {
        "place" => ActionKind::Place,
        "pick" => ActionKind::Pick,
        other => return Err(ParseError::UnknownFunction(other.to_string())),
    };
    let rest = &text[open + 1..];
    let body = rest
        .strip_suffix(')')
        .ok_or_else(|| ParseError::Syntax("expected closing `)`".into()))?;

    let mut slots: [Option<String>; 4] = Default::default();
    let mut positional = 0usize;
    let mut seen_keyword = false;
    for raw in split_args(body)? {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        match keyword_split(raw) {
            Some((key, value)) => {
                let idx = SLOTS
                    .iter()
                    .position(|s| *s == key)
                    .ok_or_else(|| ParseError::Syntax(format!("unknown keyword `{key}`")))?;
                if slots[idx].is_some() {
                    return Err(ParseError::Syntax(format!("duplicate argument `{key}`")));
                }
                slots[idx] = Some(value.trim().to_string());
                seen_keyword = true;
            }
            None => {
                if seen_keyword {
                    return Err(ParseError::Syntax(
                        "positional argument after keyword argument".into(),
                    ));
                }
                if positional >= SLOTS.len() {
                    return Err(ParseError::Syntax("too many arguments".into()));
                }
                slots[positional] = Some(raw.to_string());
                positional += 1;
            }
        }
    }

    let color_raw = slots[0].take().ok_or(ParseError::MissingArgument("color"))?;
    let color: Color = unquote(&color_raw).parse()?;
    let mut coords = [0i32; 3];
    for (i, coord) in coords.iter_mut().enumerate() {
        let arg = SLOTS[i + 1];
        let raw = slots[i + 1].take().ok_or(ParseError::MissingArgument(arg))?;
        *coord = unquote(&raw)
            .parse()
            .map_err(|_| ParseError::NonIntegerCoordinate { arg, value: raw.clone() })?;
    }
    Ok(Action { kind, color, x: coords[0], y: coords[1], z: coords[2] })
}

/// Splits on commas outside quotes.
fn split_args(body: &str) -> Result<Vec<&str>, ParseError> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut in_quote = false;
    for (i, c) in body.char_indices() {
        if QUOTES.contains(&c) {
            in_quote = !in_quote;
        } else if c == ',' && !in_quote {
            parts.push(&body[start..i]);
            start = i + 1;
        } else if (c == '(' || c == ')') && !in_quote {
            return Err(ParseError::Syntax("nested parentheses".into()));
        }
    }
    if in_quote {
        return Err(ParseError::Syntax("unterminated quote".into()));
    }
    parts.push(&body[start..]);
    Ok(parts)
}

fn keyword_split(arg: &str) -> Option<(&str, &str)> {
    let eq = arg.find('=')?;
    let key = arg[..eq].trim();
    if key.is_empty() || !key.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return None;
    }
    Some((key, &arg[eq + 1..]))
}

fn unquote(s: &str) -> &str {
    s.trim().trim_matches(|c| QUOTES.contains(&c)).trim()
}

/// Bookkeeping from [`extract_actions`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub ignored_line_count: usize,
    pub truncated_at_new_instruction: bool,
    pub malformed_call_count: usize,
    pub notes: Vec<(usize, String)>,
}

/// Pulls action calls out of raw model output.
///
/// Lines are scanned in order after code-fence lines are dropped. Lines
/// holding one or more calls contribute their calls; anything else is
/// counted as ignored. Once at least one action has been collected, a line
/// that starts a new `Instruction`/`Output`/`Mission has started` block
/// ends the scan. Never fails.
pub fn extract_actions(response: &str) -> (Vec<Action>, ParseDiagnostics) {
    let mut actions = Vec::new();
    let mut diag = ParseDiagnostics::default();

    for (idx, line) in response.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("```") {
            continue;
        }
        if !actions.is_empty() && is_block_label(trimmed) {
            diag.truncated_at_new_instruction = true;
            diag.notes
                .push((line_no, "new instruction block; stopped scanning".into()));
            break;
        }
        let candidate = strip_line_decoration(trimmed);
        let calls = split_calls(candidate);
        if calls.is_empty() {
            diag.ignored_line_count += 1;
            continue;
        }
        for call in calls {
            match parse_action_call(call) {
                Ok(a) => actions.push(a),
                Err(e) => {
                    diag.malformed_call_count += 1;
                    diag.notes.push((line_no, e.to_string()));
                }
            }
        }
    }
    (actions, diag)
}

/// Like [`extract_actions`] but over raw bytes, decoding lossily.
pub fn extract_actions_bytes(response: &[u8]) -> (Vec<Action>, ParseDiagnostics) {
    extract_actions(&String::from_utf8_lossy(response))
}

fn is_block_label(line: &str) -> bool {
    let stripped = line
        .trim_start_matches(|c: char| c == '#' || c == '*' || c == '>' || c.is_whitespace())
        .to_ascii_lowercase();
    ["instruction", "test_instruction", "output", "mission has started"]
        .iter()
        .any(|label| {
            stripped.starts_with(label)
                && !stripped[label.len()..]
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_alphanumeric() || c == '_')
        })
}

/// Drops list bullets, inline-code backticks, and an `Output:` prefix.
fn strip_line_decoration(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        if let Some(rest) = s.strip_prefix(['-', '*', '\u{2022}']) {
            s = rest.trim_start();
        }
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
                s = rest.trim_start();
            }
        }
        for label in ["Output:", "output:", "OUTPUT:"] {
            if let Some(rest) = s.strip_prefix(label) {
                s = rest.trim_start();
            }
        }
        if s.len() >= 2 && s.starts_with('`') && s.ends_with('`') {
            s = s[1..s.len() - 1].trim();
        }
        if s == before {
            return s;
        }
    }
}

/// Splits a line into call-shaped segments (`ident(...)`), separated by `;`.
/// Returns empty when any segment is not call-shaped.
fn split_calls(line: &str) -> Vec<&str> {
    let segments: Vec<&str> = line
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if segments.is_empty() || !segments.iter().all(|s| looks_like_call(s)) {
        return Vec::new();
    }
    segments
}

fn looks_like_call(s: &str) -> bool {
    let Some(open) = s.find('(') else { return false };
    let name = s[..open].trim_end();
    !name.is_empty()
        && name.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && s.ends_with(')')
}
