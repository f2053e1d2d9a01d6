//! Error analysis: lexicon-based instruction categories, builder-mistake
//! statistics and manual annotation import.
//!
//! Categories are computed over turns (aggregated instructions), not over
//! individual utterances. A turn counts as correct when its prediction
//! matches gold exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TurnPair;
use crate::eval::EvalReport;
use crate::world::{detect_builder_mistakes, MistakeReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Spatial,
    Shape,
    Anaphora,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Spatial, Category::Shape, Category::Anaphora];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Spatial => "spatial",
            Category::Shape => "shape",
            Category::Anaphora => "anaphora",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AnalysisError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: lexicon has no terms")]
    EmptyLexicon { path: PathBuf },
    #[error("{path}:{line}: bad term {term:?}")]
    BadTerm { path: PathBuf, line: usize, term: String },
    #[error("evaluation report does not line up with the turns ({0})")]
    Misaligned(String),
    #[error("annotation file {path}: {message}")]
    Annotation { path: PathBuf, message: String },
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub category: Category,
    pub terms: BTreeSet<String>,
    pub source: Option<PathBuf>,
}

impl Lexicon {
    pub fn new<I, S>(category: Category, terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Lexicon {
            category,
            terms: terms.into_iter().map(|t| tokenize(t.as_ref()).join(" ")).filter(|t| !t.is_empty()).collect(),
            source: None,
        }
    }

    /// Parses the one-term-per-line format. `#` starts a comment.
    pub fn parse(category: Category, text: &str, source: &Path) -> Result<Self, AnalysisError> {
        let mut terms = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let normalized = tokenize(line).join(" ");
            if normalized.is_empty() {
                return Err(AnalysisError::BadTerm { path: source.into(), line: i + 1, term: line.into() });
            }
            terms.insert(normalized);
        }
        if terms.is_empty() {
            return Err(AnalysisError::EmptyLexicon { path: source.into() });
        }
        Ok(Lexicon { category, terms, source: Some(source.into()) })
    }

    pub fn load(category: Category, path: &Path) -> Result<Self, AnalysisError> {
        let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io { path: path.into(), source })?;
        Lexicon::parse(category, &text, path)
    }

    /// Whether any term occurs as a contiguous token run in `tokens`.
    pub fn hits(&self, tokens: &[String]) -> bool {
        self.terms.iter().any(|term| {
            let parts: Vec<&str> = term.split(' ').collect();
            tokens.windows(parts.len()).any(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
        })
    }

    pub fn matched_terms(&self, tokens: &[String]) -> Vec<String> {
        self.terms
            .iter()
            .filter(|term| {
                let parts: Vec<&str> = term.split(' ').collect();
                tokens.windows(parts.len()).any(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
            })
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicons {
    pub lexicons: Vec<Lexicon>,
}

const BUILTIN: [(Category, &str, &str); 3] = [
    (Category::Spatial, "spatial.txt", include_str!("../lexicons/spatial.txt")),
    (Category::Shape, "shape.txt", include_str!("../lexicons/shape.txt")),
    (Category::Anaphora, "anaphora.txt", include_str!("../lexicons/anaphora.txt")),
];

impl Lexicons {
    pub fn file_name(category: Category) -> &'static str {
        BUILTIN.iter().find(|(c, _, _)| *c == category).map(|(_, f, _)| *f).expect("every category has a file")
    }

    /// The seed lexicons shipped with the crate.
    pub fn builtin() -> Self {
        Lexicons {
            lexicons: BUILTIN
                .iter()
                .map(|(c, f, text)| Lexicon::parse(*c, text, Path::new(f)).expect("builtin lexicon parses"))
                .collect(),
        }
    }

    /// Loads `spatial.txt`, `shape.txt` and `anaphora.txt` from `dir`.
    /// A missing file falls back to the builtin list for that category.
    pub fn load_dir(dir: &Path) -> Result<Self, AnalysisError> {
        let builtin = Lexicons::builtin();
        let mut lexicons = Vec::new();
        for (category, file, _) in BUILTIN {
            let path = dir.join(file);
            if path.exists() {
                lexicons.push(Lexicon::load(category, &path)?);
            } else {
                log::warn!("{} not found; using builtin {category} lexicon", path.display());
                lexicons.push(builtin.get(category).expect("builtin").clone());
            }
        }
        Ok(Lexicons { lexicons })
    }

    pub fn get(&self, category: Category) -> Option<&Lexicon> {
        self.lexicons.iter().find(|l| l.category == category)
    }
}

pub fn categorize(instruction: &str, lexicons: &Lexicons) -> BTreeSet<Category> {
    let tokens = tokenize(instruction);
    lexicons.lexicons.iter().filter(|l| l.hits(&tokens)).map(|l| l.category).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: Category,
    pub total_turns: usize,
    pub category_turns: Vec<(String, usize)>,
    pub correct_turns: Vec<(String, usize)>,
    pub utterance_fraction: f64,
    /// `None` when no turn falls in the category.
    pub correct_fraction: Option<f64>,
}

fn check_alignment(report: &EvalReport, pairs: &[TurnPair]) -> Result<(), AnalysisError> {
    if report.turns.len() != pairs.len() {
        return Err(AnalysisError::Misaligned(format!(
            "{} scored turns vs {} pairs",
            report.turns.len(),
            pairs.len()
        )));
    }
    for (t, p) in report.turns.iter().zip(pairs) {
        if t.game_id != p.game_id || t.turn_index != p.turn_index {
            return Err(AnalysisError::Misaligned(format!(
                "{}#{} vs {}#{}",
                t.game_id, t.turn_index, p.game_id, p.turn_index
            )));
        }
    }
    Ok(())
}

pub fn category_report(
    report: &EvalReport,
    pairs: &[TurnPair],
    lexicons: &Lexicons,
) -> Result<Vec<CategoryStats>, AnalysisError> {
    check_alignment(report, pairs)?;
    let total = pairs.len();
    let mut stats: Vec<CategoryStats> = lexicons
        .lexicons
        .iter()
        .map(|l| CategoryStats {
            category: l.category,
            total_turns: total,
            category_turns: Vec::new(),
            correct_turns: Vec::new(),
            utterance_fraction: 0.0,
            correct_fraction: None,
        })
        .collect();
    for (turn, pair) in report.turns.iter().zip(pairs) {
        let cats = categorize(&pair.instruction, lexicons);
        for s in stats.iter_mut().filter(|s| cats.contains(&s.category)) {
            let id = (pair.game_id.clone(), pair.turn_index);
            if turn.exact {
                s.correct_turns.push(id.clone());
            }
            s.category_turns.push(id);
        }
    }
    for s in &mut stats {
        let n = s.category_turns.len();
        s.utterance_fraction = if total == 0 { 0.0 } else { n as f64 / total as f64 };
        s.correct_fraction = (n > 0).then(|| s.correct_turns.len() as f64 / n as f64);
    }
    Ok(stats)
}

/// One row of a manual annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub game_id: String,
    pub turn_index: usize,
    pub label: String,
}

/// Reads a `game_id,turn_index,label` CSV. A header row is allowed.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, AnalysisError> {
    let err = |message: String| AnalysisError::Annotation { path: path.into(), message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 3 {
            return Err(err(format!("row {} has {} fields, expected 3", i + 1, rec.len())));
        }
        let turn_index = match rec[1].parse::<usize>() {
            Ok(n) => n,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(err(format!("row {}: turn_index {:?} is not an integer", i + 1, &rec[1]))),
        };
        out.push(Annotation { game_id: rec[0].to_string(), turn_index, label: rec[2].to_string() });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: String,
    pub turns: Vec<(String, usize)>,
    pub correct: usize,
    /// Annotated turns not present in the run.
    pub unmatched: Vec<(String, usize)>,
}

pub fn annotation_report(annotations: &[Annotation], report: &EvalReport) -> Vec<LabelStats> {
    let exact: HashMap<(String, usize), bool> =
        report.turns.iter().map(|t| ((t.game_id.clone(), t.turn_index), t.exact)).collect();
    let mut by_label: BTreeMap<&str, LabelStats> = BTreeMap::new();
    for a in annotations {
        let entry = by_label.entry(&a.label).or_insert_with(|| LabelStats {
            label: a.label.clone(),
            turns: Vec::new(),
            correct: 0,
            unmatched: Vec::new(),
        });
        let id = (a.game_id.clone(), a.turn_index);
        match exact.get(&id) {
            Some(&ok) => {
                entry.correct += usize::from(ok);
                entry.turns.push(id);
            }
            None => entry.unmatched.push(id),
        }
    }
    by_label.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub categories: Vec<CategoryStats>,
    pub mistakes: MistakeReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<LabelStats>>,
}

pub fn analyze(
    report: &EvalReport,
    pairs: &[TurnPair],
    lexicons: &Lexicons,
    annotations: Option<&[Annotation]>,
) -> Result<AnalysisReport, AnalysisError> {
    Ok(AnalysisReport {
        categories: category_report(report, pairs, lexicons)?,
        mistakes: detect_builder_mistakes(pairs),
        annotations: annotations.map(|a| annotation_report(a, report)),
    })
}

pub fn render_analysis_table(report: &AnalysisReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>8} {:>10} {:>10} {:>10}\n", "Category", "Turns", "Share", "Correct", "Accuracy"));
    for s in &report.categories {
        let acc = s.correct_fraction.map_or("n/a".to_string(), |f| format!("{:.2}%", f * 100.0));
        out.push_str(&format!(
            "{:<10} {:>8} {:>9.2}% {:>10} {:>10}\n",
            s.category.as_str(),
            s.category_turns.len(),
            s.utterance_fraction * 100.0,
            s.correct_turns.len(),
            acc
        ));
    }
    let m = &report.mistakes;
    out.push_str(&format!(
        "\nBuilder mistakes: {}/{} turns ({:.2}%)\n",
        m.flagged_count,
        m.turn_count,
        m.flagged_fraction * 100.0
    ));
    if let Some(labels) = &report.annotations {
        out.push_str(&format!("\n{:<24} {:>8} {:>10} {:>10}\n", "Annotation", "Turns", "Correct", "Unmatched"));
        for l in labels {
            out.push_str(&format!("{:<24} {:>8} {:>10} {:>10}\n", l.label, l.turns.len(), l.correct, l.unmatched.len()));
        }
    }
    out
}
