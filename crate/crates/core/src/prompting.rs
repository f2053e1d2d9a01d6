//! Multi-part prompt assembly.
//!
//! A prompt is a fixed sequence of sections (system, environment, task,
//! context, other, closing). Each section comes from a template file named
//! in a `sections.manifest`; the context section holds the retrieved
//! examples and the closing section holds the test instruction. Sections
//! are separated by a blank line, and the separator belongs to the section
//! before it, so dropping a section removes exactly its recorded byte range.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::serialize_actions;
use crate::retrieval::Example;
use crate::world::net_actions;

pub const INCONTEXT_PLACEHOLDER: &str = "$INCONTEXT_SAMPLES";
pub const TEST_PLACEHOLDER: &str = "$TEST_INSTRUCTION";
pub const INSTRUCTION_PLACEHOLDER: &str = "$INSTRUCTION";
pub const OUTPUT_PLACEHOLDER: &str = "$OUTPUT";

const SECTION_SEPARATOR: &str = "\n\n";
const EXAMPLE_SEPARATOR: &str = "\n\n";

/// Name of the template set compiled into the crate.
pub const BUILTIN_TEMPLATE_SET: &str = "default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    System,
    Env,
    Task,
    Context,
    Other,
    Closing,
}

impl Section {
    pub const ALL: [Section; 6] =
        [Section::System, Section::Env, Section::Task, Section::Context, Section::Other, Section::Closing];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::System => "system",
            Section::Env => "env",
            Section::Task => "task",
            Section::Context => "context",
            Section::Other => "other",
            Section::Closing => "closing",
        }
    }
}

impl FromStr for Section {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Section::ALL
            .into_iter()
            .find(|sec| sec.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| PromptError::UnknownSection(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing template file {0}")]
    MissingTemplate(PathBuf),
    #[error("template manifest {path}:{line}: {message}")]
    BadManifest { path: PathBuf, line: usize, message: String },
    #[error("unknown prompt section `{0}`")]
    UnknownSection(String),
    #[error("template set `{0}` does not define `{1}`")]
    Incomplete(String, &'static str),
}

/// Which prompt sections are rendered and how many examples go in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptConfig {
    pub include_system: bool,
    pub include_env: bool,
    pub include_task: bool,
    pub include_other: bool,
    pub k_examples: usize,
    pub template_set: String,
    /// Render example outputs with cancelling place/pick pairs removed.
    #[serde(default)]
    pub net_clean_examples: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            include_system: true,
            include_env: true,
            include_task: true,
            include_other: true,
            k_examples: 3,
            template_set: BUILTIN_TEMPLATE_SET.to_string(),
            net_clean_examples: false,
        }
    }
}

impl PromptConfig {
    pub fn with_k(k: usize) -> Self {
        PromptConfig { k_examples: k, ..Self::default() }
    }

    pub fn includes(&self, section: Section) -> bool {
        match section {
            Section::System => self.include_system,
            Section::Env => self.include_env,
            Section::Task => self.include_task,
            Section::Other => self.include_other,
            Section::Context | Section::Closing => true,
        }
    }

    /// Enables exactly the named optional sections (`system,env,task,other`).
    /// Context and closing are always on.
    pub fn set_sections(&mut self, list: &str) -> Result<(), PromptError> {
        self.include_system = false;
        self.include_env = false;
        self.include_task = false;
        self.include_other = false;
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name.parse::<Section>()? {
                Section::System => self.include_system = true,
                Section::Env => self.include_env = true,
                Section::Task => self.include_task = true,
                Section::Other => self.include_other = true,
                Section::Context | Section::Closing => {}
            }
        }
        Ok(())
    }

    pub fn sections_string(&self) -> String {
        [Section::System, Section::Env, Section::Task, Section::Other]
            .into_iter()
            .filter(|s| self.includes(*s))
            .map(Section::as_str)
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Human label in the style of the ablation table rows.
    pub fn label(&self) -> String {
        const COUNTS: [&str; 6] = ["Zero", "One", "Two", "Three", "Four", "Five"];
        let samples = match COUNTS.get(self.k_examples) {
            Some(word) if self.k_examples == 1 => format!("{word} Sample"),
            Some(word) => format!("{word} Samples"),
            None => format!("{} Samples", self.k_examples),
        };
        let mut parts = Vec::new();
        if self.include_system {
            parts.push("System Info".to_string());
        }
        if self.include_env {
            parts.push("Env Info".to_string());
        }
        if self.include_task {
            parts.push("Task Info".to_string());
        }
        parts.push(format!("Context Info ({samples})"));
        if self.include_other {
            parts.push("Other Info".to_string());
        }
        parts.join(" + ")
    }

    /// Short identifier usable in file names, e.g. `system-env-task-other-k3`.
    pub fn slug(&self) -> String {
        let mut s = self.sections_string().replace(',', "-");
        if s.is_empty() {
            s.push_str("bare");
        }
        s.push_str(&format!("-k{}", self.k_examples));
        if self.net_clean_examples {
            s.push_str("-net");
        }
        if self.template_set != BUILTIN_TEMPLATE_SET {
            s.push('-');
            s.push_str(&crate::util::sanitize_component(&self.template_set));
        }
        s
    }
}

impl fmt::Display for PromptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The ten prompt configurations of the ablation study: k = 0..5 with all
/// sections, then at k = 3 without system, without env, without task, and
/// without both task and other.
pub fn ablation_configs() -> Vec<PromptConfig> {
    let mut rows: Vec<PromptConfig> = (0..=5).map(PromptConfig::with_k).collect();
    rows.push(PromptConfig { include_system: false, ..PromptConfig::with_k(3) });
    rows.push(PromptConfig { include_env: false, ..PromptConfig::with_k(3) });
    rows.push(PromptConfig { include_task: false, ..PromptConfig::with_k(3) });
    rows.push(PromptConfig { include_task: false, include_other: false, ..PromptConfig::with_k(3) });
    rows
}

/// Section templates plus the per-example and test-instruction blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub name: String,
    pub sections: Vec<(Section, String)>,
    pub example: String,
    pub test: String,
}

impl TemplateSet {
    /// The default template set compiled into the crate.
    pub fn builtin() -> Self {
        let t = |s: &str| s.trim_end_matches('\n').to_string();
        TemplateSet {
            name: BUILTIN_TEMPLATE_SET.to_string(),
            sections: vec![
                (Section::System, t(include_str!("../templates/default/system.txt"))),
                (Section::Env, t(include_str!("../templates/default/env.txt"))),
                (Section::Task, t(include_str!("../templates/default/task.txt"))),
                (Section::Context, t(include_str!("../templates/default/context.txt"))),
                (Section::Other, t(include_str!("../templates/default/other.txt"))),
                (Section::Closing, t(include_str!("../templates/default/closing.txt"))),
            ],
            example: t(include_str!("../templates/default/example.txt")),
            test: t(include_str!("../templates/default/test.txt")),
        }
    }

    /// Loads a template directory containing `sections.manifest`.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let manifest_path = dir.join("sections.manifest");
        let manifest = fs::read_to_string(&manifest_path)
            .map_err(|_| PromptError::MissingTemplate(manifest_path.clone()))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let mut sections = Vec::new();
        let mut example = None;
        let mut test = None;
        for (idx, line) in manifest.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| PromptError::BadManifest {
                path: manifest_path.clone(),
                line: idx + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let (Some(key), Some(file), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad("expected `<section> <file>`".into()));
            };
            let path = dir.join(file);
            let body = fs::read_to_string(&path)
                .map_err(|_| PromptError::MissingTemplate(path.clone()))?
                .trim_end_matches('\n')
                .to_string();
            match key {
                "example" => example = Some(body),
                "test" => test = Some(body),
                other => {
                    let section: Section = other.parse().map_err(|_| bad(format!("unknown key `{other}`")))?;
                    if sections.iter().any(|(s, _)| *s == section) {
                        return Err(bad(format!("section `{other}` listed twice")));
                    }
                    sections.push((section, body));
                }
            }
        }
        if !sections.iter().any(|(s, _)| *s == Section::Closing) {
            return Err(PromptError::Incomplete(name, "closing"));
        }
        Ok(TemplateSet {
            example: example.ok_or_else(|| PromptError::Incomplete(name.clone(), "example"))?,
            test: test.ok_or_else(|| PromptError::Incomplete(name.clone(), "test"))?,
            name,
            sections,
        })
    }

    /// `default` resolves to the built-in set; anything else is a directory,
    /// either as given or under `search_dir`.
    pub fn resolve(name: &str, search_dir: Option<&Path>) -> Result<Self, PromptError> {
        if name == BUILTIN_TEMPLATE_SET {
            return Ok(Self::builtin());
        }
        let direct = PathBuf::from(name);
        if direct.join("sections.manifest").exists() {
            return Self::load(&direct);
        }
        match search_dir {
            Some(dir) => Self::load(&dir.join(name)),
            None => Self::load(&direct),
        }
    }
}

/// A rendered prompt with per-section byte ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    /// Half-open byte ranges, in rendering order; together they cover `text`.
    pub section_offsets: Vec<(Section, (usize, usize))>,
    /// `(game_id, turn_index)` of each in-context example, in rank order.
    pub example_provenance: Vec<(String, usize)>,
    pub test_instruction: String,
}

impl PromptText {
    pub fn section_range(&self, section: Section) -> Option<(usize, usize)> {
        self.section_offsets.iter().find(|(s, _)| *s == section).map(|(_, r)| *r)
    }

    pub fn section_text(&self, section: Section) -> Option<&str> {
        self.section_range(section).map(|(a, b)| &self.text[a..b])
    }
}

/// Replaces `$NAME` placeholders in one left-to-right pass, so inserted text
/// is never rescanned.
fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let hit = vars
            .iter()
            .filter(|(name, _)| tail.starts_with(name))
            .max_by_key(|(name, _)| name.len());
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len()..];
            }
            None => {
                out.push('$');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_example(templates: &TemplateSet, example: &Example, net_clean: bool) -> String {
    let code = if net_clean {
        serialize_actions(&net_actions(&example.gold_actions))
    } else {
        serialize_actions(&example.gold_actions)
    };
    substitute(
        &templates.example,
        &[(INSTRUCTION_PLACEHOLDER, &example.instruction), (OUTPUT_PLACEHOLDER, &code)],
    )
}

/// Renders the prompt for one test instruction.
///
/// `examples` should already be in retrieval rank order; at most
/// `config.k_examples` of them are used.
pub fn render_prompt(
    config: &PromptConfig,
    templates: &TemplateSet,
    examples: &[Example],
    test_instruction: &str,
) -> PromptText {
    let used = &examples[..examples.len().min(config.k_examples)];
    let samples = used
        .iter()
        .map(|e| render_example(templates, e, config.net_clean_examples))
        .collect::<Vec<_>>()
        .join(EXAMPLE_SEPARATOR);
    let test_block = substitute(&templates.test, &[(INSTRUCTION_PLACEHOLDER, test_instruction)]);

    let bodies: Vec<(Section, String)> = templates
        .sections
        .iter()
        .filter(|(s, _)| config.includes(*s))
        .map(|(s, tpl)| {
            let body = substitute(tpl, &[(INCONTEXT_PLACEHOLDER, &samples), (TEST_PLACEHOLDER, &test_block)]);
            (*s, body)
        })
        .collect();

    let last_nonempty = bodies.iter().rposition(|(_, b)| !b.is_empty());
    let mut text = String::new();
    let mut section_offsets = Vec::with_capacity(bodies.len());
    for (i, (section, body)) in bodies.iter().enumerate() {
        let start = text.len();
        if !body.is_empty() {
            text.push_str(body);
            if Some(i) != last_nonempty {
                text.push_str(SECTION_SEPARATOR);
            }
        }
        section_offsets.push((*section, (start, text.len())));
    }

    PromptText {
        text,
        section_offsets,
        example_provenance: used.iter().map(|e| (e.game_id.clone(), e.turn_index)).collect(),
        test_instruction: test_instruction.to_string(),
    }
}

/// Counts per section, for reports.
pub fn section_lengths(prompt: &PromptText) -> BTreeMap<Section, usize> {
    prompt.section_offsets.iter().map(|(s, (a, b))| (*s, b - a)).collect()
}
