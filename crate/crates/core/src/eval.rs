//! Scoring of predicted action sequences.
//!
//! An action matches a gold action when kind, color and all three
//! coordinates agree. True positives per turn are the size of the multiset
//! intersection of predicted and gold actions; order is ignored and each gold
//! action is matched at most once. Precision, recall and F1 are micro
//! averaged: counts are summed over turns before dividing.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TurnPair;
use crate::dsl::{extract_actions, Action, ParseDiagnostics};
use crate::world::{net_actions, GridSpec, ReplayMode, ViolationReason};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Order-insensitive multiset intersection.
    #[default]
    Multiset,
    /// Length of the common prefix of the two sequences.
    OrderedPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMatch {
    pub game_id: String,
    pub turn_index: usize,
    pub tp: usize,
    pub pred_count: usize,
    pub gold_count: usize,
    pub exact: bool,
    pub diagnostics: ParseDiagnostics,
}

impl TurnMatch {
    pub fn from_counts(tp: usize, pred_count: usize, gold_count: usize) -> Self {
        TurnMatch {
            game_id: String::new(),
            turn_index: 0,
            tp,
            pred_count,
            gold_count,
            exact: tp == pred_count && tp == gold_count,
            diagnostics: ParseDiagnostics::default(),
        }
    }

    pub fn with_turn(mut self, game_id: impl Into<String>, turn_index: usize) -> Self {
        self.game_id = game_id.into();
        self.turn_index = turn_index;
        self
    }

    pub fn metrics(&self) -> Metrics {
        micro_f1(std::slice::from_ref(self))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub turn_count: usize,
    pub tp_sum: usize,
    pub pred_sum: usize,
    pub gold_sum: usize,
}

impl Metrics {
    /// P, R and F1 from summed counts; any 0/0 is 0.
    pub fn from_sums(tp_sum: usize, pred_sum: usize, gold_sum: usize, turn_count: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp_sum, pred_sum);
        let recall = ratio(tp_sum, gold_sum);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Metrics { precision, recall, f1, turn_count, tp_sum, pred_sum, gold_sum }
    }
}

/// True positives between `pred` and `gold` under `mode`.
pub fn count_true_positives(pred: &[Action], gold: &[Action], mode: MatchMode) -> usize {
    match mode {
        MatchMode::Multiset => {
            let mut remaining: HashMap<&Action, usize> = HashMap::new();
            for g in gold {
                *remaining.entry(g).or_default() += 1;
            }
            pred.iter()
                .filter(|p| match remaining.get_mut(p) {
                    Some(n) if *n > 0 => {
                        *n -= 1;
                        true
                    }
                    _ => false,
                })
                .count()
        }
        MatchMode::OrderedPrefix => pred.iter().zip(gold).take_while(|(p, g)| p == g).count(),
    }
}

pub fn match_turn(pred: &[Action], gold: &[Action]) -> TurnMatch {
    match_turn_with(pred, gold, MatchMode::Multiset)
}

pub fn match_turn_with(pred: &[Action], gold: &[Action], mode: MatchMode) -> TurnMatch {
    TurnMatch::from_counts(count_true_positives(pred, gold, mode), pred.len(), gold.len())
}

pub fn micro_f1(matches: &[TurnMatch]) -> Metrics {
    let (tp, pred, gold) = matches
        .iter()
        .fold((0, 0, 0), |(t, p, g), m| (t + m.tp, p + m.pred_count, g + m.gold_count));
    Metrics::from_sums(tp, pred, gold, matches.len())
}

/// Constraint violations found when replaying a prediction on the
/// turn-start world. Reporting only; never affects scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnGrounding {
    pub game_id: String,
    pub turn_index: usize,
    pub violations: Vec<(usize, ViolationReason)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub match_mode: MatchMode,
    pub overall: Metrics,
    /// Scores against gold with cancelling place/pick pairs removed.
    pub variant_net_gold: Metrics,
    pub turns: Vec<TurnMatch>,
    /// Turns with no stored completion, scored as empty predictions.
    pub missing: Vec<(String, usize)>,
    pub grounding: Vec<TurnGrounding>,
}

impl EvalReport {
    pub fn exact_turns(&self) -> HashSet<(String, usize)> {
        self.turns
            .iter()
            .filter(|t| t.exact)
            .map(|t| (t.game_id.clone(), t.turn_index))
            .collect()
    }
}

/// Turns of one run plus whatever raw responses were stored for them.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub pairs: Vec<TurnPair>,
    pub responses: HashMap<(String, usize), String>,
}

/// Scores every turn of a run.
pub fn evaluate_run(run: &RunArtifacts, mode: MatchMode) -> EvalReport {
    let grounding_spec = GridSpec::prompt();
    let mut turns = Vec::with_capacity(run.pairs.len());
    let mut net_turns = Vec::with_capacity(run.pairs.len());
    let mut missing = Vec::new();
    let mut grounding = Vec::new();

    for pair in &run.pairs {
        let key = (pair.game_id.clone(), pair.turn_index);
        let (pred, diagnostics) = match run.responses.get(&key) {
            Some(text) => extract_actions(text),
            None => {
                missing.push(key.clone());
                (Vec::new(), ParseDiagnostics::default())
            }
        };
        let mut m = match_turn_with(&pred, &pair.gold_actions, mode).with_turn(&pair.game_id, pair.turn_index);
        m.diagnostics = diagnostics;
        turns.push(m);

        let net_gold = net_actions(&pair.gold_actions);
        net_turns.push(match_turn_with(&pred, &net_gold, mode));

        let start = pair.world_before.with_spec(grounding_spec.clone());
        let (_, violations) = start.apply_sequence(&pred, ReplayMode::Strict);
        if !violations.is_empty() {
            grounding.push(TurnGrounding {
                game_id: pair.game_id.clone(),
                turn_index: pair.turn_index,
                violations: violations.iter().map(|v| (v.turn_context.action_index, v.reason)).collect(),
            });
        }
    }

    EvalReport {
        match_mode: mode,
        overall: micro_f1(&turns),
        variant_net_gold: micro_f1(&net_turns),
        turns,
        missing,
        grounding,
    }
}
