//! Bounded voxel grid with per-color inventories.
//!
//! [`WorldState`] is a value: [`WorldState::apply`] returns a new state and
//! leaves the receiver untouched.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsl::{Action, ActionKind, Cell, Color};

/// Grid bounds and stock. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (i32, i32),
    pub y_range: (i32, i32),
    pub z_range: (i32, i32),
    pub colors: Vec<Color>,
    pub per_color_stock: u32,
    /// When set, a placed block must rest on the lowest level or touch an
    /// occupied face-neighbour.
    #[serde(default)]
    pub require_support: bool,
}

impl GridSpec {
    /// Bounds for replaying gold corpus data: `y` starts at 0.
    pub fn corpus() -> Self {
        GridSpec {
            x_range: (-5, 5),
            y_range: (0, 9),
            z_range: (-5, 5),
            colors: Color::ALL.to_vec(),
            per_color_stock: 20,
            require_support: false,
        }
    }

    /// Bounds as described to the model: ground level is `y = 1`.
    pub fn prompt() -> Self {
        GridSpec { y_range: (1, 9), ..Self::corpus() }
    }

    pub fn contains(&self, (x, y, z): Cell) -> bool {
        let within = |v: i32, (lo, hi): (i32, i32)| lo <= v && v <= hi;
        within(x, self.x_range) && within(y, self.y_range) && within(z, self.z_range)
    }

    pub fn volume(&self) -> u64 {
        let len = |(lo, hi): (i32, i32)| (hi - lo + 1).max(0) as u64;
        len(self.x_range) * len(self.y_range) * len(self.z_range)
    }

    pub fn total_stock(&self) -> u64 {
        self.colors.len() as u64 * self.per_color_stock as u64
    }

    pub fn is_valid(&self) -> bool {
        let ok = |(lo, hi): (i32, i32)| lo <= hi;
        ok(self.x_range)
            && ok(self.y_range)
            && ok(self.z_range)
            && self.per_color_stock > 0
            && !self.colors.is_empty()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::corpus()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    OutOfBounds,
    CellOccupied,
    CellEmpty,
    ColorMismatch,
    InventoryExhausted,
    Unsupported,
}

/// Where in a corpus or run a violation happened.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnContext {
    pub game_id: Option<String>,
    pub turn_index: Option<usize>,
    pub action_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub action: Action,
    pub reason: ViolationReason,
    pub turn_context: TurnContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Stop at the first violation.
    Strict,
    /// Skip violating actions and keep going.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    occupancy: BTreeMap<Cell, Color>,
    inventory: BTreeMap<Color, u32>,
    spec: GridSpec,
}

impl WorldState {
    pub fn new(spec: GridSpec) -> Self {
        let inventory = spec.colors.iter().map(|&c| (c, spec.per_color_stock)).collect();
        WorldState { occupancy: BTreeMap::new(), inventory, spec }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Same blocks and inventory under different rules. Existing blocks are
    /// kept even if the new grid would not admit them.
    pub fn with_spec(&self, spec: GridSpec) -> WorldState {
        WorldState { occupancy: self.occupancy.clone(), inventory: self.inventory.clone(), spec }
    }

    pub fn occupancy(&self) -> &BTreeMap<Cell, Color> {
        &self.occupancy
    }

    pub fn get(&self, cell: Cell) -> Option<Color> {
        self.occupancy.get(&cell).copied()
    }

    pub fn inventory(&self, color: Color) -> u32 {
        self.inventory.get(&color).copied().unwrap_or(0)
    }

    pub fn total_inventory(&self) -> u64 {
        self.inventory.values().map(|&n| n as u64).sum()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.len()
    }

    pub fn occupied_count_of(&self, color: Color) -> usize {
        self.occupancy.values().filter(|&&c| c == color).count()
    }

    /// Returns the reason `a` cannot be applied, if any.
    pub fn check(&self, a: &Action) -> Option<ViolationReason> {
        let cell = a.cell();
        if !self.spec.contains(cell) {
            return Some(ViolationReason::OutOfBounds);
        }
        match a.kind {
            ActionKind::Place => {
                if self.occupancy.contains_key(&cell) {
                    Some(ViolationReason::CellOccupied)
                } else if self.inventory(a.color) == 0 {
                    Some(ViolationReason::InventoryExhausted)
                } else if self.spec.require_support && !self.is_supported(cell) {
                    Some(ViolationReason::Unsupported)
                } else {
                    None
                }
            }
            ActionKind::Pick => match self.occupancy.get(&cell) {
                None => Some(ViolationReason::CellEmpty),
                Some(&c) if c != a.color => Some(ViolationReason::ColorMismatch),
                Some(_) => None,
            },
        }
    }

    fn is_supported(&self, (x, y, z): Cell) -> bool {
        if y == self.spec.y_range.0 {
            return true;
        }
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|(dx, dy, dz)| self.occupancy.contains_key(&(x + dx, y + dy, z + dz)))
    }

    /// Applies one action, returning the new state or the failed precondition.
    pub fn apply(&self, a: &Action) -> Result<WorldState, Violation> {
        let mut next = self.clone();
        next.apply_in_place(a).map(|()| next)
    }

    /// Mutating variant of [`apply`](Self::apply); on error `self` is unchanged.
    pub fn apply_in_place(&mut self, a: &Action) -> Result<(), Violation> {
        if let Some(reason) = self.check(a) {
            return Err(Violation { action: *a, reason, turn_context: TurnContext::default() });
        }
        let cell = a.cell();
        let stock = self.inventory.entry(a.color).or_insert(0);
        match a.kind {
            ActionKind::Place => {
                *stock -= 1;
                self.occupancy.insert(cell, a.color);
            }
            ActionKind::Pick => {
                *stock += 1;
                self.occupancy.remove(&cell);
            }
        }
        Ok(())
    }

    /// Applies `actions` in order. Violations carry their action index.
    pub fn apply_sequence(&self, actions: &[Action], mode: ReplayMode) -> (WorldState, Vec<Violation>) {
        let mut world = self.clone();
        let mut violations = Vec::new();
        for (i, a) in actions.iter().enumerate() {
            if let Err(mut v) = world.apply_in_place(a) {
                v.turn_context.action_index = i;
                violations.push(v);
                if mode == ReplayMode::Strict {
                    break;
                }
            }
        }
        (world, violations)
    }

    /// One `x y z color` line per occupied cell, in cell order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ((x, y, z), color) in &self.occupancy {
            let _ = writeln!(out, "{x} {y} {z} {color}");
        }
        out
    }
}

impl Default for WorldState {
    fn default() -> Self {
        WorldState::new(GridSpec::default())
    }
}

/// Removes place/pick pairs that cancel out.
///
/// A pick cancels the closest earlier surviving action on the same cell when
/// that action is a place of the same color. Survivors keep their relative
/// order. The result has no cancellable pair left, so the function is
/// idempotent.
pub fn net_actions(actions: &[Action]) -> Vec<Action> {
    let mut alive = vec![true; actions.len()];
    let mut per_cell: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, a) in actions.iter().enumerate() {
        let stack = per_cell.entry(a.cell()).or_default();
        if a.kind == ActionKind::Pick {
            if let Some(&top) = stack.last() {
                let prev = &actions[top];
                if prev.kind == ActionKind::Place && prev.color == a.color {
                    stack.pop();
                    alive[top] = false;
                    alive[i] = false;
                    continue;
                }
            }
        }
        stack.push(i);
    }
    actions
        .iter()
        .zip(alive)
        .filter_map(|(a, keep)| keep.then_some(*a))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMistake {
    pub game_id: String,
    pub turn_index: usize,
    pub flagged: bool,
    pub cancelled_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistakeReport {
    pub turns: Vec<TurnMistake>,
    pub flagged_count: usize,
    pub turn_count: usize,
    pub flagged_fraction: f64,
}

/// Flags every turn whose gold actions contain a cancelling place/pick pair.
pub fn detect_builder_mistakes(pairs: &[crate::corpus::TurnPair]) -> MistakeReport {
    let turns: Vec<TurnMistake> = pairs
        .iter()
        .map(|p| {
            let net = net_actions(&p.gold_actions);
            TurnMistake {
                game_id: p.game_id.clone(),
                turn_index: p.turn_index,
                flagged: net.len() != p.gold_actions.len(),
                cancelled_actions: p.gold_actions.len() - net.len(),
            }
        })
        .collect();
    let flagged_count = turns.iter().filter(|t| t.flagged).count();
    let turn_count = turns.len();
    let flagged_fraction = if turn_count == 0 { 0.0 } else { flagged_count as f64 / turn_count as f64 };
    MistakeReport { turns, flagged_count, turn_count, flagged_fraction }
}
