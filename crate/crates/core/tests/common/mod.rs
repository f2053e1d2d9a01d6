#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use bap_core::corpus::{to_jsonl_line, DialogueGame, Event, Speaker, Split};
use bap_core::dsl::{Action, Color};
use bap_core::world::{GridSpec, WorldState};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

const PHRASES: &[&str] = &[
    "put a {c} block on top of it",
    "build a {c} tower between the two columns",
    "make a small {c} square to the left",
    "now place some {c} blocks in a row",
    "add a {c} one next to that",
    "great. extend the {c} wall towards the back",
    "place {c} blocks in front of the structure",
    "build a {c} chair shape",
    "can you make a {c} circle",
    "start with a {c} block",
];

/// Random valid turn: 1-4 actions on top of `world`, optionally with a
/// place immediately undone by a pick.
fn turn_actions(rng: &mut StdRng, world: &mut WorldState, cancel: bool) -> Vec<Action> {
    let spec = world.spec().clone();
    let mut out = Vec::new();
    let n = rng.random_range(1..=4);
    let mut tries = 0;
    while out.len() < n && tries < 100 {
        tries += 1;
        let x = rng.random_range(spec.x_range.0..=spec.x_range.1);
        let z = rng.random_range(spec.z_range.0..=spec.z_range.1);
        let height = (1..=spec.y_range.1).take_while(|y| world.get((x, *y, z)).is_some()).count() as i32;
        let pick_top = height > 0 && rng.random_bool(0.2);
        let a = if pick_top {
            let y = height;
            Action::pick(world.get((x, y, z)).unwrap(), x, y, z)
        } else {
            let y = height + 1;
            if y > spec.y_range.1 {
                continue;
            }
            let colors: Vec<Color> = Color::ALL.iter().copied().filter(|c| world.inventory(*c) > 0).collect();
            let Some(&c) = colors.choose(rng) else { continue };
            Action::place(c, x, y, z)
        };
        if world.apply_in_place(&a).is_ok() {
            out.push(a);
        }
    }
    if cancel {
        for y in 1..=spec.y_range.1 {
            let cell = (spec.x_range.0, y, spec.z_range.0);
            if world.get(cell).is_none() {
                let c = Color::ALL.iter().copied().find(|c| world.inventory(*c) > 0).unwrap();
                let place = Action::place(c, cell.0, cell.1, cell.2);
                let pick = Action::pick(c, cell.0, cell.1, cell.2);
                if world.apply_in_place(&place).is_ok() && world.apply_in_place(&pick).is_ok() {
                    let at = rng.random_range(0..=out.len());
                    out.insert(at, pick);
                    out.insert(at, place);
                }
                break;
            }
        }
    }
    out
}

pub fn synthetic_game(rng: &mut StdRng, game_id: &str, split: Split, turns: usize, cancel_every: usize) -> DialogueGame {
    let mut world = WorldState::new(GridSpec::corpus());
    let mut events = Vec::new();
    for t in 0..turns {
        let color = Color::ALL.choose(rng).unwrap().as_str();
        let phrase = PHRASES.choose(rng).unwrap().replace("{c}", color);
        events.push(Event::Utterance { speaker: Speaker::Architect, text: phrase });
        if rng.random_bool(0.25) {
            events.push(Event::Utterance { speaker: Speaker::Builder, text: "ok".into() });
        }
        let cancel = cancel_every > 0 && t % cancel_every == cancel_every - 1;
        let mut actions = turn_actions(rng, &mut world, cancel);
        if actions.is_empty() {
            // full grid or stock: keep the turn by picking something back up
            let (&(x, y, z), &c) = world.occupancy().iter().next_back().unwrap();
            let a = Action::pick(c, x, y, z);
            world.apply_in_place(&a).unwrap();
            actions.push(a);
        }
        events.extend(actions.into_iter().map(|action| Event::BuilderAction { action }));
    }
    DialogueGame { game_id: game_id.into(), split, target_structure_id: Some(format!("C{}", rng.random_range(1..200))), events }
}

/// `(games, turns per game)` for train, dev and test.
pub fn synthetic_corpus(seed: u64, shape: [(usize, usize); 3]) -> Vec<DialogueGame> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut games = Vec::new();
    for (split, (n, turns)) in Split::ALL.into_iter().zip(shape) {
        for i in 0..n {
            let id = format!("B{}-A{}-{}-{:04}", i % 7 + 1, i % 5 + 1, split.as_str(), i);
            games.push(synthetic_game(&mut rng, &id, split, turns, 4));
        }
    }
    games
}

/// Writes `<dir>/corpus/{train,dev,test}.jsonl`.
pub fn write_corpus(dir: &Path, games: &[DialogueGame]) -> PathBuf {
    let root = dir.join("corpus");
    fs::create_dir_all(&root).unwrap();
    for split in Split::ALL {
        let body: String =
            games.iter().filter(|g| g.split == split).map(|g| to_jsonl_line(g) + "\n").collect();
        fs::write(root.join(format!("{}.jsonl", split.as_str())), body).unwrap();
    }
    root
}

/// Standard small corpus: 6 train games, 2 dev games, 5 test games of 10
/// turns (50 test turns).
pub fn fixture_corpus(dir: &Path) -> PathBuf {
    write_corpus(dir, &synthetic_corpus(7, [(6, 8), (2, 6), (5, 10)]))
}
