use std::collections::BTreeSet;

use bap_core::analysis::{categorize, category_report, Category, Lexicon, Lexicons};
use bap_core::corpus::{aggregate_turns, parse_record, to_jsonl_line, DialogueGame, Event, Speaker, Split, TurnPair};
use bap_core::dsl::{extract_actions, extract_actions_bytes, parse_action_call, serialize_action, serialize_actions, Action, ActionKind, Color};
use bap_core::eval::{evaluate_run, match_turn, micro_f1, MatchMode, RunArtifacts, TurnMatch};
use bap_core::prompting::{render_prompt, PromptConfig, TemplateSet};
use bap_core::provider::CompletionRequest;
use bap_core::retrieval::{top_k, Example, LexicalEmbedder};
use bap_core::world::{net_actions, GridSpec, ReplayMode, WorldState};
use proptest::prelude::*;
use proptest::sample::select;

fn color() -> impl Strategy<Value = Color> {
    select(Color::ALL.to_vec())
}

fn kind() -> impl Strategy<Value = ActionKind> {
    prop_oneof![Just(ActionKind::Place), Just(ActionKind::Pick)]
}

fn any_action() -> impl Strategy<Value = Action> {
    (kind(), color(), any::<i32>(), any::<i32>(), any::<i32>()).prop_map(|(kind, color, x, y, z)| Action { kind, color, x, y, z })
}

fn small_action() -> impl Strategy<Value = Action> {
    (kind(), select(vec![Color::Red, Color::Blue]), 0..2i32, 0..2i32)
        .prop_map(|(kind, color, x, z)| Action { kind, color, x, y: 1, z })
}

/// Candidate moves that are turned into a valid sequence by `realize`.
fn raw_moves() -> impl Strategy<Value = Vec<(bool, Color, i32, i32, i32)>> {
    prop::collection::vec((any::<bool>(), color(), -5..=5i32, 0..=9i32, -5..=5i32), 0..60)
}

/// Keeps the moves that are legal in sequence; a "pick" move removes
/// whatever sits at the cell.
fn realize(moves: &[(bool, Color, i32, i32, i32)]) -> Vec<Action> {
    let mut w = WorldState::new(GridSpec::corpus());
    let mut out = Vec::new();
    for &(pick, c, x, y, z) in moves {
        let a = match (pick, w.get((x, y, z))) {
            (true, Some(existing)) => Action::pick(existing, x, y, z),
            (true, None) => continue,
            (false, _) => Action::place(c, x, y, z),
        };
        if w.apply_in_place(&a).is_ok() {
            out.push(a);
        }
    }
    out
}

const PROSE: &[&str] = &[
    "Sure, here you go.",
    "This builds the requested shape",
    "# comment",
    "Let me know if this works!",
    "<Architect> thanks",
    "place a block there please",
];

proptest! {
    #[test]
    fn dsl_round_trip(a in any_action()) {
        prop_assert_eq!(parse_action_call(&serialize_action(&a)).unwrap(), a);
    }

    #[test]
    fn extraction_recovers_serialized_sequences(actions in prop::collection::vec(any_action(), 0..20)) {
        prop_assert_eq!(extract_actions(&serialize_actions(&actions)).0, actions);
    }

    #[test]
    fn appending_prose_never_changes_extraction(
        actions in prop::collection::vec(any_action(), 0..10),
        extra in prop::collection::vec(select(PROSE.to_vec()), 0..5),
    ) {
        let base = serialize_actions(&actions);
        let mut padded = base.clone();
        for line in &extra {
            padded.push('\n');
            padded.push_str(line);
        }
        prop_assert_eq!(extract_actions(&padded).0, extract_actions(&base).0);
    }

    #[test]
    fn extraction_is_total(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let (_, d) = extract_actions_bytes(&bytes);
        prop_assert!(d.notes.len() >= d.malformed_call_count);
    }

    #[test]
    fn world_conservation_and_reversibility(moves in raw_moves()) {
        let seq = realize(&moves);
        let mut w = WorldState::new(GridSpec::corpus());
        let total = w.total_inventory() as usize;
        for a in &seq {
            let next = w.apply(a).unwrap();
            prop_assert_eq!(next.occupied_count() + next.total_inventory() as usize, total);
            for c in Color::ALL {
                prop_assert_eq!(next.occupied_count_of(c) + next.inventory(c) as usize, 20);
            }
            if a.kind == ActionKind::Place {
                prop_assert_eq!(next.apply(&Action::pick(a.color, a.x, a.y, a.z)).unwrap(), w.clone());
            }
            w = next;
        }
    }

    #[test]
    fn rejected_actions_leave_world_unchanged(moves in raw_moves(), probe in any_action()) {
        let (w, _) = WorldState::new(GridSpec::corpus()).apply_sequence(&realize(&moves), ReplayMode::Strict);
        if let Err(v) = w.apply(&probe) {
            prop_assert_eq!(w.check(&probe), Some(v.reason));
            let mut copy = w.clone();
            prop_assert!(copy.apply_in_place(&probe).is_err());
            prop_assert_eq!(copy, w);
        }
    }

    #[test]
    fn net_actions_idempotent_and_occupancy_preserving(moves in raw_moves()) {
        let seq = realize(&moves);
        let net = net_actions(&seq);
        prop_assert_eq!(net_actions(&net), net.clone());
        prop_assert!(net.len() <= seq.len() && (seq.len() - net.len()) % 2 == 0);
        let empty = WorldState::new(GridSpec::corpus());
        let (a, va) = empty.apply_sequence(&seq, ReplayMode::Strict);
        let (b, vb) = empty.apply_sequence(&net, ReplayMode::Strict);
        prop_assert!(va.is_empty() && vb.is_empty());
        prop_assert_eq!(a.occupancy(), b.occupancy());
    }

    #[test]
    fn match_is_permutation_invariant(
        (pred, perm_p) in prop::collection::vec(small_action(), 0..10).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        (gold, perm_g) in prop::collection::vec(small_action(), 0..10).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
    ) {
        let m = match_turn(&pred, &gold);
        prop_assert_eq!(match_turn(&perm_p, &perm_g).tp, m.tp);
        prop_assert_eq!(match_turn(&gold, &pred).tp, m.tp);
        prop_assert!(m.tp <= pred.len().min(gold.len()));
        prop_assert!(match_turn(&gold, &gold).exact);
    }

    #[test]
    fn ordered_prefix_never_exceeds_multiset(
        pred in prop::collection::vec(small_action(), 0..10),
        gold in prop::collection::vec(small_action(), 0..10),
    ) {
        let prefix = bap_core::eval::match_turn_with(&pred, &gold, MatchMode::OrderedPrefix).tp;
        prop_assert!(prefix <= match_turn(&pred, &gold).tp);
    }

    #[test]
    fn micro_metrics_bounded(counts in prop::collection::vec((0..10usize, 0..10usize, 0..10usize), 0..30)) {
        let turns: Vec<TurnMatch> = counts.iter().map(|&(t, p, g)| {
            let tp = t.min(p).min(g);
            TurnMatch::from_counts(tp, p, g)
        }).collect();
        let m = micro_f1(&turns);
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
    }

    #[test]
    fn prompt_offsets_partition_text(
        sys in any::<bool>(), env in any::<bool>(), task in any::<bool>(), other in any::<bool>(),
        k in 0..6usize, n in 0..8usize, test in "[a-z ]{0,40}",
    ) {
        let cfg = PromptConfig { include_system: sys, include_env: env, include_task: task, include_other: other, ..PromptConfig::with_k(k) };
        let examples: Vec<Example> = (0..n).map(|i| Example {
            game_id: "g".into(),
            turn_index: i,
            instruction: format!("instruction {i}"),
            gold_actions: vec![Action::place(Color::Red, 0, 1 + i as i32, 0)],
        }).collect();
        let p = render_prompt(&cfg, &TemplateSet::builtin(), &examples, &test);
        let mut pos = 0;
        for (_, (a, b)) in &p.section_offsets {
            prop_assert_eq!(*a, pos);
            prop_assert!(b >= a);
            pos = *b;
        }
        prop_assert_eq!(pos, p.text.len());
        prop_assert_eq!(p.example_provenance.len(), k.min(n));
        let tail = format!("Instruction\n{test}");
        prop_assert!(p.text.ends_with(&tail));
    }

    #[test]
    fn request_hash_ignores_turn_reference(test in "[a-z ]{0,30}", game in "[a-z]{1,8}", turn in 0..100usize) {
        let p = render_prompt(&PromptConfig::with_k(0), &TemplateSet::builtin(), &[], &test);
        let r = CompletionRequest::new("m", p);
        prop_assert_eq!(r.request_hash(), r.clone().for_turn(game, turn).request_hash());
    }

    #[test]
    fn retrieval_ignores_training_order(
        (texts, shuffled) in prop::collection::vec("[a-z ]{1,30}", 1..25)
            .prop_filter("needs letters", |v| v.iter().all(|s| s.trim().len() > 0))
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle())),
        query in "[a-z ]{1,30}",
    ) {
        prop_assume!(!query.trim().is_empty());
        let examples = |texts: &[String]| -> Vec<Example> {
            let mut ids: Vec<&String> = texts.iter().collect();
            ids.sort();
            texts.iter().map(|t| Example {
                game_id: format!("g{}", ids.iter().position(|x| *x == t).unwrap()),
                turn_index: 0,
                instruction: t.clone(),
                gold_actions: vec![],
            }).collect()
        };
        let e = LexicalEmbedder::new(256);
        let a = bap_core::retrieval::build_index_from_examples(&e, examples(&texts), 1).unwrap();
        let b = bap_core::retrieval::build_index_from_examples(&e, examples(&shuffled), 2).unwrap();
        let ra = top_k(&a, &e, &query, 5).unwrap();
        let rb = top_k(&b, &e, &query, 5).unwrap();
        prop_assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert_eq!(&x.example.instruction, &y.example.instruction);
            prop_assert_eq!(x.similarity.to_bits(), y.similarity.to_bits());
        }
        prop_assert!(ra.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn categorize_is_case_insensitive(text in "[a-zA-Z ,.!?]{0,60}") {
        let lx = Lexicons::builtin();
        prop_assert_eq!(categorize(&text, &lx), categorize(&text.to_uppercase(), &lx));
        prop_assert_eq!(categorize(&text, &lx), categorize(&text.to_lowercase(), &lx));
    }

    #[test]
    fn adding_terms_only_grows_buckets(texts in prop::collection::vec("[a-z ]{0,40}", 1..20), term in "[a-z]{1,6}") {
        let pairs: Vec<TurnPair> = texts.iter().enumerate().map(|(i, t)| TurnPair {
            game_id: "g".into(),
            turn_index: i,
            instruction: t.clone(),
            gold_actions: vec![],
            world_before: WorldState::default(),
        }).collect();
        let report = evaluate_run(&RunArtifacts { pairs: pairs.clone(), responses: Default::default() }, MatchMode::Multiset);
        let small = Lexicons::builtin();
        let mut big = small.clone();
        let shape = big.lexicons.iter_mut().find(|l| l.category == Category::Shape).unwrap();
        *shape = Lexicon { terms: shape.terms.iter().cloned().chain([term]).collect(), ..shape.clone() };
        let before = category_report(&report, &pairs, &small).unwrap();
        let after = category_report(&report, &pairs, &big).unwrap();
        for (b, a) in before.iter().zip(&after) {
            let bs: BTreeSet<_> = b.category_turns.iter().collect();
            let as_: BTreeSet<_> = a.category_turns.iter().collect();
            prop_assert!(bs.is_subset(&as_));
            // sum rule
            prop_assert_eq!(a.utterance_fraction * pairs.len() as f64, a.category_turns.len() as f64);
            prop_assert!(a.correct_turns.iter().all(|t| a.category_turns.contains(t)));
        }
    }

    #[test]
    fn jsonl_round_trip_and_turn_accounting(
        script in prop::collection::vec(prop_oneof![
            "[a-z ]{1,20}".prop_map(|t| (true, t, 0usize)),
            (0..4usize).prop_map(|n| (false, String::new(), n)),
        ], 0..30),
    ) {
        let mut w = WorldState::new(GridSpec::corpus());
        let mut events = Vec::new();
        let mut height = 0;
        for (is_utt, text, n) in script {
            if is_utt {
                events.push(Event::Utterance { speaker: Speaker::Architect, text });
            } else {
                for _ in 0..n {
                    height += 1;
                    if height > 9 { break; }
                    let a = Action::place(Color::Orange, 0, height, 0);
                    w.apply_in_place(&a).unwrap();
                    events.push(Event::BuilderAction { action: a });
                }
            }
        }
        let game = DialogueGame { game_id: "g".into(), split: Split::Train, target_structure_id: None, events };
        prop_assert_eq!(parse_record(&to_jsonl_line(&game)).unwrap(), game.clone());

        let pairs = aggregate_turns(&game);
        let action_count = game.events.iter().filter(|e| matches!(e, Event::BuilderAction { .. })).count();
        prop_assert_eq!(pairs.iter().map(|p| p.gold_actions.len()).sum::<usize>(), action_count);
        prop_assert!(pairs.iter().all(|p| !p.gold_actions.is_empty()));
        prop_assert!(pairs.iter().enumerate().all(|(i, p)| p.turn_index == i));
    }
}
