//! Property tests for feasibility filtering and UCB task selection.

mod common;

use std::collections::BTreeMap;

use autoimprove::rng::{seeded, SimRng};
use autoimprove::sim::{make_scene, Action, SceneState};
use autoimprove::task::{TaskId, TaskSpec};
use autoimprove::task_select::{
    feasible_tasks, propose, record_attempt, ucb_select, ucb_select_with, BanditState,
};
use autoimprove::vqa::{judge_feasible, OracleClient, TruthfulOracle};
use autoimprove::{Error, Result};
use proptest::prelude::*;

use common::*;

fn bandit_strategy() -> impl Strategy<Value = (BanditState, Vec<TaskId>)> {
    (1usize..10)
        .prop_flat_map(|k| {
            (
                proptest::collection::vec(0u64..50, k),
                proptest::collection::vec(any::<bool>(), k),
            )
        })
        .prop_map(|(counts, mask)| {
            let bandit = BanditState {
                counts: counts.iter().enumerate().map(|(i, c)| (TaskId(i as u32), *c)).collect(),
            };
            let mut feasible: Vec<TaskId> = mask
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(|(i, _)| TaskId(i as u32))
                .collect();
            if feasible.is_empty() {
                feasible.push(TaskId(0));
            }
            (bandit, feasible)
        })
}

/// Judges every task feasible and every episode failed.
struct AlwaysFeasible;

impl OracleClient for AlwaysFeasible {
    fn judge_feasible(&self, _: &SceneState, _: &TaskSpec, _: &mut SimRng) -> Result<bool> {
        Ok(true)
    }

    fn judge_success(&self, _: &SceneState, _: &TaskSpec, _: &mut SimRng) -> Result<bool> {
        Ok(false)
    }
}

fn walk(seed: u64, steps: usize) -> SceneState {
    let mut rng = seeded(seed);
    let mut s = make_scene(&desk(), seed).unwrap();
    for _ in 0..steps {
        s.apply(Action::random(&mut rng));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn selection_is_the_least_attempted_feasible_task((bandit, feasible) in bandit_strategy()) {
        let picked = ucb_select(&bandit, &feasible).unwrap();
        let expected = *feasible.iter().min_by_key(|t| (bandit.count(**t), **t)).unwrap();
        prop_assert_eq!(picked, expected);
        prop_assert!(feasible.contains(&picked));
    }

    #[test]
    fn selection_does_not_depend_on_the_log_base((bandit, feasible) in bandit_strategy()) {
        let ln = ucb_select_with(&bandit, &feasible, f64::ln).unwrap();
        prop_assert_eq!(ln, ucb_select_with(&bandit, &feasible, f64::log10).unwrap());
        prop_assert_eq!(ln, ucb_select_with(&bandit, &feasible, f64::log2).unwrap());
    }

    #[test]
    fn recording_increments_exactly_one_count(records in proptest::collection::vec(0u32..8, 0..200)) {
        let mut b = BanditState::default();
        for r in &records {
            let next = record_attempt(&b, TaskId(*r));
            prop_assert_eq!(next.count(TaskId(*r)), b.count(TaskId(*r)) + 1);
            for t in 0..8 {
                if t != *r {
                    prop_assert_eq!(next.count(TaskId(t)), b.count(TaskId(t)));
                }
            }
            b = next;
        }
        prop_assert_eq!(b.total(), records.len() as u64);
        prop_assert_eq!(BanditState::from_table(&b.to_table()).unwrap(), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feasible_set_is_the_brute_force_filter(seed in any::<u64>(), steps in 0usize..400) {
        let s = walk(seed, steps);
        let tasks = desk().tasks().unwrap();
        let mut rng = seeded(seed);
        let got = feasible_tasks(&s, &tasks, &TruthfulOracle::default(), &mut rng).unwrap();
        let expected: Vec<TaskId> = tasks.iter().filter(|t| judge_feasible(&s, t).unwrap()).map(|t| t.id).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn proposals_stay_in_the_list_and_fall_back_only_when_stuck(seed in any::<u64>(), steps in 0usize..400) {
        let s = walk(seed, steps);
        let scene = put_only();
        let mut stowed = make_scene(&scene, seed).unwrap();
        for (id, c) in [("green_block", "brown_bowl"), ("red_marker", "white_towel")] {
            let pos = stowed.containers[c].pos;
            let o = stowed.objects.get_mut(id).unwrap();
            o.pos = pos;
            o.container = Some(c.into());
        }
        let cases = [(s, desk().tasks().unwrap()), (stowed, scene.tasks().unwrap())];
        for (state, tasks) in &cases {
            let mut bandit = BanditState::default();
            let mut rng = seeded(seed);
            let p = propose(state, tasks, &mut bandit, &TruthfulOracle::default(), &mut rng).unwrap();
            let empty = tasks.iter().all(|t| !judge_feasible(state, t).unwrap());
            prop_assert!(tasks.contains(&p.task));
            prop_assert_eq!(p.used_fallback, empty);
            prop_assert_eq!(bandit.total(), 1);
            prop_assert_eq!(bandit.count(p.task.id), 1);
        }
    }
}

#[test]
fn always_feasible_tasks_are_attempted_round_robin() {
    let tasks = desk().tasks().unwrap();
    let state = walk(0, 0);
    let mut bandit = BanditState::default();
    let mut rng = seeded(3);
    for i in 0..1000 {
        let p = propose(&state, &tasks, &mut bandit, &AlwaysFeasible, &mut rng).unwrap();
        assert!(!p.used_fallback);
        let counts: Vec<u64> = tasks.iter().map(|t| bandit.count(t.id)).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "after {} proposals counts are {counts:?}", i + 1);
    }
}

#[test]
fn single_and_empty_feasible_sets() {
    let b = BanditState {
        counts: BTreeMap::from([(TaskId(4), 9)]),
    };
    assert_eq!(ucb_select(&b, &[TaskId(4)]).unwrap(), TaskId(4));
    assert!(matches!(ucb_select(&b, &[]), Err(Error::EmptyFeasibleSet)));
    let equal = BanditState {
        counts: BTreeMap::from([(TaskId(1), 2), (TaskId(2), 2)]),
    };
    assert_eq!(ucb_select(&equal, &[TaskId(2), TaskId(1)]).unwrap(), TaskId(1));
}
