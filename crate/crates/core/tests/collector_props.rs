//! Property tests for rollouts, the reset-free loop and fleet collection.

mod common;

use std::sync::Mutex;

use autoimprove::collector::{
    autonomous_loop, plan_fleet, run_episode, run_fleet, Components, FleetConfig, RolloutConfig,
    SharedBandits, WorkerAssignment,
};
use autoimprove::control::{Controller, ExpertController, RandomController};
use autoimprove::datastore::{validate, Store};
use autoimprove::policy::feasible_start;
use autoimprove::policy::EvalConfig;
use autoimprove::rng::seeded;
use autoimprove::vqa::TruthfulOracle;
use proptest::prelude::*;

use common::*;

fn job(seed: u64, episodes: usize) -> WorkerAssignment {
    let scene = desk();
    WorkerAssignment {
        bandit_key: scene.id.clone(),
        scene,
        seed,
        episodes,
    }
}

fn run_jobs(jobs: &[WorkerAssignment], controller: &dyn Controller, cfg: &RolloutConfig) -> (Vec<autoimprove::collector::CollectionStats>, Store, SharedBandits) {
    let scene = desk();
    let generator = oracle_generator(&scene);
    let oracle = TruthfulOracle::default();
    let parts = Components {
        controller,
        generator: &generator,
        oracle: &oracle,
    };
    let store = Mutex::new(Store::new());
    let bandits = SharedBandits::new();
    let stats = run_fleet(jobs, parts, cfg, &store, &bandits)
        .into_iter()
        .collect::<autoimprove::Result<Vec<_>>>()
        .unwrap();
    (stats, store.into_inner().unwrap(), bandits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn collection_is_reset_free(seed in any::<u64>(), episodes in 1usize..40) {
        let (stats, store) = collect_with(&desk(), &RandomController, episodes, seed);
        prop_assert_eq!(stats.scene_initializations, 1);
        prop_assert_eq!(stats.appended, episodes);
        let records = store.records();
        for pair in records.windows(2) {
            prop_assert_eq!(&pair[1].observations[0], pair[0].observations.last().unwrap());
            prop_assert_eq!(pair[1].created_at, pair[0].created_at + 1);
        }
        for r in records {
            prop_assert!(validate(r).is_empty());
            prop_assert_eq!(r.subgoals.len(), r.horizon() / r.subgoal_period);
        }
    }

    #[test]
    fn faults_never_reach_the_store(seed in any::<u64>()) {
        let cfg = RolloutConfig { fault_prob: 0.3, ..RolloutConfig::default() };
        let (stats, store, _) = run_jobs(&[job(seed, 30)], &RandomController, &cfg);
        let s = &stats[0];
        prop_assert_eq!(s.episodes, 30);
        prop_assert_eq!(s.faults + s.appended + s.rejected, 30);
        prop_assert_eq!(store.len(), s.appended);
        for r in store.records() {
            prop_assert!(validate(r).is_empty());
            prop_assert_eq!(r.horizon(), cfg.horizon);
        }
    }
}

#[test]
fn single_worker_fleet_matches_the_loop() {
    let cfg = RolloutConfig::default();
    let (stats, fleet_store, _) = run_jobs(&[job(9, 20)], &RandomController, &cfg);
    let (loop_stats, loop_store) = collect_with(&desk(), &RandomController, 20, 9);
    assert_eq!(stats[0], loop_stats);
    assert_eq!(fleet_store.records(), loop_store.records());
}

#[test]
fn fleet_of_five_stores_every_episode() {
    let scenes = vec![desk()];
    let fleet = FleetConfig {
        workers: 5,
        episodes_per_worker: 10,
        seed: 4,
    };
    let jobs = plan_fleet(&fleet, &scenes).unwrap();
    assert_eq!(jobs.len(), 5);
    let seeds: std::collections::BTreeSet<u64> = jobs.iter().map(|j| j.seed).collect();
    assert_eq!(seeds.len(), 5);
    let (stats, store, bandits) = run_jobs(&jobs, &RandomController, &RolloutConfig::default());
    assert_eq!(store.len(), 50);
    assert_eq!(stats.iter().map(|s| s.appended).sum::<usize>(), 50);
    assert_eq!(stats.iter().map(|s| s.scene_initializations).sum::<usize>(), 5);
    // Workers on one scene share its bandit: every attempt is counted once.
    let snap = bandits.snapshot();
    assert_eq!(snap.len(), 1);
    assert_eq!(snap[&desk().id].total(), 50);
}

#[test]
fn shared_bandit_counts_every_attempt() {
    let jobs = [job(1, 25), job(2, 25)];
    let (stats, _, bandits) = run_jobs(&jobs, &RandomController, &RolloutConfig::default());
    let attempts: usize = stats.iter().map(|s| s.episodes).sum();
    assert_eq!(bandits.snapshot()[&desk().id].total(), attempts as u64);
}

#[test]
fn fleet_rejects_empty_plans() {
    assert!(plan_fleet(&FleetConfig { workers: 0, ..Default::default() }, &[desk()]).is_err());
    assert!(plan_fleet(&FleetConfig::default(), &[]).is_err());
}

#[test]
fn noiseless_expert_solves_tasks_from_feasible_starts() {
    let scene = desk();
    let generator = oracle_generator(&scene);
    let expert = ExpertController { epsilon: 0.0 };
    let cfg = RolloutConfig::default();
    for task in scene.tasks().unwrap() {
        for seed in 0..10 {
            let start = feasible_start(&scene, &task, seed, &EvalConfig::default()).unwrap();
            let ep = run_episode(&start, &expert, &generator, &task, &cfg, &mut seeded(seed)).unwrap();
            assert_eq!(ep.subgoals.len(), 5);
            assert!(task.is_satisfied(ep.final_state()).unwrap(), "{} from seed {seed}", task.language);
        }
    }
}

#[test]
fn direct_loop_call_with_fresh_bandits_is_repeatable() {
    let scene = desk();
    let generator = oracle_generator(&scene);
    let oracle = TruthfulOracle::default();
    let parts = Components {
        controller: &RandomController,
        generator: &generator,
        oracle: &oracle,
    };
    let run = || {
        let store = Mutex::new(Store::new());
        autonomous_loop(&job(3, 15), parts, &RolloutConfig::default(), &store, &SharedBandits::new()).unwrap();
        store.into_inner().unwrap()
    };
    assert_eq!(run().records(), run().records());
}
