//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::sync::Mutex;

use autoimprove::collector::{
    autonomous_loop, rollout, CollectionStats, Components, EpisodeMeta, RolloutConfig,
    SharedBandits, WorkerAssignment,
};
use autoimprove::control::{Controller, RandomController};
use autoimprove::datastore::{Store, Trajectory};
use autoimprove::rng::seeded;
use autoimprove::sim::{make_scene, SceneConfig};
use autoimprove::subgoal::{OracleSubgoalGenerator, SubgoalNoise};
use autoimprove::vqa::TruthfulOracle;

pub const DESK: &str = r#"
id = "desk"
home = [0, 0]
barriers = [[4, 1]]
vocab = { object_kinds = 3, container_kinds = 2, region_kinds = 1 }
objects = [
  { id = "green_block", kind = 0, spawn = { min = [0, 3], max = [3, 7] } },
  { id = "red_marker", kind = 1, spawn = { min = [0, 3], max = [3, 7] } },
]
containers = [
  { id = "brown_bowl", kind = 0, pos = [5, 5] },
  { id = "white_towel", kind = 1, pos = [6, 1] },
]
regions = [{ name = "bottom edge", kind = 0, min = [0, 7], max = [7, 7] }]
tasks = [
  { template = "PutIn", object = "green_block", target = "brown_bowl" },
  { template = "TakeOut", object = "green_block", target = "brown_bowl" },
  { template = "PutIn", object = "red_marker", target = "white_towel" },
  { template = "MoveToRegion", object = "red_marker", target = "bottom edge" },
]
"#;

/// Only put-in tasks: once both objects are stowed nothing is feasible.
pub const PUT_ONLY: &str = r#"
id = "put_only"
home = [0, 0]
vocab = { object_kinds = 2, container_kinds = 2 }
objects = [
  { id = "green_block", kind = 0, spawn = { min = [0, 3], max = [3, 7] } },
  { id = "red_marker", kind = 1, spawn = { min = [0, 3], max = [3, 7] } },
]
containers = [
  { id = "brown_bowl", kind = 0, pos = [5, 5] },
  { id = "white_towel", kind = 1, pos = [6, 1] },
]
tasks = [
  { template = "PutIn", object = "green_block", target = "brown_bowl" },
  { template = "PutIn", object = "red_marker", target = "white_towel" },
]
"#;

pub fn desk() -> SceneConfig {
    SceneConfig::from_toml_str(DESK).expect("fixture scene parses")
}

pub fn put_only() -> SceneConfig {
    SceneConfig::from_toml_str(PUT_ONLY).expect("fixture scene parses")
}

/// The desk under a new id with its spawn regions translated by `(dx, dy)`.
pub fn desk_variant(id: &str, dx: i32, dy: i32) -> SceneConfig {
    let mut s = desk();
    s.id = id.to_string();
    s.shift.spawn_shift = Some([dx, dy]);
    s.validate().expect("variant is valid");
    s
}

pub fn oracle_generator(scene: &SceneConfig) -> OracleSubgoalGenerator {
    OracleSubgoalGenerator::new(scene.home, SubgoalNoise::off())
}

/// One labeled random-policy episode on the fixture desk.
pub fn random_trajectory(seed: u64, cfg: &RolloutConfig) -> Trajectory {
    let scene = desk();
    let tasks = scene.tasks().expect("tasks");
    let start = make_scene(&scene, seed).expect("scene");
    let generator = oracle_generator(&scene);
    let oracle = TruthfulOracle::default();
    let parts = Components {
        controller: &RandomController as &dyn Controller,
        generator: &generator,
        oracle: &oracle,
    };
    let meta = EpisodeMeta {
        scene_id: scene.id.clone(),
        used_fallback: false,
        seed,
        created_at: 0,
    };
    let mut rng = seeded(seed);
    let task = &tasks[(seed % tasks.len() as u64) as usize];
    rollout(&start, task, parts, cfg, meta, &mut rng).expect("rollout")
}

/// A reset-free run of `controller` on `scene`.
pub fn collect_with(
    scene: &SceneConfig,
    controller: &dyn Controller,
    episodes: usize,
    seed: u64,
) -> (CollectionStats, Store) {
    let generator = oracle_generator(scene);
    let oracle = TruthfulOracle::default();
    let parts = Components {
        controller,
        generator: &generator,
        oracle: &oracle,
    };
    let job = WorkerAssignment {
        scene: scene.clone(),
        bandit_key: scene.id.clone(),
        seed,
        episodes,
    };
    let store = Mutex::new(Store::new());
    let stats = autonomous_loop(&job, parts, &RolloutConfig::default(), &store, &SharedBandits::new())
        .expect("collection runs");
    (stats, store.into_inner().expect("store lock"))
}

pub const DEFAULT_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

/// The default experiment shrunk to run in seconds.
pub fn tiny_config() -> autoimprove::experiment::ExperimentConfig {
    let mut cfg = autoimprove::experiment::ExperimentConfig::load(DEFAULT_CONFIG).expect("default config loads");
    cfg.demos.episodes = 40;
    cfg.pretrain_scenes.truncate(2);
    cfg.shifted_scenes.truncate(1);
    for t in [&mut cfg.pretrain, &mut cfg.improve] {
        t.gradient_steps = 200;
        t.hidden = [16, 16];
    }
    if let Some(g) = &mut cfg.generalist {
        g.gradient_steps = 200;
        g.hidden = [16, 16];
    }
    cfg.collection.episodes_per_scene = 10;
    cfg.eval.episodes_per_task = 2;
    cfg.validate().expect("tiny config is valid");
    cfg
}
