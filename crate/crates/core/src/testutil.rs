//! Fixtures shared by unit tests.

use crate::collector::{rollout, Components, EpisodeMeta, RolloutConfig};
use crate::control::{Controller, RandomController};
use crate::datastore::Trajectory;
use crate::sim::{make_scene, SceneConfig};
use crate::subgoal::{OracleSubgoalGenerator, SubgoalNoise};
use crate::vqa::TruthfulOracle;

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

pub fn desk() -> SceneConfig {
    SceneConfig::from_toml_str(DESK).expect("fixture scene parses")
}

/// One labeled random-policy episode on the fixture desk.
pub fn random_trajectory(seed: u64, rollout_cfg: &RolloutConfig) -> Trajectory {
    let scene = desk();
    let tasks = scene.tasks().expect("tasks");
    let start = make_scene(&scene, seed).expect("scene");
    let generator = OracleSubgoalGenerator::new(scene.home, SubgoalNoise::off());
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
    let mut rng = crate::rng::seeded(seed);
    let task = &tasks[(seed % tasks.len() as u64) as usize];
    rollout(&start, task, parts, rollout_cfg, meta, &mut rng).expect("rollout")
}
