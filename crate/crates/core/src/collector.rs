//! Episode rollouts and the autonomous collection loop, single worker or fleet.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::datastore::{IssuedSubgoal, Store, Trajectory, SCHEMA_VERSION};
use crate::rng::{derive_seed, derived, SimRng};
use crate::sim::{make_scene, Action, SceneConfig, SceneState};
use crate::subgoal::{SubgoalGenerator, STAGES};
use crate::task::TaskSpec;
use crate::task_select::{propose, BanditState};
use crate::vqa::{translate_task, OracleClient};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Steps between subgoal refreshes.
    pub subgoal_period: usize,
    /// Probability an episode is aborted at a uniformly chosen step.
    pub fault_prob: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            horizon: 100,
            subgoal_period: 20,
            fault_prob: 0.0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.subgoal_period == 0 {
            return Err(Error::ConfigInvalid("horizon and subgoal period must be positive".into()));
        }
        if !self.horizon.is_multiple_of(self.subgoal_period) {
            return Err(Error::ConfigInvalid(format!(
                "subgoal period {} does not divide horizon {}",
                self.subgoal_period, self.horizon
            )));
        }
        if !(0.0..=1.0).contains(&self.fault_prob) {
            return Err(Error::ConfigInvalid(format!("fault probability {}", self.fault_prob)));
        }
        Ok(())
    }
}

/// The pluggable pieces an episode runs with.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub controller: &'a dyn Controller,
    pub generator: &'a dyn SubgoalGenerator,
    pub oracle: &'a dyn OracleClient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<SceneState>,
    pub actions: Vec<Action>,
    pub subgoals: Vec<IssuedSubgoal>,
    /// Step at which an injected fault aborted the episode.
    pub fault_at: Option<usize>,
}

impl Episode {
    pub fn final_state(&self) -> &SceneState {
        self.observations.last().expect("episode has at least its start state")
    }
}

/// Runs the controller for `cfg.horizon` steps, refreshing the subgoal every
/// `cfg.subgoal_period` steps. Stages past the last one repeat it.
pub fn run_episode(
    start: &SceneState,
    controller: &dyn Controller,
    generator: &dyn SubgoalGenerator,
    task: &TaskSpec,
    cfg: &RolloutConfig,
    rng: &mut SimRng,
) -> Result<Episode> {
    cfg.validate()?;
    let fault_at = if cfg.fault_prob > 0.0 && rng.gen_bool(cfg.fault_prob) {
        Some(rng.gen_range(0..cfg.horizon))
    } else {
        None
    };
    let mut state = start.clone();
    let mut ep = Episode {
        observations: vec![state.clone()],
        actions: Vec::with_capacity(cfg.horizon),
        subgoals: Vec::new(),
        fault_at,
    };
    for t in 0..cfg.horizon {
        if t % cfg.subgoal_period == 0 {
            let stage = (t / cfg.subgoal_period).min(STAGES - 1);
            let goal = generator.next_subgoal(&state, task, stage, rng)?;
            ep.subgoals.push(IssuedSubgoal { timestep: t, goal });
        }
        if fault_at == Some(t) {
            return Ok(ep);
        }
        let goal = &ep.subgoals.last().expect("issued at t = 0").goal;
        let action = controller.act(&state, goal, task, rng)?;
        state.apply(action);
        ep.actions.push(action);
        ep.observations.push(state.clone());
    }
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeMeta {
    pub scene_id: String,
    pub used_fallback: bool,
    pub seed: u64,
    pub created_at: u64,
}

/// A completed, labeled trajectory or the state an injected fault left behind.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutOutcome {
    Completed(Box<Trajectory>),
    Faulted { at: usize, state: SceneState },
}

fn rollout_outcome(
    start: &SceneState,
    task: &TaskSpec,
    parts: Components<'_>,
    cfg: &RolloutConfig,
    meta: EpisodeMeta,
    rng: &mut SimRng,
) -> Result<RolloutOutcome> {
    let ep = run_episode(start, parts.controller, parts.generator, task, cfg, rng)?;
    if let Some(at) = ep.fault_at {
        return Ok(RolloutOutcome::Faulted {
            at,
            state: ep.final_state().clone(),
        });
    }
    let final_state = ep.final_state();
    let gt_success = task.is_satisfied(final_state)?;
    let vlm_success = parts.oracle.judge_success(final_state, task, rng)?;
    Ok(RolloutOutcome::Completed(Box::new(Trajectory {
        schema_version: SCHEMA_VERSION,
        scene_id: meta.scene_id,
        task: task.clone(),
        vqa: translate_task(task)?,
        subgoal_period: cfg.subgoal_period,
        observations: ep.observations,
        actions: ep.actions,
        subgoals: ep.subgoals,
        vlm_success,
        gt_success,
        used_fallback: meta.used_fallback,
        policy_version: parts.controller.version(),
        seed: meta.seed,
        created_at: meta.created_at,
    })))
}

/// One labeled episode. An injected fault surfaces as `FaultInjected`.
pub fn rollout(
    start: &SceneState,
    task: &TaskSpec,
    parts: Components<'_>,
    cfg: &RolloutConfig,
    meta: EpisodeMeta,
    rng: &mut SimRng,
) -> Result<Trajectory> {
    match rollout_outcome(start, task, parts, cfg, meta, rng)? {
        RolloutOutcome::Completed(t) => Ok(*t),
        RolloutOutcome::Faulted { .. } => Err(Error::FaultInjected),
    }
}

/// Attempt counts per bandit key, shared by every worker of a fleet.
#[derive(Debug, Default)]
pub struct SharedBandits {
    inner: Mutex<BTreeMap<String, BanditState>>,
}

impl SharedBandits {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<String, BanditState>) -> Self {
        SharedBandits {
            inner: Mutex::new(map),
        }
    }

    pub fn snapshot(&self) -> BTreeMap<String, BanditState> {
        self.inner.lock().expect("bandit lock poisoned").clone()
    }

    fn propose(
        &self,
        key: &str,
        state: &SceneState,
        tasks: &[TaskSpec],
        oracle: &dyn OracleClient,
        rng: &mut SimRng,
    ) -> Result<crate::task_select::Proposal> {
        let mut map = self.inner.lock().expect("bandit lock poisoned");
        propose(state, tasks, map.entry(key.to_string()).or_default(), oracle, rng)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub episodes: usize,
    pub appended: usize,
    pub faults: usize,
    pub rejected: usize,
    pub fallbacks: usize,
    pub vlm_successes: usize,
    pub gt_successes: usize,
    /// How many times the scene was instantiated from its configuration.
    pub scene_initializations: usize,
}

impl CollectionStats {
    pub fn merge(&mut self, other: &CollectionStats) {
        self.episodes += other.episodes;
        self.appended += other.appended;
        self.faults += other.faults;
        self.rejected += other.rejected;
        self.fallbacks += other.fallbacks;
        self.vlm_successes += other.vlm_successes;
        self.gt_successes += other.gt_successes;
        self.scene_initializations += other.scene_initializations;
    }
}

/// What one worker collects.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerAssignment {
    pub scene: SceneConfig,
    pub bandit_key: String,
    pub seed: u64,
    pub episodes: usize,
}

/// Propose, roll out, label, store; repeat from wherever the last episode
/// left the scene. The scene is instantiated once.
pub fn autonomous_loop(
    job: &WorkerAssignment,
    parts: Components<'_>,
    cfg: &RolloutConfig,
    store: &Mutex<Store>,
    bandits: &SharedBandits,
) -> Result<CollectionStats> {
    cfg.validate()?;
    let tasks = job.scene.tasks()?;
    let mut stats = CollectionStats::default();
    let mut state = make_scene(&job.scene, derive_seed(job.seed, "scene", 0))?;
    stats.scene_initializations += 1;
    for i in 0..job.episodes {
        let mut rng = derived(job.seed, "episode", i as u64);
        let proposal = bandits.propose(&job.bandit_key, &state, &tasks, parts.oracle, &mut rng)?;
        let meta = EpisodeMeta {
            scene_id: job.scene.id.clone(),
            used_fallback: proposal.used_fallback,
            seed: job.seed,
            created_at: i as u64,
        };
        stats.episodes += 1;
        stats.fallbacks += proposal.used_fallback as usize;
        match rollout_outcome(&state, &proposal.task, parts, cfg, meta, &mut rng)? {
            RolloutOutcome::Faulted { state: s, .. } => {
                stats.faults += 1;
                state = s;
            }
            RolloutOutcome::Completed(traj) => {
                state = traj.observations.last().expect("non-empty").clone();
                let (vlm, gt) = (traj.vlm_success, traj.gt_success);
                match store.lock().expect("store lock poisoned").append(*traj) {
                    Ok(_) => {
                        stats.appended += 1;
                        stats.vlm_successes += vlm as usize;
                        stats.gt_successes += gt as usize;
                    }
                    Err(Error::ValidationFailed(_)) => stats.rejected += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub workers: usize,
    pub episodes_per_worker: usize,
    pub seed: u64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            workers: 1,
            episodes_per_worker: 100,
            seed: 0,
        }
    }
}

/// Worker `w` runs scene `w mod len(scenes)` with its own derived seed;
/// workers on the same scene share that scene's bandit.
pub fn plan_fleet(fleet: &FleetConfig, scenes: &[SceneConfig]) -> Result<Vec<WorkerAssignment>> {
    if fleet.workers == 0 {
        return Err(Error::ConfigInvalid("fleet needs at least one worker".into()));
    }
    if scenes.is_empty() {
        return Err(Error::ConfigInvalid("fleet needs at least one scene".into()));
    }
    Ok((0..fleet.workers)
        .map(|w| {
            let scene = scenes[w % scenes.len()].clone();
            WorkerAssignment {
                bandit_key: scene.id.clone(),
                scene,
                seed: derive_seed(fleet.seed, "worker", w as u64),
                episodes: fleet.episodes_per_worker,
            }
        })
        .collect())
}

/// Runs every assignment on its own thread. A failing worker does not stop
/// the others; its error is returned in its slot.
pub fn run_fleet(
    jobs: &[WorkerAssignment],
    parts: Components<'_>,
    cfg: &RolloutConfig,
    store: &Mutex<Store>,
    bandits: &SharedBandits,
) -> Vec<Result<CollectionStats>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|job| s.spawn(move || autonomous_loop(job, parts, cfg, store, bandits)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::ConfigInvalid("worker panicked".into())))
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ExpertController, RandomController};
    use crate::subgoal::{OracleSubgoalGenerator, SubgoalNoise};
    use crate::testutil::desk;
    use crate::vqa::TruthfulOracle;

    fn run(controller: &dyn Controller, episodes: usize, cfg: &RolloutConfig) -> (CollectionStats, Store) {
        let scene = desk();
        let generator = OracleSubgoalGenerator::new(scene.home, SubgoalNoise::off());
        let oracle = TruthfulOracle::default();
        let parts = Components {
            controller,
            generator: &generator,
            oracle: &oracle,
        };
        let job = WorkerAssignment {
            bandit_key: scene.id.clone(),
            scene,
            seed: 5,
            episodes,
        };
        let store = Mutex::new(Store::new());
        let stats = autonomous_loop(&job, parts, cfg, &store, &SharedBandits::new()).unwrap();
        (stats, store.into_inner().unwrap())
    }

    #[test]
    fn rollout_config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        for bad in [
            RolloutConfig { horizon: 0, ..Default::default() },
            RolloutConfig { subgoal_period: 30, ..Default::default() },
            RolloutConfig { fault_prob: 1.5, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        }
    }

    #[test]
    fn episode_cadence() {
        let scene = desk();
        let start = make_scene(&scene, 1).unwrap();
        let generator = OracleSubgoalGenerator::new(scene.home, SubgoalNoise::off());
        let task = &scene.tasks().unwrap()[0];
        let mut rng = crate::rng::seeded(1);
        let ep = run_episode(&start, &RandomController, &generator, task, &RolloutConfig::default(), &mut rng).unwrap();
        assert_eq!((ep.observations.len(), ep.actions.len()), (101, 100));
        let issued: Vec<usize> = ep.subgoals.iter().map(|s| s.timestep).collect();
        assert_eq!(issued, vec![0, 20, 40, 60, 80]);
        assert_eq!(ep.fault_at, None);
    }

    #[test]
    fn certain_fault_aborts_every_episode() {
        let cfg = RolloutConfig {
            fault_prob: 1.0,
            ..Default::default()
        };
        let (stats, store) = run(&RandomController, 6, &cfg);
        assert_eq!((stats.faults, stats.appended), (6, 0));
        assert!(store.is_empty());
    }

    #[test]
    fn loop_is_reset_free() {
        let (stats, store) = run(&ExpertController { epsilon: 0.1 }, 12, &RolloutConfig::default());
        assert_eq!(stats.scene_initializations, 1);
        assert_eq!(stats.appended, 12);
        for w in store.records().windows(2) {
            assert_eq!(w[1].observations[0], *w[0].observations.last().unwrap());
        }
        let created: Vec<u64> = store.records().iter().map(|r| r.created_at).collect();
        assert_eq!(created, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn expert_collection_alternates_container_tasks() {
        let (stats, store) = run(&ExpertController { epsilon: 0.0 }, 8, &RolloutConfig::default());
        assert_eq!(stats.gt_successes, 8);
        assert_eq!(stats.fallbacks, 0);
        assert!(store.records().iter().all(|r| r.gt_success && r.vlm_success));
    }

    #[test]
    fn fleet_plan_round_robins_scenes() {
        let a = desk();
        let mut b = desk();
        b.id = "desk_b".into();
        let fleet = FleetConfig {
            workers: 5,
            episodes_per_worker: 3,
            seed: 9,
        };
        let jobs = plan_fleet(&fleet, &[a, b]).unwrap();
        let keys: Vec<&str> = jobs.iter().map(|j| j.bandit_key.as_str()).collect();
        assert_eq!(keys, ["desk", "desk_b", "desk", "desk_b", "desk"]);
        let mut seeds: Vec<u64> = jobs.iter().map(|j| j.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 5);
        assert!(plan_fleet(&FleetConfig { workers: 0, ..fleet }, &[desk()]).is_err());
        assert!(plan_fleet(&fleet, &[]).is_err());
    }

    #[test]
    fn stats_merge_adds_fields() {
        let mut a = CollectionStats {
            episodes: 2,
            appended: 1,
            faults: 1,
            ..Default::default()
        };
        a.merge(&CollectionStats {
            episodes: 3,
            appended: 3,
            scene_initializations: 1,
            ..Default::default()
        });
        assert_eq!((a.episodes, a.appended, a.faults, a.scene_initializations), (5, 4, 1, 1));
    }
}
