use serde::{Deserialize, Serialize};

use crate::collector::{run_episode, RolloutConfig};
use crate::control::{Controller, ExpertController};
use crate::rng::{derive_seed, derived};
use crate::sim::{make_scene, GridPos, SceneConfig, SceneState};
use crate::subgoal::{final_goal, SubgoalGenerator};
use crate::task::{Target, TaskSpec, Template};
use crate::vqa::judge_feasible;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub seed: u64,
    pub max_start_attempts: usize,
    pub rollout: RolloutConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_task: 50,
            seed: 0,
            max_start_attempts: 50,
            rollout: RolloutConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: String,
    pub successes: usize,
    pub episodes: usize,
}

impl TaskEval {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene_id: String,
    pub per_task: Vec<TaskEval>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.per_task.iter().map(|t| t.successes).sum()
    }

    pub fn episodes(&self) -> usize {
        self.per_task.iter().map(|t| t.episodes).sum()
    }

    /// Success rate pooled over every evaluated episode.
    pub fn success_rate(&self) -> Result<f64> {
        match self.episodes() {
            0 => Err(Error::EmptyEvaluation),
            n => Ok(self.successes() as f64 / n as f64),
        }
    }
}

/// Brings a fresh scene into a state where `task` is feasible. `TakeOut`
/// starts are produced by first having the expert put the object in.
pub fn feasible_start(
    scene: &SceneConfig,
    task: &TaskSpec,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<SceneState> {
    let home = scene.effective().home;
    for attempt in 0..cfg.max_start_attempts {
        let mut state = make_scene(scene, derive_seed(seed, "start", attempt as u64))?;
        if task.template == Template::TakeOut {
            state = setup_put_in(&state, task, home, cfg)?;
        }
        if judge_feasible(&state, task)? {
            return Ok(state);
        }
    }
    Err(Error::NoFeasibleStart(task.language.clone()))
}

fn setup_put_in(state: &SceneState, task: &TaskSpec, home: GridPos, cfg: &EvalConfig) -> Result<SceneState> {
    let Target::Container(c) = &task.target else {
        return Err(Error::UnsupportedTemplate(format!("{:?}", task.template)));
    };
    let put = TaskSpec::new(task.id, Template::PutIn, &task.object, Target::Container(c.clone()))?;
    let goal = match final_goal(state, &put, home) {
        Ok(g) => g,
        Err(Error::Unreachable) => return Ok(state.clone()),
        Err(e) => return Err(e),
    };
    let expert = ExpertController { epsilon: 0.0 };
    let mut rng = crate::rng::seeded(0);
    let mut s = state.clone();
    for _ in 0..cfg.rollout.horizon {
        let a = expert.act(&s, &goal, &put, &mut rng)?;
        s.apply(a);
    }
    Ok(s)
}

/// Success rate per task over fresh feasible starts, judged on ground truth.
pub fn evaluate(
    controller: &dyn Controller,
    generator: &dyn SubgoalGenerator,
    scene: &SceneConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let tasks = scene.tasks()?;
    if tasks.is_empty() || cfg.episodes_per_task == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut successes = 0;
        for ep in 0..cfg.episodes_per_task {
            let index = (task.id.0 as u64) << 32 | ep as u64;
            let start = feasible_start(scene, task, derive_seed(cfg.seed, "eval-start", index), cfg)?;
            let mut rng = derived(cfg.seed, "eval-episode", index);
            let episode = run_episode(&start, controller, generator, task, &cfg.rollout, &mut rng)?;
            successes += task.is_satisfied(episode.final_state())? as usize;
        }
        per_task.push(TaskEval {
            task: task.language.clone(),
            successes,
            episodes: cfg.episodes_per_task,
        });
    }
    Ok(EvalReport {
        scene_id: scene.id.clone(),
        per_task,
    })
}
