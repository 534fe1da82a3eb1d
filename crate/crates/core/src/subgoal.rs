//! Oracle subgoal generator.
//!
//! A task unrolls into a fixed five-stage waypoint plan. Each query rebuilds the
//! stage's goal from the *current* state, so anything that happened since the
//! last query (a dropped object, a bumped container) is absorbed into the next
//! subgoal.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::sim::{nearest_cell, GridPos, SceneState};
use crate::task::{Target, TaskSpec, Template};
use crate::{Error, Result};

pub const STAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Waypoint {
    ReachObject,
    GraspObject,
    TransportToTarget,
    PlaceAtTarget,
    ReturnHome,
}

impl Waypoint {
    pub const ORDER: [Waypoint; STAGES] = [
        Waypoint::ReachObject,
        Waypoint::GraspObject,
        Waypoint::TransportToTarget,
        Waypoint::PlaceAtTarget,
        Waypoint::ReturnHome,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaypointPlan {
    pub stages: [Waypoint; STAGES],
    /// Cell the object is placed on in stage 3.
    pub target: GridPos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgoalNoise {
    pub perturb_prob: f64,
    pub max_offset: i32,
    /// Probability a stage is generated for the wrong object. Off by default.
    pub hallucination_prob: f64,
}

impl Default for SubgoalNoise {
    fn default() -> Self {
        SubgoalNoise {
            perturb_prob: 0.2,
            max_offset: 1,
            hallucination_prob: 0.0,
        }
    }
}

impl SubgoalNoise {
    pub fn off() -> Self {
        SubgoalNoise {
            perturb_prob: 0.0,
            max_offset: 0,
            hallucination_prob: 0.0,
        }
    }
}

/// Maps (current state, language task, stage) to a goal state.
pub trait SubgoalGenerator: Send + Sync {
    fn next_subgoal(
        &self,
        state: &SceneState,
        task: &TaskSpec,
        stage_index: usize,
        rng: &mut SimRng,
    ) -> Result<SceneState>;
}

/// Resolves where the task's object should end up.
pub fn placement_target(state: &SceneState, task: &TaskSpec) -> Result<GridPos> {
    let obj = task.object.as_str();
    state.object(obj)?;
    match (&task.template, &task.target) {
        (Template::PutIn, Target::Container(c)) => Ok(state.container(c)?.pos),
        (Template::TakeOut, Target::Container(c)) => {
            let from = state.container(c)?.pos;
            nearest_cell(state, from, |p| state.is_free_table_cell(p, Some(obj)))
                .ok_or(Error::Unreachable)
        }
        (Template::MoveToRegion, Target::Region(r)) => {
            let centre = r.centroid();
            nearest_cell(state, centre, |p| {
                r.contains(p) && state.is_free_table_cell(p, Some(obj))
            })
            .or_else(|| nearest_cell(state, centre, |p| state.is_free_table_cell(p, Some(obj))))
            .ok_or(Error::Unreachable)
        }
        (t, _) => Err(Error::UnsupportedTemplate(format!("{t:?}"))),
    }
}

pub fn waypoint_plan(state: &SceneState, task: &TaskSpec) -> Result<WaypointPlan> {
    Ok(WaypointPlan {
        stages: Waypoint::ORDER,
        target: placement_target(state, task)?,
    })
}

#[derive(Debug, Clone)]
pub struct OracleSubgoalGenerator {
    pub home: GridPos,
    pub noise: SubgoalNoise,
}

impl OracleSubgoalGenerator {
    pub fn new(home: GridPos, noise: SubgoalNoise) -> Self {
        OracleSubgoalGenerator { home, noise }
    }

    fn jitter(&self, state: &SceneState, p: GridPos, rng: &mut SimRng) -> GridPos {
        if self.noise.perturb_prob <= 0.0 || self.noise.max_offset <= 0 {
            return p;
        }
        if !rng.gen_bool(self.noise.perturb_prob.min(1.0)) {
            return p;
        }
        let k = self.noise.max_offset;
        let options: Vec<GridPos> = (-k..=k)
            .flat_map(|dy| (-k..=k).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| (dx, dy) != (0, 0))
            .map(|(dx, dy)| p.offset(dx, dy))
            .filter(|q| state.is_open(*q))
            .collect();
        options.choose(rng).copied().unwrap_or(p)
    }
}

/// Puts the held object down at the nearest legal spot, unless it is `keep`.
fn drop_foreign_object(goal: &mut SceneState, keep: &str) {
    let Some(h) = goal.holding.clone() else {
        return;
    };
    if h == keep {
        return;
    }
    let ok = |s: &SceneState, p: GridPos| {
        s.is_free_table_cell(p, Some(&h))
            || s.container_at(p).is_some_and(|c| {
                !s.objects
                    .iter()
                    .any(|(id, o)| *id != h && o.container.as_deref() == Some(c))
            })
    };
    let spot = if ok(goal, goal.gripper) {
        Some(goal.gripper)
    } else {
        nearest_cell(goal, goal.gripper, |p| ok(goal, p))
    };
    if let Some(spot) = spot {
        let container = goal.container_at(spot).map(str::to_string);
        let o = goal.objects.get_mut(&h).expect("held object exists");
        o.pos = spot;
        o.container = container;
        goal.holding = None;
    }
}

impl SubgoalGenerator for OracleSubgoalGenerator {
    fn next_subgoal(
        &self,
        state: &SceneState,
        task: &TaskSpec,
        stage_index: usize,
        rng: &mut SimRng,
    ) -> Result<SceneState> {
        if stage_index >= STAGES {
            return Err(Error::ConfigInvalid(format!(
                "stage index {stage_index} outside 0..{STAGES}"
            )));
        }
        let mut task = task.clone();
        if self.noise.hallucination_prob > 0.0 && rng.gen_bool(self.noise.hallucination_prob) {
            let others: Vec<&String> = state.objects.keys().filter(|k| **k != task.object).collect();
            if let Some(o) = others.choose(rng) {
                task.object = (*o).clone();
            }
        }
        let obj = task.object.clone();
        state.object(&obj)?;

        let mut goal = state.clone();
        drop_foreign_object(&mut goal, &obj);
        let target = placement_target(&goal, &task)?;
        let obj_pos = goal.object(&obj)?.pos;

        let hold_at = |goal: &mut SceneState, p: GridPos| {
            goal.gripper = p;
            goal.holding = Some(obj.clone());
            let o = goal.objects.get_mut(&obj).expect("object exists");
            o.pos = p;
            o.container = None;
        };

        match Waypoint::ORDER[stage_index] {
            Waypoint::ReachObject => {
                let p = self.jitter(&goal, obj_pos, rng);
                goal.gripper = p;
                if goal.holding.as_deref() == Some(obj.as_str()) {
                    hold_at(&mut goal, p);
                }
            }
            Waypoint::GraspObject => hold_at(&mut goal, obj_pos),
            Waypoint::TransportToTarget => {
                let p = self.jitter(&goal, target, rng);
                hold_at(&mut goal, p);
            }
            Waypoint::PlaceAtTarget | Waypoint::ReturnHome => {
                self.place(&mut goal, &obj, target);
                if Waypoint::ORDER[stage_index] == Waypoint::ReturnHome {
                    goal.gripper = self.jitter(&goal, self.home, rng);
                }
            }
        }
        Ok(goal)
    }
}

impl OracleSubgoalGenerator {
    /// Object released at `target`; an occupant of a target container is moved
    /// to the nearest free table cell.
    fn place(&self, goal: &mut SceneState, obj: &str, target: GridPos) {
        goal.holding = None;
        goal.gripper = target;
        let container = goal.container_at(target).map(str::to_string);
        if let Some(c) = &container {
            let occupant = goal
                .objects
                .iter()
                .find(|(id, o)| id.as_str() != obj && o.container.as_deref() == Some(c))
                .map(|(id, _)| id.clone());
            if let Some(occ) = occupant {
                if let Some(spot) = nearest_cell(goal, target, |p| goal.is_free_table_cell(p, Some(obj))) {
                    let o = goal.objects.get_mut(&occ).expect("occupant exists");
                    o.pos = spot;
                    o.container = None;
                }
            }
        }
        let o = goal.objects.get_mut(obj).expect("object exists");
        o.pos = target;
        o.container = container;
    }
}

/// Stage-wise goals with noise disabled, as used for demonstrations and setup.
pub fn final_goal(state: &SceneState, task: &TaskSpec, home: GridPos) -> Result<SceneState> {
    let generator = OracleSubgoalGenerator::new(home, SubgoalNoise::off());
    let mut rng = crate::rng::seeded(0);
    generator.next_subgoal(state, task, STAGES - 1, &mut rng)
}
