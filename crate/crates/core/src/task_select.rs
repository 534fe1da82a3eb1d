//! Feasible-set construction and upper-confidence-bound task selection.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::sim::SceneState;
use crate::task::{TaskId, TaskSpec};
use crate::vqa::OracleClient;
use crate::{Error, Result};

/// Per-scene attempt counts `n(τ)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanditState {
    pub counts: BTreeMap<TaskId, u64>,
}

impl BanditState {
    pub fn count(&self, task: TaskId) -> u64 {
        self.counts.get(&task).copied().unwrap_or(0)
    }

    pub fn record(&mut self, task: TaskId) {
        *self.counts.entry(task).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Tab-separated `task<TAB>count` lines, one per task id.
    pub fn to_table(&self) -> String {
        let mut out = String::from("task\tcount\n");
        for (t, n) in &self.counts {
            out.push_str(&format!("{}\t{n}\n", t.0));
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("task")) {
                continue;
            }
            let mut parts = line.split('\t');
            let parse = |s: Option<&str>| -> Result<u64> {
                s.and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad bandit row {}: `{line}`", i + 1)))
            };
            let task = parse(parts.next())?;
            let count = parse(parts.next())?;
            counts.insert(TaskId(task as u32), count);
        }
        Ok(BanditState { counts })
    }
}

/// Returns a copy with the attempt recorded.
pub fn record_attempt(bandit: &BanditState, task: TaskId) -> BanditState {
    let mut next = bandit.clone();
    next.record(task);
    next
}

/// Tasks the oracle deems feasible in `state`, in input order.
pub fn feasible_tasks(
    state: &SceneState,
    tasks: &[TaskSpec],
    oracle: &dyn OracleClient,
    rng: &mut SimRng,
) -> Result<Vec<TaskId>> {
    let mut out = Vec::new();
    for t in tasks {
        if oracle.judge_feasible(state, t, rng)? {
            out.push(t.id);
        }
    }
    Ok(out)
}

pub fn ucb_bonus(count: u64, feasible_total: u64, log: impl Fn(f64) -> f64) -> f64 {
    (log(feasible_total as f64 + 1.0) / (count as f64 + 1.0)).sqrt()
}

/// UCB selection with a caller-supplied logarithm; ties go to the lowest id.
pub fn ucb_select_with(
    bandit: &BanditState,
    feasible: &[TaskId],
    log: impl Fn(f64) -> f64,
) -> Result<TaskId> {
    let total: u64 = feasible.iter().map(|t| bandit.count(*t)).sum();
    let mut best: Option<(f64, TaskId)> = None;
    for &t in feasible {
        let b = ucb_bonus(bandit.count(t), total, &log);
        best = match best {
            Some((bb, bt)) if bb > b || (bb == b && bt <= t) => Some((bb, bt)),
            _ => Some((b, t)),
        };
    }
    best.map(|(_, t)| t).ok_or(Error::EmptyFeasibleSet)
}

/// `argmax sqrt(ln(N + 1) / (n(τ) + 1))` over the feasible set, where `N` is the
/// feasible set's total attempt count.
pub fn ucb_select(bandit: &BanditState, feasible: &[TaskId]) -> Result<TaskId> {
    ucb_select_with(bandit, feasible, f64::ln)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub task: TaskSpec,
    pub used_fallback: bool,
}

/// Picks the next task to command and records the attempt. Falls back to a
/// uniformly random task when nothing is judged feasible; an unparseable
/// oracle reply counts as "not feasible".
pub fn propose(
    state: &SceneState,
    tasks: &[TaskSpec],
    bandit: &mut BanditState,
    oracle: &dyn OracleClient,
    rng: &mut SimRng,
) -> Result<Proposal> {
    if tasks.is_empty() {
        return Err(Error::ConfigInvalid("task list is empty".into()));
    }
    let mut feasible = Vec::new();
    for t in tasks {
        match oracle.judge_feasible(state, t, rng) {
            Ok(true) => feasible.push(t.id),
            Ok(false) | Err(Error::Unparseable(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let (task, used_fallback) = if feasible.is_empty() {
        (tasks[rng.gen_range(0..tasks.len())].clone(), true)
    } else {
        let id = ucb_select(bandit, &feasible)?;
        let task = tasks
            .iter()
            .find(|t| t.id == id)
            .cloned()
            .expect("selected id comes from the task list");
        (task, false)
    };
    bandit.record(task.id);
    Ok(Proposal {
        task,
        used_fallback,
    })
}
