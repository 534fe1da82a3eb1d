//! Turning stored trajectories into supervised (features, action) samples:
//! success filtering, hindsight goal relabeling, action chaining and
//! ratio-weighted mixing of datasets.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{vlm_successful, Trajectory, View};
use crate::policy::net::{Features, LangVocab, Variant};
use crate::rng::SimRng;
use crate::sim::{Action, Encoder, SceneState};
use crate::task::{Target, TaskSpec};
use crate::{Error, Result};

/// Inclusive range `[min, max]` of future offsets a hindsight goal is drawn from.
pub type GoalWindow = [usize; 2];

/// Hindsight relabeling: the goal for step `t` is the observation at `t + Δ`
/// with `Δ` uniform over the dataset's window, clipped to the final index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    pub pretrain_window: GoalWindow,
    pub autonomous_window: GoalWindow,
    /// Probability of using a hindsight goal instead of the commanded subgoal.
    pub hindsight_fraction: f64,
    /// Overrides `hindsight_fraction` for pretraining data.
    pub pretrain_fraction: Option<f64>,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        RelabelConfig {
            pretrain_window: [0, 24],
            autonomous_window: [0, 12],
            hindsight_fraction: 1.0,
            pretrain_fraction: None,
        }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in [self.pretrain_window, self.autonomous_window] {
            if lo > hi {
                return Err(Error::ConfigInvalid(format!("relabel window [{lo}, {hi}] is empty")));
            }
        }
        check_fraction(self.hindsight_fraction)?;
        check_fraction(self.pretrain_fraction())
    }

    pub fn pretrain_fraction(&self) -> f64 {
        self.pretrain_fraction.unwrap_or(self.hindsight_fraction)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(format!("hindsight fraction {f} outside [0, 1]")))
    }
}

/// Draws the goal observation index for step `t` of a trajectory whose last
/// observation index is `last`.
pub fn goal_index(window: GoalWindow, t: usize, last: usize, rng: &mut SimRng) -> usize {
    let room = last.saturating_sub(t);
    let hi = window[1].min(room);
    let lo = window[0].min(hi);
    t + rng.gen_range(lo..=hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalSource {
    /// Observation index used as a hindsight goal.
    Hindsight(usize),
    /// Subgoal commanded at collection time.
    Commanded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: usize,
    pub goal: GoalSource,
    pub features: Features,
    pub action: Action,
}

/// One goal-conditioned sample per step of `traj`.
pub fn hindsight_samples(
    traj: &Trajectory,
    encoder: &Encoder,
    window: GoalWindow,
    fraction: f64,
    rng: &mut SimRng,
) -> Result<Vec<Sample>> {
    check_fraction(fraction)?;
    if window[0] > window[1] {
        return Err(Error::ConfigInvalid(format!("relabel window {window:?} is empty")));
    }
    if traj.actions.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let last = traj.observations.len() - 1;
    let mut out = Vec::with_capacity(traj.horizon());
    for (t, &action) in traj.actions.iter().enumerate() {
        let (goal_state, goal) = if rng.gen_bool(fraction) {
            let i = goal_index(window, t, last, rng);
            (&traj.observations[i], GoalSource::Hindsight(i))
        } else {
            let g = traj.subgoal_at(t).ok_or_else(|| {
                Error::ValidationFailed(vec![format!("no subgoal in force at t={t}")])
            })?;
            (g, GoalSource::Commanded)
        };
        out.push(Sample {
            t,
            goal,
            features: gc_features(encoder, &traj.observations[t], goal_state)?,
            action,
        });
    }
    Ok(out)
}

/// Sparse (current, goal) pair input for the goal-conditioned policy.
pub fn gc_features(encoder: &Encoder, state: &SceneState, goal: &SceneState) -> Result<Features> {
    Ok(Features::binary(pair_indices(
        encoder,
        &encoder.active_indices(state)?,
        &encoder.active_indices(goal)?,
    )))
}

fn pair_indices(encoder: &Encoder, state: &[u32], goal: &[u32]) -> Vec<u32> {
    let offset = encoder.state_dim() as u32;
    state
        .iter()
        .copied()
        .chain(goal.iter().map(|i| i + offset))
        .collect()
}

/// Template, object-kind and target token ids of a task in `state`.
pub fn task_tokens(task: &TaskSpec, state: &SceneState, encoder: &Encoder) -> Result<[u32; 3]> {
    let object = state.object(&task.object)?.kind as u32;
    let target = match &task.target {
        Target::Container(c) => state.container(c)?.kind as u32,
        Target::Region(r) => (encoder.container_kinds + r.kind) as u32,
    };
    Ok([task.template.index() as u32, object, target])
}

pub fn lang_vocab(encoder: &Encoder, region_kinds: usize) -> LangVocab {
    LangVocab {
        templates: crate::task::Template::ALL.len(),
        object_kinds: encoder.object_kinds,
        targets: encoder.container_kinds + region_kinds,
    }
}

/// Input for the language-conditioned policy.
pub fn lc_features(encoder: &Encoder, state: &SceneState, task: &TaskSpec) -> Result<Features> {
    Ok(Features::binary(encoder.active_indices(state)?).with_tokens(task_tokens(task, state, encoder)?))
}

/// `out[t] = a[t] + a[t+1]` elementwise; the last action is kept as is.
pub fn chain_actions(actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = actions.first() else {
        return Ok(Vec::new());
    };
    let width = first.len();
    if let Some((index, a)) = actions.iter().enumerate().find(|(_, a)| a.len() != width) {
        return Err(Error::RaggedInput {
            expected: width,
            found: a.len(),
            index,
        });
    }
    Ok(actions
        .iter()
        .enumerate()
        .map(|(t, a)| match actions.get(t + 1) {
            Some(next) => a.iter().zip(next).map(|(x, y)| x + y).collect(),
            None => a.clone(),
        })
        .collect())
}

/// Trajectories the detector judged successful.
pub fn filter_success(records: &[Trajectory]) -> View<'_> {
    View::over(records).filter(vlm_successful)
}

/// Named dataset weights; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub ratios: BTreeMap<String, f64>,
}

pub const PRETRAIN: &str = "pretrain";
pub const AUTONOMOUS: &str = "autonomous";

impl MixtureConfig {
    pub fn only(name: &str) -> Self {
        MixtureConfig {
            ratios: BTreeMap::from([(name.to_string(), 1.0)]),
        }
    }

    /// `pretrain` share plus the autonomous remainder.
    pub fn pretrain_autonomous(pretrain: f64) -> Self {
        MixtureConfig {
            ratios: BTreeMap::from([
                (PRETRAIN.to_string(), pretrain),
                (AUTONOMOUS.to_string(), 1.0 - pretrain),
            ]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::ConfigInvalid("mixture has no datasets".into()));
        }
        if let Some((k, r)) = self.ratios.iter().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return Err(Error::ConfigInvalid(format!("mixture ratio for `{k}` is {r}")));
        }
        let sum: f64 = self.ratios.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::ConfigInvalid(format!("mixture ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Trajectory pre-encoded as sparse plane indices so that sampling is cheap.
#[derive(Debug, Clone)]
pub struct EncodedTrajectory {
    observations: Vec<Vec<u32>>,
    actions: Vec<Action>,
    /// Encoded commanded subgoal per step.
    subgoal_of_step: Vec<usize>,
    subgoals: Vec<Vec<u32>>,
    tokens: [u32; 3],
}

impl EncodedTrajectory {
    pub fn new(traj: &Trajectory, encoder: &Encoder) -> Result<Self> {
        if traj.actions.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let observations = traj
            .observations
            .iter()
            .map(|s| encoder.active_indices(s))
            .collect::<Result<Vec<_>>>()?;
        let subgoals = traj
            .subgoals
            .iter()
            .map(|s| encoder.active_indices(&s.goal))
            .collect::<Result<Vec<_>>>()?;
        let subgoal_of_step = (0..traj.horizon())
            .map(|t| {
                traj.subgoals
                    .iter()
                    .rposition(|s| s.timestep <= t)
                    .ok_or_else(|| Error::ValidationFailed(vec![format!("no subgoal at t={t}")]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedTrajectory {
            observations,
            actions: traj.actions.clone(),
            subgoal_of_step,
            subgoals,
            tokens: task_tokens(&traj.task, &traj.observations[0], encoder)?,
        })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// One named, pre-encoded dataset; samples uniformly over its transitions.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    trajectories: Vec<EncodedTrajectory>,
    window: GoalWindow,
    /// Probability a GC sample uses a hindsight goal.
    fraction: f64,
    /// Cumulative step counts for uniform transition sampling.
    cumulative: Vec<usize>,
}

impl EncodedDataset {
    pub fn new<'a>(
        records: impl IntoIterator<Item = &'a Trajectory>,
        encoder: &Encoder,
        window: GoalWindow,
        fraction: f64,
    ) -> Result<Self> {
        if window[0] > window[1] {
            return Err(Error::ConfigInvalid(format!("relabel window {window:?} is empty")));
        }
        check_fraction(fraction)?;
        let trajectories = records
            .into_iter()
            .map(|t| EncodedTrajectory::new(t, encoder))
            .collect::<Result<Vec<_>>>()?;
        let mut cumulative = Vec::with_capacity(trajectories.len());
        let mut total = 0;
        for t in &trajectories {
            total += t.horizon();
            cumulative.push(total);
        }
        Ok(EncodedDataset {
            trajectories,
            window,
            fraction,
            cumulative,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    fn sample(
        &self,
        variant: Variant,
        encoder: &Encoder,
        rng: &mut SimRng,
    ) -> (Features, Action) {
        let k = rng.gen_range(0..self.transitions());
        let i = self.cumulative.partition_point(|c| *c <= k);
        let traj = &self.trajectories[i];
        let t = k - if i == 0 { 0 } else { self.cumulative[i - 1] };
        let action = traj.actions[t];
        let features = match variant {
            Variant::Gc => {
                let goal = if rng.gen_bool(self.fraction) {
                    let g = goal_index(self.window, t, traj.observations.len() - 1, rng);
                    &traj.observations[g]
                } else {
                    &traj.subgoals[traj.subgoal_of_step[t]]
                };
                Features::binary(pair_indices(encoder, &traj.observations[t], goal))
            }
            Variant::Lc => {
                Features::binary(traj.observations[t].iter().copied()).with_tokens(traj.tokens)
            }
        };
        (features, action)
    }
}

/// Draws training samples: dataset by ratio, then a uniform transition within it.
pub struct MixtureSampler<'a> {
    datasets: Vec<(&'a EncodedDataset, f64)>,
    variant: Variant,
    encoder: Encoder,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(
        datasets: &'a BTreeMap<String, EncodedDataset>,
        mix: &MixtureConfig,
        variant: Variant,
        encoder: Encoder,
    ) -> Result<Self> {
        mix.validate()?;
        let mut chosen = Vec::new();
        for (name, ratio) in &mix.ratios {
            if *ratio == 0.0 {
                continue;
            }
            let d = datasets
                .get(name)
                .filter(|d| d.transitions() > 0)
                .ok_or_else(|| Error::EmptyDataset(name.clone()))?;
            chosen.push((d, *ratio));
        }
        Ok(MixtureSampler {
            datasets: chosen,
            variant,
            encoder,
        })
    }

    pub fn sample(&self, rng: &mut SimRng) -> (Features, Action) {
        let (_, f, a) = self.sample_with_source(rng);
        (f, a)
    }

    /// Like [`sample`](Self::sample) but also returns the position of the
    /// chosen dataset among the non-zero mixture entries (in name order).
    pub fn sample_with_source(&self, rng: &mut SimRng) -> (usize, Features, Action) {
        let mut u = rng.gen::<f64>();
        let mut pick = self.datasets.len() - 1;
        for (i, (_, r)) in self.datasets.iter().enumerate() {
            if u < *r {
                pick = i;
                break;
            }
            u -= r;
        }
        let (f, a) = self.datasets[pick]
            .0
            .sample(self.variant, &self.encoder, rng);
        (pick, f, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chaining_sums_consecutive_actions() {
        assert_eq!(chain_actions(&[vec![1.0, 0.0]]).unwrap(), vec![vec![1.0, 0.0]]);
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(
            chain_actions(&a).unwrap(),
            vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, 0.0]]
        );
        let zeros = vec![vec![0.0; 3]; 4];
        assert_eq!(chain_actions(&zeros).unwrap(), zeros);
        assert!(matches!(
            chain_actions(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::RaggedInput {
                expected: 1,
                found: 2,
                index: 1
            })
        ));
    }

    #[test]
    fn goal_window_is_clipped_at_the_end() {
        let mut rng = crate::rng::seeded(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            seen.insert(goal_index([0, 12], 95, 100, &mut rng));
        }
        assert_eq!(seen, (95..=100).collect());
        for _ in 0..100 {
            assert_eq!(goal_index([0, 12], 100, 100, &mut rng), 100);
            assert_eq!(goal_index([0, 0], 40, 100, &mut rng), 40);
        }
        assert_eq!(goal_index([3, 5], 99, 100, &mut rng), 100);
    }

    #[test]
    fn mixture_validation() {
        assert!(MixtureConfig::pretrain_autonomous(0.3).validate().is_ok());
        let mut m = MixtureConfig::pretrain_autonomous(0.3);
        m.ratios.insert(PRETRAIN.into(), 0.31);
        assert!(matches!(m.validate(), Err(Error::ConfigInvalid(_))));
        let mut m = MixtureConfig::pretrain_autonomous(0.3);
        m.ratios.insert(AUTONOMOUS.into(), 0.7 + 5e-10);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn missing_dataset_is_reported() {
        let data = BTreeMap::new();
        let enc = Encoder::new(4, 4, 1, 1);
        let r = MixtureSampler::new(
            &data,
            &MixtureConfig::only(AUTONOMOUS),
            Variant::Gc,
            enc,
        );
        assert!(matches!(r, Err(Error::EmptyDataset(_))));
    }
}
