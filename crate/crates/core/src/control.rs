//! Low-level controllers that map (state, subgoal, task) to a grid action.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::data::{gc_features, lc_features};
use crate::policy::net::{policy_forward, softmax, PolicyParams, Variant};
use crate::rng::SimRng;
use crate::sim::{scripted_expert_action, Action, Encoder, GridPos, SceneState};
use crate::subgoal::final_goal;
use crate::task::TaskSpec;
use crate::{Error, Result};

pub trait Controller: Send + Sync {
    fn act(
        &self,
        state: &SceneState,
        subgoal: &SceneState,
        task: &TaskSpec,
        rng: &mut SimRng,
    ) -> Result<Action>;

    /// Identifier stored with every trajectory this controller produces.
    fn version(&self) -> String;
}

/// Noisy scripted expert steering toward the current subgoal.
#[derive(Debug, Clone, Copy)]
pub struct ExpertController {
    pub epsilon: f64,
}

impl Controller for ExpertController {
    fn act(&self, state: &SceneState, subgoal: &SceneState, _: &TaskSpec, rng: &mut SimRng) -> Result<Action> {
        match scripted_expert_action(state, subgoal, self.epsilon, rng) {
            Err(Error::Unreachable) => Ok(Action::random(rng)),
            other => other,
        }
    }

    fn version(&self) -> String {
        format!("expert-eps{}", self.epsilon)
    }
}

/// Noisy scripted expert that ignores the subgoal and heads for the task's
/// final goal (object placed, gripper home) without idling in between.
#[derive(Debug, Clone, Copy)]
pub struct DirectExpert {
    pub epsilon: f64,
    pub home: GridPos,
}

impl Controller for DirectExpert {
    fn act(&self, state: &SceneState, _: &SceneState, task: &TaskSpec, rng: &mut SimRng) -> Result<Action> {
        let goal = match final_goal(state, task, self.home) {
            Ok(g) => g,
            Err(Error::Unreachable) => return Ok(Action::random(rng)),
            Err(e) => return Err(e),
        };
        ExpertController {
            epsilon: self.epsilon,
        }
        .act(state, &goal, task, rng)
    }

    fn version(&self) -> String {
        format!("direct-expert-eps{}", self.epsilon)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomController;

impl Controller for RandomController {
    fn act(&self, _: &SceneState, _: &SceneState, _: &TaskSpec, rng: &mut SimRng) -> Result<Action> {
        Ok(Action::random(rng))
    }

    fn version(&self) -> String {
        "random".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Sample from the softmax over action logits.
    Sample,
    /// Sample from the softmax of `logits / temperature`.
    Tempered(f64),
    Greedy,
}

/// A trained network. The GC variant reads the subgoal; the LC variant reads
/// the task's language tokens and ignores the subgoal.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub params: PolicyParams,
    pub encoder: Encoder,
    pub decoding: Decoding,
    version: String,
}

impl PolicyController {
    pub fn new(params: PolicyParams, encoder: Encoder, decoding: Decoding) -> Self {
        let version = params.version();
        PolicyController {
            params,
            encoder,
            decoding,
            version,
        }
    }

    pub fn logits(&self, state: &SceneState, subgoal: &SceneState, task: &TaskSpec) -> Result<Vec<f64>> {
        let features = match self.params.dims.variant {
            Variant::Gc => gc_features(&self.encoder, state, subgoal)?,
            Variant::Lc => lc_features(&self.encoder, state, task)?,
        };
        Ok(policy_forward(&self.params, &features)?.to_vec())
    }

    /// The distribution `act` samples from (one-hot for greedy decoding).
    pub fn action_probs(&self, state: &SceneState, subgoal: &SceneState, task: &TaskSpec) -> Result<Vec<f64>> {
        let z = self.logits(state, subgoal, task)?;
        Ok(match self.decoding {
            Decoding::Sample => softmax(&z),
            Decoding::Tempered(t) => softmax(&z.iter().map(|v| v / t).collect::<Vec<_>>()),
            Decoding::Greedy => {
                let best = z
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > z[best] { i } else { best });
                (0..z.len()).map(|i| (i == best) as u8 as f64).collect()
            }
        })
    }
}

impl Controller for PolicyController {
    fn act(&self, state: &SceneState, subgoal: &SceneState, task: &TaskSpec, rng: &mut SimRng) -> Result<Action> {
        let p = self.action_probs(state, subgoal, task)?;
        let i = match self.decoding {
            Decoding::Greedy => p.iter().position(|v| *v == 1.0).unwrap_or(0),
            Decoding::Sample | Decoding::Tempered(_) => {
                let mut u = rng.gen::<f64>();
                let mut pick = p.len() - 1;
                for (i, v) in p.iter().enumerate() {
                    if u < *v {
                        pick = i;
                        break;
                    }
                    u -= v;
                }
                pick
            }
        };
        Ok(Action::from_index(i).expect("policy has one logit per action"))
    }

    fn version(&self) -> String {
        self.version.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::data::lang_vocab;
    use crate::policy::{init_policy, policy_dims, TrainConfig};
    use crate::sim::make_scene;
    use crate::testutil::desk;

    fn policy(decoding: Decoding) -> PolicyController {
        let scene = desk();
        let enc = Encoder::for_config(&scene);
        let dims = policy_dims(Variant::Gc, &enc, lang_vocab(&enc, 1), &TrainConfig::default());
        PolicyController::new(init_policy(dims, 3).unwrap(), enc, decoding)
    }

    #[test]
    fn decodings_reshape_the_same_logits() {
        let scene = desk();
        let s = make_scene(&scene, 0).unwrap();
        let task = &scene.tasks().unwrap()[0];
        let sample = policy(Decoding::Sample).action_probs(&s, &s, task).unwrap();
        let unit = policy(Decoding::Tempered(1.0)).action_probs(&s, &s, task).unwrap();
        let cold = policy(Decoding::Tempered(0.5)).action_probs(&s, &s, task).unwrap();
        let greedy = policy(Decoding::Greedy).action_probs(&s, &s, task).unwrap();
        for p in [&sample, &cold, &greedy] {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sample.iter().zip(&unit).all(|(a, b)| (a - b).abs() < 1e-12));
        let best = (0..7).fold(0, |b, i| if sample[i] > sample[b] { i } else { b });
        assert_eq!(greedy[best], 1.0);
        assert!(cold[best] >= sample[best]);
        let mut rng = crate::rng::seeded(0);
        let p = policy(Decoding::Greedy);
        for _ in 0..20 {
            assert_eq!(p.act(&s, &s, task, &mut rng).unwrap().index(), best);
        }
    }

    #[test]
    fn sampling_follows_the_distribution() {
        let scene = desk();
        let s = make_scene(&scene, 0).unwrap();
        let task = &scene.tasks().unwrap()[0];
        let p = policy(Decoding::Sample);
        let probs = p.action_probs(&s, &s, task).unwrap();
        let mut rng = crate::rng::seeded(1);
        let n = 20_000;
        let mut counts = [0usize; 7];
        for _ in 0..n {
            counts[p.act(&s, &s, task, &mut rng).unwrap().index()] += 1;
        }
        for (c, q) in counts.iter().zip(&probs) {
            assert!((*c as f64 / n as f64 - q).abs() < 0.015);
        }
    }

    #[test]
    fn noiseless_expert_idles_at_its_goal() {
        let scene = desk();
        let s = make_scene(&scene, 0).unwrap();
        let task = &scene.tasks().unwrap()[0];
        let mut rng = crate::rng::seeded(0);
        let e = ExpertController { epsilon: 0.0 };
        assert_eq!(e.act(&s, &s, task, &mut rng).unwrap(), Action::NoOp);
        assert_eq!(e.version(), "expert-eps0");
        assert_eq!(RandomController.version(), "random");
    }

    #[test]
    fn direct_expert_solves_put_in_without_subgoals() {
        let scene = desk();
        let mut s = make_scene(&scene, 2).unwrap();
        let task = &scene.tasks().unwrap()[0];
        let e = DirectExpert {
            epsilon: 0.0,
            home: scene.home,
        };
        let mut rng = crate::rng::seeded(0);
        for _ in 0..100 {
            let a = e.act(&s, &s, task, &mut rng).unwrap();
            s.apply(a);
        }
        assert!(task.is_satisfied(&s).unwrap());
    }

    #[test]
    fn decoding_round_trips_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct W {
            d: Decoding,
        }
        let w: W = toml::from_str("d = { tempered = 0.5 }").unwrap();
        assert_eq!(w.d, Decoding::Tempered(0.5));
        let w: W = toml::from_str("d = \"greedy\"").unwrap();
        assert_eq!(w.d, Decoding::Greedy);
    }
}
