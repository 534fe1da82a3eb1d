//! Templated stand-in for the vision-language model: tasks become yes/no
//! questions, answers come back as free text, and a small cue grammar turns
//! them into booleans. Success labels pass through a calibrated noise model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::sim::{Predicate, SceneState};
use crate::task::{display_name, Target, TaskSpec, Template};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaPair {
    pub question: String,
    /// The answer under which the task can be attempted. Success is implied by
    /// the opposite answer.
    pub answer_implies_feasible: bool,
    pub predicate: Predicate,
}

impl VqaPair {
    pub fn answer_implies_success(&self) -> bool {
        !self.answer_implies_feasible
    }
}

const SURFACE_WORDS: [&str; 6] = ["plate", "tray", "cloth", "towel", "board", "platform"];

/// Flat receptacles take "on", everything else "in".
pub fn preposition(container: &str) -> &'static str {
    let last = container.rsplit(['_', ' ']).next().unwrap_or(container);
    if SURFACE_WORDS.contains(&last) {
        "on"
    } else {
        "in"
    }
}

pub fn translate_task(task: &TaskSpec) -> Result<VqaPair> {
    let o = display_name(&task.object);
    let predicate = task.predicate()?;
    let (question, answer_implies_feasible) = match (&task.template, &task.target) {
        (Template::PutIn, Target::Container(c)) => (
            format!("Is the {o} {} the {}?", preposition(c), display_name(c)),
            false,
        ),
        (Template::TakeOut, Target::Container(c)) => (
            format!(
                "Is the {o} currently {} the {}?",
                preposition(c),
                display_name(c)
            ),
            true,
        ),
        (Template::MoveToRegion, Target::Region(r)) => (
            format!("Is the {o} in the {}?", display_name(&r.name)),
            false,
        ),
        (t, _) => return Err(Error::UnsupportedTemplate(format!("{t:?}"))),
    };
    Ok(VqaPair {
        question,
        answer_implies_feasible,
        predicate,
    })
}

fn describe(state: &SceneState, p: &Predicate, holds: bool) -> Result<String> {
    let at = |pos: crate::sim::GridPos| format!("at column {}, row {}", pos.x, pos.y);
    Ok(match p {
        Predicate::InContainer(o, c) => {
            let (on, cn) = (display_name(o), display_name(c));
            let prep = preposition(c);
            if holds {
                format!("the {on} is {prep} the {cn}.")
            } else if state.holding.as_deref() == Some(o.as_str()) {
                format!("the gripper is holding the {on} above the table.")
            } else if let Some(other) = &state.object(o)?.container {
                format!("the {on} is placed {} the {}.", preposition(other), display_name(other))
            } else {
                format!(
                    "the {on} is placed outside the {cn}, on the table {}.",
                    at(state.object(o)?.pos)
                )
            }
        }
        Predicate::OnTable(o) => {
            let on = display_name(o);
            if holds {
                format!("the {on} is lying on the table {}.", at(state.object(o)?.pos))
            } else if state.holding.as_deref() == Some(o.as_str()) {
                format!("the gripper is holding the {on}.")
            } else {
                format!("the {on} is inside a container.")
            }
        }
        Predicate::GripperAt(pos) => {
            if holds {
                format!("the gripper is {}.", at(*pos))
            } else {
                format!("the gripper is {} instead.", at(state.gripper))
            }
        }
        Predicate::InRegion(o, r) => {
            let (on, rn) = (display_name(o), display_name(&r.name));
            if holds {
                format!("the {on} is in the {rn}.")
            } else {
                format!("the {on} is {}, away from the {rn}.", at(state.object(o)?.pos))
            }
        }
    })
}

/// Free-text reply: a leading `Yes,`/`No,` cue followed by a grounded description.
pub fn answer_question(state: &SceneState, pair: &VqaPair) -> Result<String> {
    let holds = state.predicate_holds(&pair.predicate)?;
    let cue = if holds { "Yes" } else { "No" };
    Ok(format!("{cue}, {}", describe(state, &pair.predicate, holds)?))
}

const AFFIRM: [&str; 4] = ["yes", "yeah", "yep", "correct"];
const DENY: [&str; 3] = ["no", "nope", "incorrect"];
const NEGATIONS: [&str; 6] = [
    "is not",
    "isn't",
    "is no longer",
    "are not",
    "aren't",
    "not in",
];

/// Reduces a free-text reply to a boolean.
///
/// 1. A leading affirmation (`yes`, `yeah`, `yep`, `correct`) or denial
///    (`no`, `nope`, `incorrect`) decides.
/// 2. Otherwise any negation phrase (`is not`, `isn't`, ...) means false.
/// 3. Otherwise the first standalone `yes`/`no` word anywhere decides.
/// 4. Otherwise the reply is unparseable.
pub fn decode_answer(text: &str) -> Result<bool> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .collect();
    if let Some(first) = words.first() {
        if AFFIRM.contains(first) {
            return Ok(true);
        }
        if DENY.contains(first) {
            return Ok(false);
        }
    }
    let squashed = words.join(" ");
    if NEGATIONS.iter().any(|n| {
        squashed == *n
            || squashed.starts_with(&format!("{n} "))
            || squashed.contains(&format!(" {n} "))
            || squashed.ends_with(&format!(" {n}"))
    }) {
        return Ok(false);
    }
    for w in &words {
        if *w == "yes" {
            return Ok(true);
        }
        if *w == "no" {
            return Ok(false);
        }
    }
    Err(Error::Unparseable(text.to_string()))
}

/// Label-noise model of the success detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Probability a ground-truth failure is labelled a success.
    pub fp_rate: f64,
    /// Probability a ground-truth success is labelled a failure.
    pub fn_rate: f64,
    /// Per-task false-positive overrides keyed by task language.
    pub fp_overrides: BTreeMap<String, f64>,
    /// Probability a feasibility answer is flipped. Zero unless ablating.
    pub feasibility_flip: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            fp_rate: 0.0,
            fn_rate: 0.0,
            fp_overrides: BTreeMap::new(),
            feasibility_flip: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.fp_rate, self.fn_rate, self.feasibility_flip]
            .into_iter()
            .chain(self.fp_overrides.values().copied());
        for r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::ConfigInvalid(format!(
                    "detector rate {r} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn fp_for(&self, task: &TaskSpec) -> f64 {
        self.fp_overrides
            .get(&task.language)
            .copied()
            .unwrap_or(self.fp_rate)
    }
}

/// The seam a real vision-language model adapter plugs into.
pub trait OracleClient: Send + Sync {
    fn judge_feasible(&self, state: &SceneState, task: &TaskSpec, rng: &mut SimRng)
        -> Result<bool>;
    fn judge_success(&self, final_state: &SceneState, task: &TaskSpec, rng: &mut SimRng)
        -> Result<bool>;
}

/// Answers from simulator ground truth, then applies the configured label noise.
#[derive(Debug, Clone, Default)]
pub struct TruthfulOracle {
    pub detector: DetectorConfig,
}

impl TruthfulOracle {
    pub fn new(detector: DetectorConfig) -> Self {
        TruthfulOracle { detector }
    }
}

impl OracleClient for TruthfulOracle {
    fn judge_feasible(
        &self,
        state: &SceneState,
        task: &TaskSpec,
        rng: &mut SimRng,
    ) -> Result<bool> {
        let feasible = judge_feasible(state, task)?;
        if self.detector.feasibility_flip > 0.0 && rng.gen_bool(self.detector.feasibility_flip) {
            return Ok(!feasible);
        }
        Ok(feasible)
    }

    fn judge_success(
        &self,
        final_state: &SceneState,
        task: &TaskSpec,
        rng: &mut SimRng,
    ) -> Result<bool> {
        judge_success(final_state, task, &self.detector, rng)
    }
}

/// Noiseless feasibility: the decoded answer matches the feasibility-implying answer.
pub fn judge_feasible(state: &SceneState, task: &TaskSpec) -> Result<bool> {
    let pair = translate_task(task)?;
    Ok(decode_answer(&answer_question(state, &pair)?)? == pair.answer_implies_feasible)
}

/// Ground truth as read back through the question/answer round trip.
pub fn detected_truth(final_state: &SceneState, task: &TaskSpec) -> Result<bool> {
    let pair = translate_task(task)?;
    Ok(decode_answer(&answer_question(final_state, &pair)?)? == pair.answer_implies_success())
}

/// Noisy success label. Exactly one uniform draw per call keeps streams aligned.
pub fn judge_success(
    final_state: &SceneState,
    task: &TaskSpec,
    cfg: &DetectorConfig,
    rng: &mut impl Rng,
) -> Result<bool> {
    let truth = detected_truth(final_state, task)?;
    let u: f64 = rng.gen();
    Ok(if truth {
        u >= cfg.fn_rate
    } else {
        u < cfg.fp_for(task)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub fp_rate: f64,
    pub fn_rate: f64,
    /// `None` when every base rate is consistent (a perfect detector).
    pub base_rate: Option<f64>,
}

/// Forward confusion-matrix relations: `(precision, recall, accuracy)`.
pub fn detector_metrics(fp_rate: f64, fn_rate: f64, base_rate: f64) -> (f64, f64, f64) {
    let tp = base_rate * (1.0 - fn_rate);
    let fp = (1.0 - base_rate) * fp_rate;
    let tn = (1.0 - base_rate) * (1.0 - fp_rate);
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
    let recall = if base_rate > 0.0 { 1.0 - fn_rate } else { 1.0 };
    (precision, recall, tp + tn)
}

/// Inverts the confusion-matrix relations for a measured (precision, recall, accuracy).
pub fn calibrate_detector(precision: f64, recall: f64, accuracy: f64) -> Result<Calibration> {
    let inconsistent =
        || Error::Inconsistent(format!("precision {precision}, recall {recall}, accuracy {accuracy}"));
    if !(0.0..=1.0).contains(&recall) || !(0.0..=1.0).contains(&accuracy) || !(precision > 0.0 && precision <= 1.0) {
        return Err(inconsistent());
    }
    let fn_rate = 1.0 - recall;
    // accuracy = 1 - s * (1 - recall + recall * (1 - precision) / precision)
    let slope = 1.0 - recall + recall * (1.0 - precision) / precision;
    let miss = 1.0 - accuracy;
    const EPS: f64 = 1e-12;
    if slope.abs() < EPS {
        return if miss.abs() < EPS {
            Ok(Calibration {
                fp_rate: 0.0,
                fn_rate,
                base_rate: None,
            })
        } else {
            Err(inconsistent())
        };
    }
    let s = miss / slope;
    if !(0.0..=1.0).contains(&s) {
        return Err(inconsistent());
    }
    let false_pos_mass = s * recall * (1.0 - precision) / precision;
    let fp_rate = if 1.0 - s > EPS {
        false_pos_mass / (1.0 - s)
    } else if false_pos_mass < EPS {
        0.0
    } else {
        return Err(inconsistent());
    };
    if !(0.0..=1.0 + EPS).contains(&fp_rate) {
        return Err(inconsistent());
    }
    let fp_rate = fp_rate.min(1.0);
    let (p, r, a) = detector_metrics(fp_rate, fn_rate, s);
    if (p - precision).abs() > 1e-9 || (a - accuracy).abs() > 1e-9 || (s > 0.0 && (r - recall).abs() > 1e-9) {
        return Err(inconsistent());
    }
    Ok(Calibration {
        fp_rate,
        fn_rate,
        base_rate: Some(s),
    })
}
