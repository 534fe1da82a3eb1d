use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastore::{vlm_successful, Trajectory};
use crate::policy::data::{EncodedDataset, MixtureConfig, MixtureSampler, RelabelConfig, AUTONOMOUS, PRETRAIN};
use crate::policy::net::{accumulate_grad, init_policy, sgd_update_in_place, LangVocab, PolicyDims, PolicyParams, Variant};
use crate::sim::Encoder;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain `params - step * gradient`.
    #[default]
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, gradient: &[f64], step: f64) -> Result<()> {
        if gradient.len() != params.theta.len() || self.m.len() != params.theta.len() {
            return Err(Error::DimMismatch(format!(
                "gradient length {} vs {} parameters",
                gradient.len(),
                params.theta.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((w, g), m), v) in params.theta.iter_mut().zip(gradient).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *w -= step * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `step_size` to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn step_size(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub step_size: f64,
    pub batch_size: usize,
    pub gradient_steps: usize,
    pub seed: u64,
    pub hidden: [usize; 2],
    pub embed_dim: usize,
    /// Train on every autonomous trajectory instead of detector-approved ones.
    pub train_on_failures: bool,
    /// Record the mean batch loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Constant,
            step_size: 1e-2,
            batch_size: 64,
            gradient_steps: 4000,
            seed: 0,
            hidden: [64, 64],
            embed_dim: 8,
            train_on_failures: false,
            log_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::ConfigInvalid(format!("step size {} must be positive", self.step_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch size must be positive".into()));
        }
        if self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::ConfigInvalid("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Network shape shared by training and inference.
pub fn policy_dims(variant: Variant, encoder: &Encoder, vocab: LangVocab, cfg: &TrainConfig) -> PolicyDims {
    PolicyDims {
        variant,
        plane_dim: match variant {
            Variant::Gc => encoder.pair_dim(),
            Variant::Lc => encoder.state_dim(),
        },
        hidden: cfg.hidden,
        embed_dim: cfg.embed_dim,
        vocab,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// (gradient step, mean batch loss)
    pub losses: Vec<(usize, f64)>,
}

/// Behavior-clones a policy from scratch on the given datasets.
///
/// Autonomous trajectories are filtered to detector-approved ones unless
/// `train_on_failures` is set; relabeling happens on the filtered set.
#[allow(clippy::too_many_arguments)]
pub fn train(
    variant: Variant,
    encoder: &Encoder,
    vocab: LangVocab,
    pretrain: &[Trajectory],
    autonomous: Option<&[Trajectory]>,
    relabel: &RelabelConfig,
    mix: &MixtureConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    relabel.validate()?;
    let mut data = BTreeMap::new();
    data.insert(
        PRETRAIN.to_string(),
        EncodedDataset::new(pretrain, encoder, relabel.pretrain_window, relabel.pretrain_fraction())?,
    );
    if let Some(auto) = autonomous {
        let kept = auto.iter().filter(|t| cfg.train_on_failures || vlm_successful(t));
        data.insert(
            AUTONOMOUS.to_string(),
            EncodedDataset::new(kept, encoder, relabel.autonomous_window, relabel.hindsight_fraction)?,
        );
    }
    train_encoded(variant, encoder, vocab, &data, mix, cfg)
}

pub fn train_encoded(
    variant: Variant,
    encoder: &Encoder,
    vocab: LangVocab,
    data: &BTreeMap<String, EncodedDataset>,
    mix: &MixtureConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = MixtureSampler::new(data, mix, variant, *encoder)?;
    let mut params = init_policy(policy_dims(variant, encoder, vocab, cfg), cfg.seed)?;
    let mut rng = crate::rng::derived(cfg.seed, "train", 0);
    let mut grad = vec![0.0; params.theta.len()];
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| AdamState::new(grad.len()));
    let mut losses = Vec::new();
    let mut running = 0.0;
    for step in 0..cfg.gradient_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let batch: Vec<_> = (0..cfg.batch_size).map(|_| sampler.sample(&mut rng)).collect();
        let loss = accumulate_grad(&params, batch.iter().map(|(f, a)| (f, *a)), batch.len(), &mut grad)?;
        let lr = cfg.schedule.step_size(cfg.step_size, step, cfg.gradient_steps);
        match &mut adam {
            Some(state) => state.step(&mut params, &grad, lr)?,
            None => sgd_update_in_place(&mut params, &grad, lr)?,
        }
        running += loss;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            losses.push((step + 1, running / cfg.log_every as f64));
            running = 0.0;
        }
    }
    Ok(TrainOutcome { params, losses })
}
