//! Goal- and language-conditioned behavior-cloning policies.

pub mod data;
pub mod eval;
pub mod net;
pub mod train;

pub use data::{
    chain_actions, filter_success, goal_index, hindsight_samples, GoalWindow, EncodedDataset, MixtureConfig, MixtureSampler,
    RelabelConfig, AUTONOMOUS, PRETRAIN,
};
pub use eval::{evaluate, feasible_start, EvalConfig, EvalReport, TaskEval};
pub use net::{
    init_policy, loss, loss_and_grad, policy_forward, sgd_update, Features, LangVocab, PolicyDims,
    PolicyParams, Variant,
};
pub use train::{policy_dims, train, train_encoded, AdamState, Optimizer, Schedule, TrainConfig, TrainOutcome};
