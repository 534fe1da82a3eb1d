//! Autonomous self-improvement of a grid-world tabletop manipulation policy:
//! a simulated scene, a question-answering oracle, curiosity-driven task
//! selection, subgoal generation, behavior cloning and a trajectory store.

pub mod collector;
pub mod control;
pub mod datastore;
mod error;
pub mod experiment;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod subgoal;
pub mod task;
pub mod task_select;
pub mod vqa;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
