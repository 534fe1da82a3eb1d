//! Language task templates bound to concrete scene identities.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sim::{Predicate, Region, SceneState};
use crate::vqa::preposition;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Template {
    PutIn,
    TakeOut,
    MoveToRegion,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::PutIn, Template::TakeOut, Template::MoveToRegion];

    pub fn index(self) -> usize {
        match self {
            Template::PutIn => 0,
            Template::TakeOut => 1,
            Template::MoveToRegion => 2,
        }
    }
}

/// What a task acts upon besides its object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Container(String),
    Region(Region),
}

impl Target {
    pub fn name(&self) -> &str {
        match self {
            Target::Container(c) => c,
            Target::Region(r) => &r.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub template: Template,
    pub object: String,
    pub target: Target,
    pub language: String,
}

/// Turns an identifier such as `green_block` into the phrase `green block`.
pub fn display_name(id: &str) -> String {
    id.replace('_', " ")
}

impl TaskSpec {
    pub fn new(id: TaskId, template: Template, object: &str, target: Target) -> Result<Self> {
        let o = display_name(object);
        let language = match (template, &target) {
            (Template::PutIn, Target::Container(c)) => {
                format!("put the {o} {} the {}", preposition(c), display_name(c))
            }
            (Template::TakeOut, Target::Container(c)) if preposition(c) == "on" => {
                format!("move the {o} from the {} to the table", display_name(c))
            }
            (Template::TakeOut, Target::Container(c)) => {
                format!("take the {o} out of the {}", display_name(c))
            }
            (Template::MoveToRegion, Target::Region(r)) => {
                format!("move the {o} to the {}", display_name(&r.name))
            }
            (t, target) => {
                return Err(Error::UnsupportedTemplate(format!(
                    "{t:?} with target {}",
                    target.name()
                )))
            }
        };
        Ok(TaskSpec {
            id,
            template,
            object: object.to_string(),
            target,
            language,
        })
    }

    /// The predicate whose truth value the task is about. `PutIn` and `TakeOut`
    /// on the same pair share it.
    pub fn predicate(&self) -> Result<Predicate> {
        match (&self.template, &self.target) {
            (Template::PutIn | Template::TakeOut, Target::Container(c)) => {
                Ok(Predicate::InContainer(self.object.clone(), c.clone()))
            }
            (Template::MoveToRegion, Target::Region(r)) => {
                Ok(Predicate::InRegion(self.object.clone(), r.clone()))
            }
            _ => Err(Error::UnsupportedTemplate(format!("{:?}", self.template))),
        }
    }

    /// Truth value of [`Self::predicate`] that means the task has been accomplished.
    pub fn success_value(&self) -> bool {
        !matches!(self.template, Template::TakeOut)
    }

    /// Ground-truth success, read directly from simulator state.
    pub fn is_satisfied(&self, state: &SceneState) -> Result<bool> {
        Ok(state.predicate_holds(&self.predicate()?)? == self.success_value())
    }
}
