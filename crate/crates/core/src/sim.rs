//! Discrete reset-free tabletop world.
//!
//! The world is a `width × height` grid holding a gripper, graspable objects,
//! containers and static barrier cells. Every action is total: anything that
//! cannot be carried out degrades to a no-op, so a collection run can continue
//! from whatever state the previous episode left behind.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::task::{Target, TaskId, TaskSpec, Template};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct GridPos {
    pub x: i32,
    pub y: i32,
}

impl GridPos {
    pub const fn new(x: i32, y: i32) -> Self {
        GridPos { x, y }
    }

    pub fn manhattan(self, other: GridPos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn chebyshev(self, other: GridPos) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn offset(self, dx: i32, dy: i32) -> GridPos {
        GridPos::new(self.x + dx, self.y + dy)
    }
}

impl From<[i32; 2]> for GridPos {
    fn from([x, y]: [i32; 2]) -> Self {
        GridPos { x, y }
    }
}

impl From<GridPos> for [i32; 2] {
    fn from(p: GridPos) -> Self {
        [p.x, p.y]
    }
}

/// Inclusive axis-aligned rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub min: GridPos,
    pub max: GridPos,
}

impl Rect {
    pub fn cell(p: GridPos) -> Self {
        Rect { min: p, max: p }
    }

    pub fn contains(&self, p: GridPos) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = GridPos> + '_ {
        (self.min.y..=self.max.y)
            .flat_map(move |y| (self.min.x..=self.max.x).map(move |x| GridPos::new(x, y)))
    }

    pub fn translated(&self, dx: i32, dy: i32) -> Rect {
        Rect {
            min: self.min.offset(dx, dy),
            max: self.max.offset(dx, dy),
        }
    }
}

/// Named table region used by `MoveToRegion` tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub kind: usize,
    pub min: GridPos,
    pub max: GridPos,
}

impl Region {
    pub fn rect(&self) -> Rect {
        Rect {
            min: self.min,
            max: self.max,
        }
    }

    pub fn contains(&self, p: GridPos) -> bool {
        self.rect().contains(p)
    }

    pub fn centroid(&self) -> GridPos {
        GridPos::new((self.min.x + self.max.x) / 2, (self.min.y + self.max.y) / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    MoveNorth,
    MoveSouth,
    MoveEast,
    MoveWest,
    Grasp,
    Release,
    NoOp,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::MoveNorth,
        Action::MoveSouth,
        Action::MoveEast,
        Action::MoveWest,
        Action::Grasp,
        Action::Release,
        Action::NoOp,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn random(rng: &mut impl Rng) -> Action {
        Action::ALL[rng.gen_range(0..Action::COUNT)]
    }

    /// Grid displacement of a move; north is towards row 0.
    pub fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::MoveNorth => Some((0, -1)),
            Action::MoveSouth => Some((0, 1)),
            Action::MoveEast => Some((1, 0)),
            Action::MoveWest => Some((-1, 0)),
            _ => None,
        }
    }

    /// Continuous form `[dx, dy, gripper]`, with `gripper` +1 for grasp and -1 for release.
    pub fn to_continuous(self) -> Vec<f64> {
        match self {
            Action::Grasp => vec![0.0, 0.0, 1.0],
            Action::Release => vec![0.0, 0.0, -1.0],
            a => {
                let (dx, dy) = a.delta().unwrap_or((0, 0));
                vec![dx as f64, dy as f64, 0.0]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predicate {
    InContainer(String, String),
    OnTable(String),
    GripperAt(GridPos),
    InRegion(String, Region),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectState {
    pub kind: usize,
    pub pos: GridPos,
    pub container: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerState {
    pub kind: usize,
    pub pos: GridPos,
}

/// Where an object rests, independent of where the gripper is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Held,
    InContainer(String),
    OnTable(GridPos),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneState {
    pub width: i32,
    pub height: i32,
    pub gripper: GridPos,
    pub holding: Option<String>,
    pub objects: BTreeMap<String, ObjectState>,
    pub containers: BTreeMap<String, ContainerState>,
    pub barriers: BTreeSet<GridPos>,
}

impl SceneState {
    pub fn in_bounds(&self, p: GridPos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    /// A cell the gripper may occupy.
    pub fn is_open(&self, p: GridPos) -> bool {
        self.in_bounds(p) && !self.barriers.contains(&p)
    }

    pub fn object(&self, id: &str) -> Result<&ObjectState> {
        self.objects
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn container(&self, id: &str) -> Result<&ContainerState> {
        self.containers
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn container_at(&self, p: GridPos) -> Option<&str> {
        self.containers
            .iter()
            .find(|(_, c)| c.pos == p)
            .map(|(id, _)| id.as_str())
    }

    /// The object resting (not held) at `p`, if any.
    pub fn resting_object_at(&self, p: GridPos) -> Option<&str> {
        self.objects
            .iter()
            .find(|(id, o)| o.pos == p && self.holding.as_deref() != Some(id.as_str()))
            .map(|(id, _)| id.as_str())
    }

    /// A table cell an object could be dropped onto: open, not a container, unoccupied.
    /// `ignoring` is treated as absent.
    pub fn is_free_table_cell(&self, p: GridPos, ignoring: Option<&str>) -> bool {
        self.is_open(p)
            && self.container_at(p).is_none()
            && !self.objects.iter().any(|(id, o)| {
                o.pos == p
                    && Some(id.as_str()) != ignoring
                    && self.holding.as_deref() != Some(id.as_str())
            })
    }

    fn container_occupied(&self, container: &str) -> bool {
        self.objects
            .values()
            .any(|o| o.container.as_deref() == Some(container))
    }

    pub fn placement(&self, id: &str) -> Result<Placement> {
        let o = self.object(id)?;
        Ok(if self.holding.as_deref() == Some(id) {
            Placement::Held
        } else if let Some(c) = &o.container {
            Placement::InContainer(c.clone())
        } else {
            Placement::OnTable(o.pos)
        })
    }

    pub fn step(&self, action: Action) -> SceneState {
        let mut next = self.clone();
        next.apply(action);
        next
    }

    /// In-place transition. Illegal actions leave the state untouched.
    pub fn apply(&mut self, action: Action) {
        match action {
            Action::NoOp => {}
            Action::MoveNorth | Action::MoveSouth | Action::MoveEast | Action::MoveWest => {
                let (dx, dy) = action.delta().expect("move has a delta");
                let to = self.gripper.offset(dx, dy);
                if self.is_open(to) {
                    self.gripper = to;
                    if let Some(h) = &self.holding {
                        if let Some(o) = self.objects.get_mut(h) {
                            o.pos = to;
                        }
                    }
                }
            }
            Action::Grasp => {
                if self.holding.is_some() {
                    return;
                }
                if let Some(id) = self.resting_object_at(self.gripper).map(str::to_string) {
                    if let Some(o) = self.objects.get_mut(&id) {
                        o.container = None;
                    }
                    self.holding = Some(id);
                }
            }
            Action::Release => {
                let Some(h) = self.holding.clone() else {
                    return;
                };
                let here = self.gripper;
                if let Some(c) = self.container_at(here).map(str::to_string) {
                    // Containers hold at most one object.
                    if !self.container_occupied(&c) {
                        self.objects.get_mut(&h).expect("held object exists").container = Some(c);
                        self.holding = None;
                    }
                } else if self.is_free_table_cell(here, Some(&h)) {
                    self.holding = None;
                }
            }
        }
    }

    pub fn predicate_holds(&self, p: &Predicate) -> Result<bool> {
        match p {
            Predicate::InContainer(o, c) => {
                self.container(c)?;
                Ok(self.object(o)?.container.as_deref() == Some(c.as_str()))
            }
            Predicate::OnTable(o) => {
                let obj = self.object(o)?;
                Ok(obj.container.is_none() && self.holding.as_deref() != Some(o.as_str()))
            }
            Predicate::GripperAt(pos) => Ok(self.gripper == *pos),
            Predicate::InRegion(o, r) => {
                let obj = self.object(o)?;
                Ok(obj.container.is_none()
                    && self.holding.as_deref() != Some(o.as_str())
                    && r.contains(obj.pos))
            }
        }
    }

    /// Human-readable violations of the state invariants; empty when valid.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.is_open(self.gripper) {
            v.push(format!("gripper on blocked cell {:?}", self.gripper));
        }
        if let Some(h) = &self.holding {
            match self.objects.get(h) {
                None => v.push(format!("held object `{h}` does not exist")),
                Some(o) => {
                    if o.pos != self.gripper {
                        v.push(format!("held object `{h}` is not at the gripper"));
                    }
                    if o.container.is_some() {
                        v.push(format!("held object `{h}` is inside a container"));
                    }
                }
            }
        }
        let mut resting = BTreeSet::new();
        for (id, o) in &self.objects {
            if !self.is_open(o.pos) {
                v.push(format!("object `{id}` on blocked cell {:?}", o.pos));
            }
            if let Some(c) = &o.container {
                match self.containers.get(c) {
                    None => v.push(format!("object `{id}` inside unknown container `{c}`")),
                    Some(cs) if cs.pos != o.pos => {
                        v.push(format!("object `{id}` is not at its container `{c}`"))
                    }
                    _ => {}
                }
            } else if self.holding.as_deref() != Some(id.as_str())
                && self.container_at(o.pos).is_some()
            {
                v.push(format!("object `{id}` rests on a container cell outside it"));
            }
            if self.holding.as_deref() != Some(id.as_str()) && !resting.insert(o.pos) {
                v.push(format!("two resting objects share cell {:?}", o.pos));
            }
        }
        for (id, c) in &self.containers {
            if !self.is_open(c.pos) {
                v.push(format!("container `{id}` on blocked cell {:?}", c.pos));
            }
        }
        v
    }

    /// Cells reachable by the gripper from `from`.
    pub fn reachable_from(&self, from: GridPos) -> BTreeSet<GridPos> {
        let mut seen = BTreeSet::new();
        if !self.is_open(from) {
            return seen;
        }
        let mut queue = VecDeque::from([from]);
        seen.insert(from);
        while let Some(p) = queue.pop_front() {
            for a in &Action::ALL[..4] {
                let (dx, dy) = a.delta().expect("move");
                let q = p.offset(dx, dy);
                if self.is_open(q) && seen.insert(q) {
                    queue.push_back(q);
                }
            }
        }
        seen
    }

    /// Breadth-first distances from `target` over open cells.
    fn distance_field(&self, target: GridPos) -> Vec<Option<u32>> {
        let idx = |p: GridPos| (p.y * self.width + p.x) as usize;
        let mut dist = vec![None; (self.width * self.height) as usize];
        if !self.is_open(target) {
            return dist;
        }
        dist[idx(target)] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(p) = queue.pop_front() {
            let d = dist[idx(p)].expect("visited");
            for a in &Action::ALL[..4] {
                let (dx, dy) = a.delta().expect("move");
                let q = p.offset(dx, dy);
                if self.is_open(q) && dist[idx(q)].is_none() {
                    dist[idx(q)] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    /// Shortest-path length between two open cells.
    pub fn path_length(&self, from: GridPos, to: GridPos) -> Option<u32> {
        if !self.is_open(from) {
            return None;
        }
        self.distance_field(to)[(from.y * self.width + from.x) as usize]
    }

    /// First move of a shortest barrier-avoiding path; `Ok(None)` when already there.
    pub fn first_move_towards(&self, to: GridPos) -> Result<Option<Action>> {
        if self.gripper == to {
            return Ok(None);
        }
        let dist = self.distance_field(to);
        let at = |p: GridPos| -> Option<u32> {
            if self.in_bounds(p) {
                dist[(p.y * self.width + p.x) as usize]
            } else {
                None
            }
        };
        let here = at(self.gripper).ok_or(Error::Unreachable)?;
        for a in &Action::ALL[..4] {
            let (dx, dy) = a.delta().expect("move");
            if at(self.gripper.offset(dx, dy)) == Some(here - 1) {
                return Ok(Some(*a));
            }
        }
        Err(Error::Unreachable)
    }

    /// Compares gripper, grasp and every object placement.
    pub fn same_configuration(&self, other: &SceneState) -> bool {
        self.gripper == other.gripper && self.holding == other.holding && self.objects == other.objects
    }
}

/// Pure transition function.
pub fn step(state: &SceneState, action: Action) -> SceneState {
    state.step(action)
}

// ---------------------------------------------------------------------------
// Scene configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub object_kinds: usize,
    pub container_kinds: usize,
    #[serde(default)]
    pub region_kinds: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: String,
    pub kind: usize,
    pub spawn: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub id: String,
    pub kind: usize,
    pub pos: GridPos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub template: Template,
    pub object: String,
    /// Container id for `PutIn`/`TakeOut`, region name for `MoveToRegion`.
    pub target: String,
}

/// Outline of a rectangle turned into barrier cells, minus the listed gaps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierRing {
    pub min: GridPos,
    pub max: GridPos,
    #[serde(default)]
    pub gaps: Vec<GridPos>,
}

impl BarrierRing {
    pub fn cells(&self) -> Vec<GridPos> {
        let r = Rect {
            min: self.min,
            max: self.max,
        };
        r.cells()
            .filter(|p| {
                p.x == self.min.x || p.x == self.max.x || p.y == self.min.y || p.y == self.max.y
            })
            .filter(|p| !self.gaps.contains(p))
            .collect()
    }
}

/// Deltas that turn a pre-training-like scene into a shifted one. Every field
/// is independently optional.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftProfile {
    /// object id -> replacement kind id (typically one never seen in pre-training)
    pub unseen_kinds: BTreeMap<String, usize>,
    /// container id -> new position
    pub displaced_containers: BTreeMap<String, GridPos>,
    pub barrier_ring: Option<BarrierRing>,
    /// Translation applied to every spawn region.
    pub spawn_shift: Option<[i32; 2]>,
}

impl ShiftProfile {
    pub fn is_empty(&self) -> bool {
        self == &ShiftProfile::default()
    }
}

fn default_dim() -> i32 {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub id: String,
    #[serde(default = "default_dim")]
    pub width: i32,
    #[serde(default = "default_dim")]
    pub height: i32,
    pub vocab: Vocab,
    pub home: GridPos,
    #[serde(default)]
    pub barriers: Vec<GridPos>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub containers: Vec<ContainerSpec>,
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub tasks: Vec<TaskDef>,
    #[serde(default, skip_serializing_if = "ShiftProfile::is_empty")]
    pub shift: ShiftProfile,
}

impl SceneConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The configuration with its shift profile folded in.
    pub fn effective(&self) -> SceneConfig {
        let mut cfg = self.clone();
        let shift = std::mem::take(&mut cfg.shift);
        for o in &mut cfg.objects {
            if let Some(k) = shift.unseen_kinds.get(&o.id) {
                o.kind = *k;
            }
            if let Some([dx, dy]) = shift.spawn_shift {
                o.spawn = o.spawn.translated(dx, dy);
            }
        }
        for c in &mut cfg.containers {
            if let Some(p) = shift.displaced_containers.get(&c.id) {
                c.pos = *p;
            }
        }
        if let Some(ring) = &shift.barrier_ring {
            for p in ring.cells() {
                if !cfg.barriers.contains(&p) {
                    cfg.barriers.push(p);
                }
            }
        }
        cfg
    }

    fn empty_state(&self) -> SceneState {
        SceneState {
            width: self.width,
            height: self.height,
            gripper: self.home,
            holding: None,
            objects: BTreeMap::new(),
            containers: self
                .containers
                .iter()
                .map(|c| {
                    (
                        c.id.clone(),
                        ContainerState {
                            kind: c.kind,
                            pos: c.pos,
                        },
                    )
                })
                .collect(),
            barriers: self.barriers.iter().copied().collect(),
        }
    }

    /// Checks the effective configuration.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.effective();
        let bad = |m: String| Err(Error::ConfigInvalid(format!("scene `{}`: {m}", cfg.id)));
        if cfg.width <= 0 || cfg.height <= 0 {
            return bad("grid dimensions must be positive".into());
        }
        let probe = cfg.empty_state();
        for b in &cfg.barriers {
            if !probe.in_bounds(*b) {
                return bad(format!("barrier {b:?} out of bounds"));
            }
        }
        if !probe.is_open(cfg.home) {
            return bad("home cell must be an open in-bounds cell".into());
        }
        let mut ids = BTreeSet::new();
        let mut container_cells = BTreeSet::new();
        for c in &cfg.containers {
            if !ids.insert(c.id.as_str()) {
                return bad(format!("duplicate id `{}`", c.id));
            }
            if c.kind >= cfg.vocab.container_kinds {
                return bad(format!("container `{}` kind {} outside vocabulary", c.id, c.kind));
            }
            if !probe.is_open(c.pos) {
                return bad(format!("container `{}` overlaps a barrier or is out of bounds", c.id));
            }
            if !container_cells.insert(c.pos) {
                return bad(format!("container `{}` overlaps another container", c.id));
            }
        }
        for o in &cfg.objects {
            if !ids.insert(o.id.as_str()) {
                return bad(format!("duplicate id `{}`", o.id));
            }
            if o.kind >= cfg.vocab.object_kinds {
                return bad(format!("object `{}` kind {} outside vocabulary", o.id, o.kind));
            }
            if o.spawn.min.x > o.spawn.max.x || o.spawn.min.y > o.spawn.max.y {
                return bad(format!("object `{}` has an empty spawn region", o.id));
            }
            if o.spawn.cells().any(|p| !probe.is_open(p)) {
                return bad(format!(
                    "spawn region of `{}` leaves the grid or covers a barrier",
                    o.id
                ));
            }
        }
        for r in &cfg.regions {
            if r.kind >= cfg.vocab.region_kinds {
                return bad(format!("region `{}` kind {} outside vocabulary", r.name, r.kind));
            }
            if !r.rect().cells().any(|p| probe.is_free_table_cell(p, None)) {
                return bad(format!("region `{}` has no free table cell", r.name));
            }
        }
        let open: Vec<GridPos> = Rect {
            min: GridPos::new(0, 0),
            max: GridPos::new(cfg.width - 1, cfg.height - 1),
        }
        .cells()
        .filter(|p| probe.is_open(*p))
        .collect();
        if probe.reachable_from(cfg.home).len() != open.len() {
            return bad("open cells are not all connected".into());
        }
        let free_drops = open
            .iter()
            .filter(|p| probe.container_at(**p).is_none())
            .count();
        if free_drops <= cfg.objects.len() {
            return bad("no free drop cell remains once every object is placed".into());
        }
        cfg.tasks()?;
        Ok(())
    }

    /// Instantiates the task list with ids in declaration order.
    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if !self.objects.iter().any(|o| o.id == t.object) {
                    return Err(Error::UnknownId(t.object.clone()));
                }
                let target = match t.template {
                    Template::PutIn | Template::TakeOut => {
                        if !self.containers.iter().any(|c| c.id == t.target) {
                            return Err(Error::UnknownId(t.target.clone()));
                        }
                        Target::Container(t.target.clone())
                    }
                    Template::MoveToRegion => Target::Region(
                        self.regions
                            .iter()
                            .find(|r| r.name == t.target)
                            .cloned()
                            .ok_or_else(|| Error::UnknownId(t.target.clone()))?,
                    ),
                };
                TaskSpec::new(TaskId(i as u32), t.template, &t.object, target)
            })
            .collect()
    }
}

/// Instantiates a scene: objects are placed uniformly at random inside their
/// spawn regions on distinct free cells, the gripper starts at home.
pub fn make_scene(config: &SceneConfig, seed: u64) -> Result<SceneState> {
    config.validate()?;
    let cfg = config.effective();
    let mut rng = crate::rng::seeded(seed);
    let mut state = cfg.empty_state();
    for o in &cfg.objects {
        let candidates: Vec<GridPos> = o
            .spawn
            .cells()
            .filter(|p| state.is_free_table_cell(*p, None))
            .collect();
        let pos = *candidates.choose(&mut rng).ok_or_else(|| {
            Error::ConfigInvalid(format!(
                "scene `{}`: spawn region of `{}` has no free cell left",
                cfg.id, o.id
            ))
        })?;
        state.objects.insert(
            o.id.clone(),
            ObjectState {
                kind: o.kind,
                pos,
                container: None,
            },
        );
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Flattens (current, goal) state pairs into stacked binary occupancy planes.
///
/// Plane order per state: gripper, holding (gripper cell when an object is
/// held), one plane per object kind, one per container kind, barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub width: i32,
    pub height: i32,
    pub object_kinds: usize,
    pub container_kinds: usize,
}

impl Encoder {
    pub fn new(width: i32, height: i32, object_kinds: usize, container_kinds: usize) -> Self {
        Encoder {
            width,
            height,
            object_kinds,
            container_kinds,
        }
    }

    pub fn for_config(cfg: &SceneConfig) -> Self {
        Encoder::new(
            cfg.width,
            cfg.height,
            cfg.vocab.object_kinds,
            cfg.vocab.container_kinds,
        )
    }

    pub fn planes(&self) -> usize {
        3 + self.object_kinds + self.container_kinds
    }

    fn cells(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Length of one encoded state.
    pub fn state_dim(&self) -> usize {
        self.planes() * self.cells()
    }

    /// Length of an encoded (current, goal) pair.
    pub fn pair_dim(&self) -> usize {
        2 * self.state_dim()
    }

    fn check(&self, s: &SceneState) -> Result<()> {
        if s.width != self.width || s.height != self.height {
            return Err(Error::DimMismatch(format!(
                "state grid {}x{} vs encoder {}x{}",
                s.width, s.height, self.width, self.height
            )));
        }
        if let Some((id, _)) = s.objects.iter().find(|(_, o)| o.kind >= self.object_kinds) {
            return Err(Error::DimMismatch(format!("object `{id}` kind outside encoder")));
        }
        if let Some((id, _)) = s
            .containers
            .iter()
            .find(|(_, c)| c.kind >= self.container_kinds)
        {
            return Err(Error::DimMismatch(format!("container `{id}` kind outside encoder")));
        }
        Ok(())
    }

    /// Indices of the active cells of one state's planes, sorted and deduplicated.
    pub fn active_indices(&self, s: &SceneState) -> Result<Vec<u32>> {
        self.check(s)?;
        let n = self.cells();
        let cell = |p: GridPos| (p.y * self.width + p.x) as usize;
        let mut out = Vec::with_capacity(4 + s.objects.len() + s.containers.len() + s.barriers.len());
        out.push(cell(s.gripper));
        if s.holding.is_some() {
            out.push(n + cell(s.gripper));
        }
        for o in s.objects.values() {
            out.push((2 + o.kind) * n + cell(o.pos));
        }
        for c in s.containers.values() {
            out.push((2 + self.object_kinds + c.kind) * n + cell(c.pos));
        }
        let barrier_plane = 2 + self.object_kinds + self.container_kinds;
        for b in &s.barriers {
            out.push(barrier_plane * n + cell(*b));
        }
        let mut out: Vec<u32> = out.into_iter().map(|i| i as u32).collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Dense single-state planes.
    pub fn encode_state(&self, s: &SceneState) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.state_dim()];
        for i in self.active_indices(s)? {
            v[i as usize] = 1.0;
        }
        Ok(v)
    }

    pub fn encode(&self, state: &SceneState, goal: &SceneState) -> Result<Vec<f64>> {
        if state.width != goal.width || state.height != goal.height {
            return Err(Error::DimMismatch("current and goal grids differ".into()));
        }
        let mut v = self.encode_state(state)?;
        v.extend(self.encode_state(goal)?);
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Scripted expert
// ---------------------------------------------------------------------------

/// Noisy scripted demonstrator. With probability `1 - epsilon` it takes the
/// first action of a shortest plan that fixes object placements (in id order,
/// the held object first) and then moves the gripper to the goal cell.
pub fn scripted_expert_action(
    state: &SceneState,
    goal: &SceneState,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Action> {
    if epsilon > 0.0 && rng.gen_bool(epsilon.clamp(0.0, 1.0)) {
        return Ok(Action::random(rng));
    }
    expert_plan_step(state, goal)
}

fn expert_plan_step(state: &SceneState, goal: &SceneState) -> Result<Action> {
    let mut misplaced = Vec::new();
    for id in goal.objects.keys() {
        if !state.objects.contains_key(id) {
            return Err(Error::UnknownId(id.clone()));
        }
        let want = goal.placement(id)?;
        if state.placement(id)? != want {
            misplaced.push((id.as_str(), want));
        }
    }
    if let Some(h) = state.holding.as_deref() {
        if let Some(i) = misplaced.iter().position(|(id, _)| *id == h) {
            misplaced.swap(0, i);
        }
    }

    if let Some((id, want)) = misplaced.first() {
        let holding = state.holding.as_deref();
        if holding == Some(*id) {
            let target = match want {
                Placement::InContainer(c) => goal.container(c)?.pos,
                Placement::OnTable(p) => *p,
                Placement::Held => unreachable!("held object would not be misplaced"),
            };
            if let Placement::InContainer(c) = want {
                if state.container(c)?.pos != target {
                    return Err(Error::Unreachable);
                }
                if state.objects.values().any(|o| o.container.as_deref() == Some(c)) {
                    return Err(Error::Unreachable);
                }
            } else if !state.is_free_table_cell(target, Some(id)) {
                return Err(Error::Unreachable);
            }
            return Ok(state.first_move_towards(target)?.unwrap_or(Action::Release));
        }
        if let Some(h) = holding {
            // Holding an object whose goal is to stay held: put it down first.
            let drop_ok = |p: GridPos| {
                state.is_free_table_cell(p, Some(h))
                    || state.container_at(p).is_some_and(|c| {
                        !state
                            .objects
                            .iter()
                            .any(|(oid, o)| oid != h && o.container.as_deref() == Some(c))
                    })
            };
            if drop_ok(state.gripper) {
                return Ok(Action::Release);
            }
            let spot = nearest_cell(state, state.gripper, drop_ok).ok_or(Error::Unreachable)?;
            return Ok(state.first_move_towards(spot)?.unwrap_or(Action::Release));
        }
        let obj_pos = state.object(id)?.pos;
        return Ok(state.first_move_towards(obj_pos)?.unwrap_or(Action::Grasp));
    }

    Ok(state.first_move_towards(goal.gripper)?.unwrap_or(Action::NoOp))
}

/// Closest open cell to `from` (Manhattan, ties by row then column) satisfying `ok`.
pub fn nearest_cell(
    state: &SceneState,
    from: GridPos,
    ok: impl Fn(GridPos) -> bool,
) -> Option<GridPos> {
    let reachable = state.reachable_from(state.gripper);
    let mut best: Option<(i32, i32, i32, GridPos)> = None;
    for p in reachable {
        if ok(p) {
            let key = (p.manhattan(from), p.y, p.x, p);
            if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                best = Some(key);
            }
        }
    }
    best.map(|b| b.3)
}
