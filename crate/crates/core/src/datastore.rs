//! Trajectory records, validation, newline-delimited persistence and views.
//!
//! One trajectory is one JSON object on one line. Field order, enum spellings
//! and coordinate encoding are fixed by the serde derives below and documented
//! in `docs/dataset-schema.md`; the same store always exports the same bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::{Action, SceneState};
use crate::task::TaskSpec;
use crate::vqa::{translate_task, VqaPair};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssuedSubgoal {
    pub timestep: usize,
    pub goal: SceneState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub schema_version: u32,
    pub scene_id: String,
    pub task: TaskSpec,
    pub vqa: VqaPair,
    pub subgoal_period: usize,
    pub observations: Vec<SceneState>,
    pub actions: Vec<Action>,
    pub subgoals: Vec<IssuedSubgoal>,
    pub vlm_success: bool,
    pub gt_success: bool,
    pub used_fallback: bool,
    pub policy_version: String,
    pub seed: u64,
    /// Logical clock: episode index within the producing worker's run.
    pub created_at: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// The commanded subgoal in force at step `t`.
    pub fn subgoal_at(&self, t: usize) -> Option<&SceneState> {
        self.subgoals
            .iter()
            .rev()
            .find(|s| s.timestep <= t)
            .map(|s| &s.goal)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization is infallible")
    }
}

/// Every invariant violation of a record; empty means valid.
pub fn validate(record: &Trajectory) -> Vec<String> {
    let mut v = Vec::new();
    if record.schema_version != SCHEMA_VERSION {
        v.push(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            record.schema_version
        ));
    }
    if record.actions.is_empty() {
        v.push("trajectory has no actions".into());
    }
    if record.observations.len() != record.actions.len() + 1 {
        v.push(format!(
            "observation/action length mismatch: {} observations, {} actions",
            record.observations.len(),
            record.actions.len()
        ));
    }
    let k = record.subgoal_period;
    if k == 0 || !record.actions.len().is_multiple_of(k) {
        v.push(format!(
            "subgoal period {k} does not divide horizon {}",
            record.actions.len()
        ));
    } else {
        let expected = record.actions.len() / k;
        if record.subgoals.len() != expected {
            v.push(format!(
                "expected {expected} subgoals, found {}",
                record.subgoals.len()
            ));
        }
        for (i, s) in record.subgoals.iter().enumerate() {
            if s.timestep != i * k {
                v.push(format!("subgoal {i} issued at t={} instead of t={}", s.timestep, i * k));
            }
        }
    }
    for (i, s) in record.subgoals.iter().enumerate() {
        for m in s.goal.invariant_violations() {
            v.push(format!("subgoal {i} invalid: {m}"));
        }
    }
    for (t, obs) in record.observations.iter().enumerate() {
        for m in obs.invariant_violations() {
            v.push(format!("observation {t} invalid: {m}"));
        }
    }
    for (t, (pair, a)) in record
        .observations
        .windows(2)
        .zip(&record.actions)
        .enumerate()
    {
        if pair[0].step(*a) != pair[1] {
            v.push(format!("transition inconsistency at t={t}"));
        }
    }
    match translate_task(&record.task) {
        Ok(pair) if pair != record.vqa => v.push("vqa pair does not match task".into()),
        Err(e) => v.push(format!("task not translatable: {e}")),
        _ => {}
    }
    if let Some(last) = record.observations.last() {
        match record.task.is_satisfied(last) {
            Ok(g) if g != record.gt_success => {
                v.push("gt_success disagrees with final observation".into())
            }
            Err(e) => v.push(format!("final observation lacks task ids: {e}")),
            _ => {}
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub index: usize,
}

/// Ordered append-only trajectory log, optionally journaled to disk.
#[derive(Debug, Default)]
pub struct Store {
    records: Vec<Trajectory>,
    journal: Option<BufWriter<File>>,
}

impl Clone for Store {
    fn clone(&self) -> Self {
        Store {
            records: self.records.clone(),
            journal: None,
        }
    }
}

impl PartialEq for Store {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    /// Store whose appends are also flushed, one line each, to `path`.
    pub fn with_journal(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Store {
            records: Vec::new(),
            journal: Some(BufWriter::new(file)),
        })
    }

    pub fn from_records(records: Vec<Trajectory>) -> Result<Self> {
        let mut s = Store::new();
        for r in records {
            s.append(r)?;
        }
        Ok(s)
    }

    pub fn append(&mut self, traj: Trajectory) -> Result<Receipt> {
        let violations = validate(&traj);
        if !violations.is_empty() {
            return Err(Error::ValidationFailed(violations));
        }
        if let Some(j) = &mut self.journal {
            let write = writeln!(j, "{}", traj.to_json_line()).and_then(|_| j.flush());
            write.map_err(|e| Error::io("<journal>", e))?;
        }
        self.records.push(traj);
        Ok(Receipt {
            index: self.records.len() - 1,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Trajectory] {
        &self.records
    }

    pub fn get(&self, index: usize) -> Option<&Trajectory> {
        self.records.get(index)
    }

    pub fn view(&self) -> View<'_> {
        View {
            records: &self.records,
            preds: Vec::new(),
        }
    }

    pub fn filter<'a>(&'a self, pred: impl Fn(&Trajectory) -> bool + 'a) -> View<'a> {
        self.view().filter(pred)
    }

    /// Records sorted by (seed, logical timestamp): the order fleet runs export in.
    pub fn sort_canonical(&mut self) {
        self.records
            .sort_by(|a, b| (a.seed, a.created_at, &a.scene_id).cmp(&(b.seed, b.created_at, &b.scene_id)));
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = Store::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            store.append(parse_line(&line, i + 1)?)?;
        }
        Ok(store)
    }
}

/// Parses and validates one line; `line_no` is 1-based.
pub fn parse_line(line: &str, line_no: usize) -> Result<Trajectory> {
    let rec: Trajectory = serde_json::from_str(line).map_err(|e| Error::SchemaViolation {
        line: line_no,
        violations: vec![e.to_string()],
    })?;
    let violations = validate(&rec);
    if !violations.is_empty() {
        return Err(Error::SchemaViolation {
            line: line_no,
            violations,
        });
    }
    Ok(rec)
}

/// 1-based line number and the violations found on it.
pub type LineViolations = (usize, Vec<String>);

/// Checks every line of a file, returning the line count and the bad lines.
pub fn validate_file(path: impl AsRef<Path>) -> Result<(usize, Vec<LineViolations>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bad = Vec::new();
    let mut n = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        n += 1;
        if let Err(Error::SchemaViolation { line, violations }) = parse_line(&line, i + 1) {
            bad.push((line, violations));
        }
    }
    Ok((n, bad))
}

type Pred<'a> = Box<dyn Fn(&Trajectory) -> bool + 'a>;

/// Lazy, order-preserving filtered view over a store.
pub struct View<'a> {
    records: &'a [Trajectory],
    preds: Vec<Pred<'a>>,
}

impl<'a> View<'a> {
    pub fn over(records: &'a [Trajectory]) -> Self {
        View {
            records,
            preds: Vec::new(),
        }
    }

    pub fn filter(mut self, pred: impl Fn(&Trajectory) -> bool + 'a) -> Self {
        self.preds.push(Box::new(pred));
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a Trajectory> + '_ {
        self.records
            .iter()
            .filter(move |r| self.preds.iter().all(|p| p(r)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.iter().next().is_none()
    }

    pub fn to_vec(&self) -> Vec<Trajectory> {
        self.iter().cloned().collect()
    }
}

/// Trajectories the success detector labelled successful. False positives pass.
pub fn vlm_successful(t: &Trajectory) -> bool {
    t.vlm_success
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, false) => self.true_neg += 1,
            (false, true) => self.false_neg += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.true_pos + self.false_pos;
        (d > 0).then(|| self.true_pos as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.true_pos + self.false_neg;
        (d > 0).then(|| self.true_pos as f64 / d as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.true_pos + self.true_neg) as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub vlm_successes: usize,
    pub gt_successes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub successes: usize,
    pub failures: usize,
    pub per_scene: BTreeMap<String, Counts>,
    /// Keyed by `scene_id / task language`.
    pub per_task: BTreeMap<String, Counts>,
    pub fallbacks: usize,
    pub fallback_rate: f64,
    pub confusion: Confusion,
}

pub fn stats<'a>(records: impl IntoIterator<Item = &'a Trajectory>) -> DatasetStats {
    let mut s = DatasetStats::default();
    for r in records {
        s.total += 1;
        if r.vlm_success {
            s.successes += 1;
        } else {
            s.failures += 1;
        }
        if r.used_fallback {
            s.fallbacks += 1;
        }
        s.confusion.add(r.vlm_success, r.gt_success);
        for c in [
            s.per_scene.entry(r.scene_id.clone()).or_default(),
            s.per_task
                .entry(format!("{} / {}", r.scene_id, r.task.language))
                .or_default(),
        ] {
            c.total += 1;
            c.vlm_successes += r.vlm_success as usize;
            c.gt_successes += r.gt_success as usize;
        }
    }
    if s.total > 0 {
        s.fallback_rate = s.fallbacks as f64 / s.total as f64;
    }
    s
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        out.push_str(&format!(
            "trajectories {}  vlm-successes {}  vlm-failures {}  fallbacks {} ({:.3})\n",
            self.total, self.successes, self.failures, self.fallbacks, self.fallback_rate
        ));
        let c = &self.confusion;
        out.push_str(&format!(
            "detector vs ground truth: tp {} fp {} tn {} fn {}  precision {} recall {} accuracy {}\n",
            c.true_pos,
            c.false_pos,
            c.true_neg,
            c.false_neg,
            pct(c.precision()),
            pct(c.recall()),
            pct(c.accuracy())
        ));
        for (scene, n) in &self.per_scene {
            out.push_str(&format!(
                "scene {scene}: {} trajectories, {} vlm-success, {} gt-success\n",
                n.total, n.vlm_successes, n.gt_successes
            ));
        }
        for (task, n) in &self.per_task {
            out.push_str(&format!(
                "  {task}: {} attempts, {} vlm-success, {} gt-success\n",
                n.total, n.vlm_successes, n.gt_successes
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::RolloutConfig;
    use crate::testutil::random_trajectory;

    fn record(seed: u64) -> Trajectory {
        random_trajectory(seed, &RolloutConfig::default())
    }

    #[test]
    fn append_returns_consecutive_indices() {
        let mut s = Store::new();
        assert_eq!(s.append(record(1)).unwrap().index, 0);
        assert_eq!(s.append(record(2)).unwrap().index, 1);
        assert_eq!(s.get(1), Some(&record(2)));
    }

    #[test]
    fn rollout_records_validate() {
        let r = record(3);
        assert_eq!(r.observations.len(), 101);
        assert!(validate(&r).is_empty(), "{:?}", validate(&r));
    }

    #[test]
    fn truncated_actions_are_reported() {
        let mut r = record(4);
        r.actions.pop();
        let v = validate(&r);
        assert!(v.iter().any(|m| m.starts_with("observation/action length mismatch")), "{v:?}");
        let mut s = Store::new();
        assert!(matches!(s.append(r), Err(Error::ValidationFailed(_))));
        assert!(s.is_empty());
    }

    #[test]
    fn tampered_observation_is_pinpointed() {
        let mut r = record(5);
        let k = 37;
        let far = crate::sim::GridPos::new(7, 7);
        let obs = &mut r.observations[k];
        obs.gripper = if obs.gripper == far { crate::sim::GridPos::new(0, 0) } else { far };
        let v = validate(&r);
        assert!(v.contains(&format!("transition inconsistency at t={}", k - 1)), "{v:?}");
    }

    #[test]
    fn bad_cadence_is_reported() {
        let mut r = record(6);
        r.subgoals[2].timestep = 41;
        assert!(validate(&r).iter().any(|m| m.contains("subgoal 2 issued at t=41")));
        let mut r = record(6);
        r.subgoals.pop();
        assert!(validate(&r).iter().any(|m| m.contains("expected 5 subgoals")));
    }

    #[test]
    fn wrong_ground_truth_label_is_reported() {
        let mut r = record(7);
        r.gt_success = !r.gt_success;
        assert!(validate(&r).contains(&"gt_success disagrees with final observation".to_string()));
    }

    #[test]
    fn filters_compose_and_preserve_order() {
        let mut recs: Vec<Trajectory> = (0..4).map(record).collect();
        for (r, v) in recs.iter_mut().zip([true, false, true, false]) {
            r.vlm_success = v;
        }
        recs[2].scene_id = "other".into();
        let s = Store::from_records(recs).unwrap();
        assert_eq!(s.view().len(), 4);
        assert_eq!(s.filter(vlm_successful).len(), 2);
        let both = s.filter(vlm_successful).filter(|t| t.scene_id == "desk");
        assert_eq!(both.len(), 1);
        assert_eq!(both.iter().next().unwrap().seed, 0);
        let seeds: Vec<u64> = s.filter(|t| !t.vlm_success).iter().map(|t| t.seed).collect();
        assert_eq!(seeds, vec![1, 3]);
    }

    #[test]
    fn stats_counts() {
        assert_eq!(stats(&[]), DatasetStats::default());
        let mut recs: Vec<Trajectory> = (0..10).map(record).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            r.vlm_success = i < 4;
        }
        let s = stats(&recs);
        assert_eq!((s.total, s.successes, s.failures), (10, 4, 6));
        assert_eq!(s.per_scene["desk"].total, 10);
        assert_eq!(s.confusion.total(), 10);
    }

    #[test]
    fn export_import_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let s = Store::from_records((0..5).map(record).collect()).unwrap();
        s.export(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        let back = Store::import(&path).unwrap();
        assert_eq!(back, s);
        let again = dir.path().join("e.jsonl");
        back.export(&again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), text.as_bytes());

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"MoveNorth\"", "\"Jump\"");
        lines[3] = "{not json".into();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match Store::import(&path) {
            Err(Error::SchemaViolation { line, .. }) => assert!(line == 3 || line == 4),
            other => panic!("expected a schema violation, got {other:?}"),
        }
        let (n, bad) = validate_file(&path).unwrap();
        assert_eq!(n, 5);
        assert!(bad.iter().any(|(l, _)| *l == 4));
    }

    #[test]
    fn journal_receives_every_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        let mut s = Store::with_journal(&path).unwrap();
        s.append(record(1)).unwrap();
        s.append(record(2)).unwrap();
        assert_eq!(Store::import(&path).unwrap(), s);
    }

    #[test]
    fn subgoal_at_follows_cadence() {
        let r = record(8);
        assert_eq!(r.subgoal_at(0), Some(&r.subgoals[0].goal));
        assert_eq!(r.subgoal_at(39), Some(&r.subgoals[1].goal));
        assert_eq!(r.subgoal_at(99), Some(&r.subgoals[4].goal));
    }
}
