//! End-to-end experiment stages: demonstrations, pretraining, autonomous
//! collection, improvement and evaluation, plus the report tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collector::{
    autonomous_loop, run_fleet, CollectionStats, Components, RolloutConfig, SharedBandits,
    WorkerAssignment,
};
use crate::control::{Controller, Decoding, DirectExpert, ExpertController, PolicyController};
use crate::datastore::{stats, vlm_successful, Confusion, Store, Trajectory};
use crate::policy::data::lang_vocab;
use crate::policy::{
    evaluate, train, EvalConfig, EvalReport, LangVocab, MixtureConfig, PolicyParams, RelabelConfig,
    TrainConfig, Variant, PRETRAIN,
};
use crate::rng::derive_seed;
use crate::sim::{Encoder, SceneConfig};
use crate::subgoal::{final_goal, OracleSubgoalGenerator, SubgoalNoise};
use crate::task_select::BanditState;
use crate::vqa::{calibrate_detector, DetectorConfig, TruthfulOracle};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    /// Demonstration episodes attempted across all pretraining scenes.
    pub episodes: usize,
    pub epsilon: f64,
    /// Episodes chained reset-free before a pretraining scene is re-sampled.
    pub chain_length: usize,
    pub demonstrator: Demonstrator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Demonstrator {
    /// Follows the oracle subgoals, waiting once a subgoal is reached.
    #[default]
    Subgoal,
    /// Heads straight for the final goal and ignores subgoals.
    Direct,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            episodes: 500,
            epsilon: 0.1,
            chain_length: 4,
            demonstrator: Demonstrator::Subgoal,
        }
    }
}

/// Detector settings; `calibrate_from` (precision, recall, accuracy), when
/// present, overrides `fp_rate` and `fn_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub calibrate_from: Option<[f64; 3]>,
    pub fp_overrides: BTreeMap<String, f64>,
    pub feasibility_flip: f64,
}

impl DetectorSection {
    pub fn resolve(&self) -> Result<DetectorConfig> {
        let (fp_rate, fn_rate) = match self.calibrate_from {
            Some([p, r, a]) => {
                let c = calibrate_detector(p, r, a)?;
                (c.fp_rate, c.fn_rate)
            }
            None => (self.fp_rate, self.fn_rate),
        };
        let cfg = DetectorConfig {
            fp_rate,
            fn_rate,
            fp_overrides: self.fp_overrides.clone(),
            feasibility_flip: self.feasibility_flip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    /// Pretraining share when improving on one scene's data.
    pub per_scene_pretrain: f64,
    /// Pretraining share when improving on every scene's data.
    pub generalist_pretrain: f64,
}

impl Default for MixtureSection {
    fn default() -> Self {
        MixtureSection {
            per_scene_pretrain: 0.7,
            generalist_pretrain: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionSection {
    /// Episodes collected on each shifted scene, split evenly across workers.
    pub episodes_per_scene: usize,
    pub workers_per_scene: usize,
}

impl Default for CollectionSection {
    fn default() -> Self {
        CollectionSection {
            episodes_per_scene: 200,
            workers_per_scene: 1,
        }
    }
}

/// How policy actions are drawn during evaluation and during collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingSection {
    pub eval: Decoding,
    pub collect: Decoding,
}

impl Default for DecodingSection {
    fn default() -> Self {
        DecodingSection {
            eval: Decoding::Sample,
            collect: Decoding::Sample,
        }
    }
}

impl DecodingSection {
    fn validate(&self) -> Result<()> {
        for d in [self.eval, self.collect] {
            if let Decoding::Tempered(t) = d {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::ConfigInvalid(format!("decoding temperature {t} must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub demos: DemoConfig,
    pub pretrain_scenes: Vec<SceneConfig>,
    pub shifted_scenes: Vec<SceneConfig>,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub subgoal_noise: SubgoalNoise,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub relabel: RelabelConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub improve: TrainConfig,
    /// Training for the generalists; falls back to `improve` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generalist: Option<TrainConfig>,
    #[serde(default)]
    pub mixture: MixtureSection,
    #[serde(default)]
    pub collection: CollectionSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub decoding: DecodingSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn generalist_train(&self) -> &TrainConfig {
        self.generalist.as_ref().unwrap_or(&self.improve)
    }

    pub fn validate(&self) -> Result<()> {
        self.decoding.validate()?;
        if self.pretrain_scenes.is_empty() {
            return Err(Error::ConfigInvalid("at least one pretraining scene is required".into()));
        }
        let first = &self.pretrain_scenes[0];
        for s in self.all_scenes() {
            s.validate()?;
            if (s.width, s.height, s.vocab) != (first.width, first.height, first.vocab) {
                return Err(Error::ConfigInvalid(format!(
                    "scene `{}` does not share grid size and vocabulary with `{}`",
                    s.id, first.id
                )));
            }
        }
        let mut ids: Vec<&str> = self.all_scenes().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::ConfigInvalid("scene ids must be unique".into()));
        }
        if !(0.0..=1.0).contains(&self.demos.epsilon) {
            return Err(Error::ConfigInvalid("demo epsilon outside [0, 1]".into()));
        }
        if self.demos.chain_length == 0 || self.collection.workers_per_scene == 0 {
            return Err(Error::ConfigInvalid("chain length and worker count must be positive".into()));
        }
        for p in [self.mixture.per_scene_pretrain, self.mixture.generalist_pretrain] {
            MixtureConfig::pretrain_autonomous(p).validate()?;
        }
        self.detector.resolve()?;
        self.rollout.validate()?;
        self.relabel.validate()?;
        self.pretrain.validate()?;
        self.improve.validate()?;
        self.generalist_train().validate()?;
        Ok(())
    }

    pub fn all_scenes(&self) -> impl Iterator<Item = &SceneConfig> {
        self.pretrain_scenes.iter().chain(&self.shifted_scenes)
    }

    pub fn scene(&self, id: &str) -> Result<&SceneConfig> {
        self.all_scenes()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn encoder(&self) -> Encoder {
        Encoder::for_config(&self.pretrain_scenes[0])
    }

    pub fn lang_vocab(&self) -> LangVocab {
        lang_vocab(&self.encoder(), self.pretrain_scenes[0].vocab.region_kinds)
    }

    pub fn generator(&self, scene: &SceneConfig) -> OracleSubgoalGenerator {
        OracleSubgoalGenerator::new(scene.effective().home, self.subgoal_noise)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoReport {
    pub requested: usize,
    pub stored: usize,
    pub unreachable: usize,
    pub failed: usize,
}

/// Scripted-expert episodes on the pretraining scenes, chained reset-free in
/// short runs. Only ground-truth successes are kept.
pub fn gen_demos(cfg: &ExperimentConfig) -> Result<(Vec<Trajectory>, DemoReport)> {
    let oracle = TruthfulOracle::default();
    let mut report = DemoReport {
        requested: cfg.demos.episodes,
        ..DemoReport::default()
    };
    let store = Mutex::new(Store::new());
    let n_scenes = cfg.pretrain_scenes.len();
    let chains = cfg.demos.episodes.div_ceil(cfg.demos.chain_length);
    let mut remaining = cfg.demos.episodes;
    for chain in 0..chains {
        let scene = &cfg.pretrain_scenes[chain % n_scenes];
        let generator = cfg.generator(scene);
        let direct = DirectExpert {
            epsilon: cfg.demos.epsilon,
            home: scene.effective().home,
        };
        let subgoal = ExpertController {
            epsilon: cfg.demos.epsilon,
        };
        let expert: &dyn Controller = match cfg.demos.demonstrator {
            Demonstrator::Direct => &direct,
            Demonstrator::Subgoal => &subgoal,
        };
        let job = WorkerAssignment {
            scene: scene.clone(),
            bandit_key: format!("{}#{chain}", scene.id),
            seed: derive_seed(cfg.seed, "demo-chain", chain as u64),
            episodes: remaining.min(cfg.demos.chain_length),
        };
        remaining -= job.episodes;
        let parts = Components {
            controller: expert,
            generator: &generator,
            oracle: &oracle,
        };
        autonomous_loop(&job, parts, &cfg.rollout, &store, &SharedBandits::new())?;
    }
    let mut kept = Vec::new();
    for t in store.into_inner().expect("store lock").records() {
        let start = &t.observations[0];
        let home = cfg.scene(&t.scene_id)?.effective().home;
        match final_goal(start, &t.task, home) {
            Err(Error::Unreachable) => {
                report.unreachable += 1;
                continue;
            }
            Err(e) => return Err(e),
            Ok(_) => {}
        }
        if t.gt_success {
            kept.push(t.clone());
        }
    }
    report.stored = kept.len();
    report.failed = report.requested - report.stored - report.unreachable;
    Ok((kept, report))
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub gc: PolicyParams,
    pub lc: PolicyParams,
    pub gc_losses: Vec<(usize, f64)>,
    pub lc_losses: Vec<(usize, f64)>,
}

pub fn pretrain_variant(cfg: &ExperimentConfig, variant: Variant, demos: &[Trajectory]) -> Result<(PolicyParams, Vec<(usize, f64)>)> {
    if demos.is_empty() {
        return Err(Error::EmptyDataset(PRETRAIN.into()));
    }
    let out = train(
        variant,
        &cfg.encoder(),
        cfg.lang_vocab(),
        demos,
        None,
        &cfg.relabel,
        &MixtureConfig::only(PRETRAIN),
        &cfg.pretrain,
    )?;
    Ok((out.params, out.losses))
}

pub fn pretrain(cfg: &ExperimentConfig, demos: &[Trajectory]) -> Result<Pretrained> {
    let (gc, gc_losses) = pretrain_variant(cfg, Variant::Gc, demos)?;
    let (lc, lc_losses) = pretrain_variant(cfg, Variant::Lc, demos)?;
    Ok(Pretrained {
        gc,
        lc,
        gc_losses,
        lc_losses,
    })
}

pub fn controller(cfg: &ExperimentConfig, params: &PolicyParams, decoding: Decoding) -> PolicyController {
    PolicyController::new(params.clone(), cfg.encoder(), decoding)
}

#[derive(Debug, Clone)]
pub struct Collection {
    pub records: Vec<Trajectory>,
    pub stats: CollectionStats,
    pub bandits: BTreeMap<String, BanditState>,
}

impl Collection {
    /// Fraction of collected episodes the detector labelled successful.
    pub fn oracle_success_rate(&self) -> f64 {
        self.stats.vlm_successes as f64 / self.stats.appended.max(1) as f64
    }

    pub fn gt_success_rate(&self) -> f64 {
        self.stats.gt_successes as f64 / self.stats.appended.max(1) as f64
    }
}

/// Autonomous collection on one scene with the configured worker count,
/// starting from `bandits` (fresh when empty). Records are returned in
/// canonical order.
pub fn collect(
    cfg: &ExperimentConfig,
    params: &PolicyParams,
    scene: &SceneConfig,
    episodes: usize,
    seed: u64,
    bandits: BTreeMap<String, BanditState>,
) -> Result<Collection> {
    let workers = cfg.collection.workers_per_scene;
    let jobs: Vec<WorkerAssignment> = (0..workers)
        .map(|w| WorkerAssignment {
            scene: scene.clone(),
            bandit_key: scene.id.clone(),
            seed: derive_seed(seed, "worker", w as u64),
            episodes: episodes / workers + usize::from(w < episodes % workers),
        })
        .filter(|j| j.episodes > 0)
        .collect();
    let detector = cfg.detector.resolve()?;
    let oracle = TruthfulOracle::new(detector);
    let generator = cfg.generator(scene);
    let policy = controller(cfg, params, cfg.decoding.collect);
    let parts = Components {
        controller: &policy,
        generator: &generator,
        oracle: &oracle,
    };
    let store = Mutex::new(Store::new());
    let shared = SharedBandits::from_map(bandits);
    let mut stats = CollectionStats::default();
    for r in run_fleet(&jobs, parts, &cfg.rollout, &store, &shared) {
        stats.merge(&r?);
    }
    let mut store = store.into_inner().expect("store lock");
    store.sort_canonical();
    Ok(Collection {
        records: store.records().to_vec(),
        stats,
        bandits: shared.snapshot(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImproveMode {
    /// One scene's data, `mixture.per_scene_pretrain` share of demos.
    PerScene,
    /// Every scene's data, `mixture.generalist_pretrain` share of demos.
    Generalist,
}

/// Improvement from scratch on pretraining data mixed with success-filtered
/// autonomous data.
pub fn improve(
    cfg: &ExperimentConfig,
    variant: Variant,
    demos: &[Trajectory],
    autonomous: &[Trajectory],
    mode: ImproveMode,
) -> Result<PolicyParams> {
    let (pretrain_share, train_cfg) = match mode {
        ImproveMode::PerScene => (cfg.mixture.per_scene_pretrain, &cfg.improve),
        ImproveMode::Generalist => (cfg.mixture.generalist_pretrain, cfg.generalist_train()),
    };
    let usable = if train_cfg.train_on_failures {
        autonomous.len()
    } else {
        autonomous.iter().filter(|t| vlm_successful(t)).count()
    };
    if usable == 0 {
        return Err(Error::EmptyAfterFilter);
    }
    let out = train(
        variant,
        &cfg.encoder(),
        cfg.lang_vocab(),
        demos,
        Some(autonomous),
        &cfg.relabel,
        &MixtureConfig::pretrain_autonomous(pretrain_share),
        train_cfg,
    )?;
    Ok(out.params)
}

pub fn eval_policy(cfg: &ExperimentConfig, params: &PolicyParams, scene: &SceneConfig, seed: u64) -> Result<EvalReport> {
    let policy = controller(cfg, params, cfg.decoding.eval);
    let generator = cfg.generator(scene);
    let eval = EvalConfig {
        seed,
        rollout: cfg.rollout,
        ..cfg.eval
    };
    evaluate(&policy, &generator, scene, &eval)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Rate {
    pub fn new(successes: usize, episodes: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, episodes);
        Rate {
            successes,
            episodes,
            rate: successes as f64 / episodes.max(1) as f64,
            ci_low,
            ci_high,
        }
    }
}

pub const STAGES: [&str; 3] = ["pretrained", "+scene", "+all"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene: String,
    pub task: String,
    /// Keyed by "<variant>/<stage>", e.g. "gc/+scene".
    pub cells: BTreeMap<String, Rate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub confusion: Confusion,
    pub collection: BTreeMap<String, CollectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSummary {
    pub episodes: usize,
    pub oracle_success_rate: f64,
    pub gt_success_rate: f64,
}

pub fn column(variant: Variant, stage: &str) -> String {
    format!("{}/{stage}", variant.name())
}

impl Report {
    pub fn empty() -> Self {
        Report {
            rows: Vec::new(),
            confusion: Confusion::default(),
            collection: BTreeMap::new(),
        }
    }

    /// Adds one evaluation as a column of the table.
    pub fn add(&mut self, variant: Variant, stage: &str, eval: &EvalReport) {
        for t in &eval.per_task {
            let row = match self
                .rows
                .iter()
                .position(|r| r.scene == eval.scene_id && r.task == t.task)
            {
                Some(i) => &mut self.rows[i],
                None => {
                    self.rows.push(ReportRow {
                        scene: eval.scene_id.clone(),
                        task: t.task.clone(),
                        cells: BTreeMap::new(),
                    });
                    self.rows.last_mut().expect("just pushed")
                }
            };
            row.cells
                .insert(column(variant, stage), Rate::new(t.successes, t.episodes));
        }
    }

    /// Mean per-task rate of one column.
    pub fn average(&self, variant: Variant, stage: &str) -> Option<f64> {
        let key = column(variant, stage);
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.cells.get(&key).map(|c| c.rate))
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// Mean per-task rate of one column restricted to one scene.
    pub fn scene_average(&self, variant: Variant, stage: &str, scene: &str) -> Option<f64> {
        let key = column(variant, stage);
        let rates: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.scene == scene)
            .filter_map(|r| r.cells.get(&key).map(|c| c.rate))
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    pub fn scenes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.scene) {
                out.push(r.scene.clone());
            }
        }
        out
    }

    /// The end-to-end thresholds checked by `report --check`.
    pub fn checks(&self) -> Vec<Check> {
        let (gc, lc) = (Variant::Gc, Variant::Lc);
        let avg = |v, s| self.average(v, s).unwrap_or(f64::NAN);
        let mut out = Vec::new();
        let scenes = self.scenes();
        let mut improved = 0;
        for scene in &scenes {
            let pre = self.scene_average(gc, STAGES[0], scene).unwrap_or(f64::NAN);
            let post = self.scene_average(gc, STAGES[1], scene).unwrap_or(f64::NAN);
            let ok = (0.15..=0.5).contains(&pre) && post >= 1.5 * pre;
            improved += ok as usize;
            out.push(Check {
                name: format!("improvement/{scene}"),
                passed: ok,
                detail: format!("pretrained {pre:.3} in [0.15, 0.5], improved {post:.3} >= 1.5x"),
            });
        }
        out.push(Check {
            name: "improvement/scenes".into(),
            passed: scenes.len() >= 3 && improved == scenes.len(),
            detail: format!("{improved} of {} scenes improved, at least 3 required", scenes.len()),
        });
        let gap = avg(gc, STAGES[1]) - avg(lc, STAGES[1]);
        out.push(Check {
            name: "gc-beats-lc".into(),
            passed: gap >= 0.10,
            detail: format!("improved gc - improved lc = {gap:.3} >= 0.10"),
        });
        let lc0 = avg(lc, STAGES[0]);
        out.push(Check {
            name: "pretrained-lc".into(),
            passed: lc0 <= 0.05,
            detail: format!("pretrained lc {lc0:.3} <= 0.05"),
        });
        let (all, per) = (avg(gc, STAGES[2]), avg(gc, STAGES[1]));
        out.push(Check {
            name: "transfer".into(),
            passed: all >= per - 0.05,
            detail: format!("generalist gc {all:.3} >= per-scene gc {per:.3} - 0.05"),
        });
        let best_gap = scenes
            .iter()
            .filter_map(|s| {
                let g = self.collection.get(&format!("{s}/gc"))?;
                let l = self.collection.get(&format!("{s}/lc"))?;
                Some(g.oracle_success_rate - l.oracle_success_rate)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(Check {
            name: "collection-gap".into(),
            passed: best_gap >= 0.15,
            detail: format!("best gc - lc collection oracle rate {best_gap:.3} >= 0.15"),
        });
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let cols: Vec<(Variant, &str)> = [Variant::Gc, Variant::Lc]
            .into_iter()
            .flat_map(|v| STAGES.iter().map(move |s| (v, *s)))
            .collect();
        out.push_str(&format!("{:<14} {:<44}", "scene", "task"));
        for (v, s) in &cols {
            out.push_str(&format!(" {:>17}", column(*v, s)));
        }
        out.push('\n');
        let cell = |c: Option<&Rate>| match c {
            Some(r) => format!("{:.2} [{:.2},{:.2}]", r.rate, r.ci_low, r.ci_high),
            None => "-".to_string(),
        };
        for r in &self.rows {
            out.push_str(&format!("{:<14} {:<44}", r.scene, r.task));
            for (v, s) in &cols {
                out.push_str(&format!(" {:>17}", cell(r.cells.get(&column(*v, s)))));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<59}", "average"));
        for (v, s) in &cols {
            let a = self
                .average(*v, s)
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {a:>17}"));
        }
        out.push_str("\n\ncollection (oracle-labelled / ground-truth success rate)\n");
        for (k, c) in &self.collection {
            out.push_str(&format!(
                "  {k:<24} episodes {:>5}  oracle {:.3}  truth {:.3}\n",
                c.episodes, c.oracle_success_rate, c.gt_success_rate
            ));
        }
        let c = &self.confusion;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "\ndetector confusion: tp {} fp {} tn {} fn {}  precision {} recall {} accuracy {}\n",
            c.true_pos,
            c.false_pos,
            c.true_neg,
            c.false_neg,
            fmt(c.precision()),
            fmt(c.recall()),
            fmt(c.accuracy())
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub gc_collection: Collection,
    pub lc_collection: Collection,
    pub improved_gc: PolicyParams,
    pub improved_lc: PolicyParams,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub demos: Vec<Trajectory>,
    pub demo_report: DemoReport,
    pub pretrained: Pretrained,
    pub scenes: Vec<SceneOutcome>,
    pub generalist_gc: PolicyParams,
    pub generalist_lc: PolicyParams,
    pub report: Report,
}

/// gen-demos, pretrain, then per shifted scene: collect with GC and with LC,
/// improve both variants on the GC-collected data, and finally train the
/// generalists on every scene's data. Evaluations fill the report.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (demos, demo_report) = gen_demos(cfg)?;
    let pretrained = pretrain(cfg, &demos)?;
    let mut report = Report::empty();
    let eval_seed = derive_seed(cfg.seed, "eval", 0);
    let mut scenes = Vec::new();
    let mut all_auto = Vec::new();
    for (i, scene) in cfg.shifted_scenes.iter().enumerate() {
        report.add(Variant::Gc, STAGES[0], &eval_policy(cfg, &pretrained.gc, scene, eval_seed)?);
        report.add(Variant::Lc, STAGES[0], &eval_policy(cfg, &pretrained.lc, scene, eval_seed)?);
        let n = cfg.collection.episodes_per_scene;
        let gc_collection = collect(cfg, &pretrained.gc, scene, n, derive_seed(cfg.seed, "collect-gc", i as u64), BTreeMap::new())?;
        let lc_collection = collect(cfg, &pretrained.lc, scene, n, derive_seed(cfg.seed, "collect-lc", i as u64), BTreeMap::new())?;
        for (name, c) in [("gc", &gc_collection), ("lc", &lc_collection)] {
            report.collection.insert(
                format!("{}/{name}", scene.id),
                CollectionSummary {
                    episodes: c.stats.appended,
                    oracle_success_rate: c.oracle_success_rate(),
                    gt_success_rate: c.gt_success_rate(),
                },
            );
        }
        let improved_gc = improve(cfg, Variant::Gc, &demos, &gc_collection.records, ImproveMode::PerScene)?;
        let improved_lc = improve(cfg, Variant::Lc, &demos, &gc_collection.records, ImproveMode::PerScene)?;
        report.add(Variant::Gc, STAGES[1], &eval_policy(cfg, &improved_gc, scene, eval_seed)?);
        report.add(Variant::Lc, STAGES[1], &eval_policy(cfg, &improved_lc, scene, eval_seed)?);
        all_auto.extend(gc_collection.records.iter().cloned());
        scenes.push(SceneOutcome {
            scene_id: scene.id.clone(),
            gc_collection,
            lc_collection,
            improved_gc,
            improved_lc,
        });
    }
    report.confusion = stats(&all_auto).confusion;
    let (generalist_gc, generalist_lc) = if all_auto.is_empty() {
        (pretrained.gc.clone(), pretrained.lc.clone())
    } else {
        (
            improve(cfg, Variant::Gc, &demos, &all_auto, ImproveMode::Generalist)?,
            improve(cfg, Variant::Lc, &demos, &all_auto, ImproveMode::Generalist)?,
        )
    };
    for scene in &cfg.shifted_scenes {
        report.add(Variant::Gc, STAGES[2], &eval_policy(cfg, &generalist_gc, scene, eval_seed)?);
        report.add(Variant::Lc, STAGES[2], &eval_policy(cfg, &generalist_lc, scene, eval_seed)?);
    }
    Ok(PipelineOutcome {
        demos,
        demo_report,
        pretrained,
        scenes,
        generalist_gc,
        generalist_lc,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_values() {
        let (lo, hi) = wilson_interval(5, 10);
        assert!((lo - 0.2366).abs() < 1e-4 && (hi - 0.7634).abs() < 1e-4);
        let (lo, hi) = wilson_interval(0, 50);
        assert!(lo.abs() < 1e-12);
        assert!((hi - 0.0713).abs() < 1e-4);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
    }

    fn desk() -> ExperimentConfig {
        ExperimentConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")).unwrap()
    }

    #[test]
    fn default_config_loads_and_round_trips() {
        let cfg = desk();
        assert_eq!(cfg.pretrain_scenes.len(), 8);
        assert_eq!(cfg.shifted_scenes.len(), 3);
        assert_eq!(cfg.decoding.eval, Decoding::Tempered(0.5));
        assert_eq!(cfg.generalist_train().gradient_steps, 3 * cfg.improve.gradient_steps);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_ne!(cfg.clone().with_seed(8).hash(), cfg.hash());
    }

    #[test]
    fn invalid_sections_are_config_errors() {
        let cfg = desk();
        let mut bad = cfg.clone();
        bad.decoding.eval = Decoding::Tempered(0.0);
        assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        let mut bad = cfg.clone();
        bad.shifted_scenes[1].id = bad.shifted_scenes[0].id.clone();
        assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        let mut bad = cfg.clone();
        bad.demos.epsilon = 1.5;
        assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        let text = cfg.to_toml().replace("[eval]", "[eval]\nsurprise = 1");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn generalist_falls_back_to_improve() {
        let mut cfg = desk();
        cfg.generalist = None;
        assert_eq!(cfg.generalist_train(), &cfg.improve);
    }

    #[test]
    fn improve_without_approved_data_fails() {
        let cfg = desk();
        assert!(matches!(
            improve(&cfg, Variant::Gc, &[], &[], ImproveMode::PerScene),
            Err(Error::EmptyAfterFilter)
        ));
    }

    fn eval(scene: &str, rates: &[usize]) -> EvalReport {
        EvalReport {
            scene_id: scene.into(),
            per_task: rates
                .iter()
                .enumerate()
                .map(|(i, s)| crate::policy::TaskEval {
                    task: format!("task {i}"),
                    successes: *s,
                    episodes: 50,
                })
                .collect(),
        }
    }

    #[test]
    fn report_checks_apply_thresholds() {
        let mut r = Report::empty();
        for s in ["a", "b", "c"] {
            r.add(Variant::Gc, STAGES[0], &eval(s, &[10, 10]));
            r.add(Variant::Gc, STAGES[1], &eval(s, &[15, 16]));
            r.add(Variant::Gc, STAGES[2], &eval(s, &[14, 14]));
            r.add(Variant::Lc, STAGES[0], &eval(s, &[0, 1]));
            r.add(Variant::Lc, STAGES[1], &eval(s, &[5, 5]));
            for (v, rate) in [("gc", 0.4), ("lc", 0.2)] {
                r.collection.insert(
                    format!("{s}/{v}"),
                    CollectionSummary {
                        episodes: 200,
                        oracle_success_rate: rate,
                        gt_success_rate: 0.0,
                    },
                );
            }
        }
        assert_eq!(r.scenes(), ["a", "b", "c"]);
        assert!((r.scene_average(Variant::Gc, STAGES[1], "a").unwrap() - 0.31).abs() < 1e-12);
        let failed: Vec<String> = r.checks().into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, Vec::<String>::new());
        // 15/10 = 1.5x but 31/20 < 1.5x on one task pair
        r.add(Variant::Gc, STAGES[1], &eval("b", &[15, 14]));
        let failed: Vec<String> = r.checks().into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, ["improvement/b", "improvement/scenes"]);
    }

    #[test]
    fn report_json_round_trips() {
        let mut r = Report::empty();
        r.add(Variant::Gc, STAGES[0], &eval("a", &[3, 7]));
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.render().contains("gc/pretrained"));
    }
}
