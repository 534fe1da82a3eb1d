use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use autoimprove::datastore::{stats, validate_file, vlm_successful, Store, Trajectory};
use autoimprove::experiment::{
    collect, eval_policy, gen_demos, improve, pretrain_variant, run_pipeline, ExperimentConfig, ImproveMode, Rate,
};
use autoimprove::policy::{PolicyParams, Variant};
use autoimprove::rng::derive_seed;
use autoimprove::task_select::BanditState;
use autoimprove::Error;

#[derive(Parser)]
#[command(name = "autoimprove", version, about = "Autonomous collection and self-improvement on a simulated desk")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scripted-expert demonstrations on the pretraining scenes.
    GenDemos {
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior-clones policies on a demonstration file.
    Pretrain {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::Both)]
        variant: VariantArg,
    },
    /// Reset-free autonomous collection on one scene.
    Collect {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configured episodes per scene.
        #[arg(long)]
        episodes: Option<usize>,
        /// Attempt-count table, read before and written after collection.
        #[arg(long)]
        bandit: Option<PathBuf>,
        /// Ignore an existing bandit table and start from zero counts.
        #[arg(long)]
        reset_bandit: bool,
    },
    /// Retrains from scratch on demonstrations plus autonomous data.
    Improve {
        #[arg(long)]
        demos: PathBuf,
        /// Autonomous dataset; repeat for several scenes.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum)]
        variant: SingleVariant,
        #[arg(long, value_enum, default_value_t = ModeArg::PerScene)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground-truth success rates of one policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Defaults to every shifted scene.
        #[arg(long)]
        scene: Vec<String>,
    },
    /// Runs the whole pipeline and writes the report tables.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
        /// Exit with status 3 when an end-to-end threshold is missed.
        #[arg(long)]
        check: bool,
    },
    /// Inspect trajectory files.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    Stats {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Checks every line, including the transition replay.
    Validate { file: PathBuf },
    Filter {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
    },
}

#[derive(Args)]
struct FilterArgs {
    /// Keep detector-approved records.
    #[arg(long)]
    success: bool,
    /// Keep detector-rejected records.
    #[arg(long, conflicts_with = "success")]
    failure: bool,
    #[arg(long)]
    scene: Option<String>,
    /// Substring of the task's language instruction.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Gc,
    Lc,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SingleVariant {
    Gc,
    Lc,
}

impl From<SingleVariant> for Variant {
    fn from(v: SingleVariant) -> Self {
        match v {
            SingleVariant::Gc => Variant::Gc,
            SingleVariant::Lc => Variant::Lc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerScene,
    Generalist,
}

enum Failure {
    Config(Error),
    Run(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigInvalid(_) => Failure::Config(e),
            e => Failure::Run(e),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Provenance written next to every artifact.
#[derive(Serialize)]
struct Manifest {
    command: String,
    config: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    policies: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    bandits: BTreeMap<String, BanditState>,
}

impl Manifest {
    fn new(command: &str, cli: &Cli, cfg: &ExperimentConfig) -> Self {
        Manifest {
            command: command.into(),
            config: cli.config.display().to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            policies: BTreeMap::new(),
            bandits: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> CliResult {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    fn write(&self, path: &Path) -> CliResult {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, &(text + "\n"))
    }
}

fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn export(records: Vec<Trajectory>, path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Store::from_records(records)?.export(path)?;
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&cli.config).map_err(Failure::Config)?;
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}

fn run(cli: &Cli) -> CliResult {
    if let Command::Dataset { command } = &cli.command {
        return dataset(command);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenDemos { out } => {
            let (demos, report) = gen_demos(&cfg)?;
            export(demos, out)?;
            println!(
                "requested {} stored {} unreachable {} failed {}",
                report.requested, report.stored, report.unreachable, report.failed
            );
            let mut m = Manifest::new("gen-demos", cli, &cfg);
            m.output(out)?;
            m.write(&manifest_path(out))
        }
        Command::Pretrain { demos, out_dir, variant } => {
            let records = Store::import(demos)?.records().to_vec();
            let variants = match variant {
                VariantArg::Gc => vec![Variant::Gc],
                VariantArg::Lc => vec![Variant::Lc],
                VariantArg::Both => vec![Variant::Gc, Variant::Lc],
            };
            create_dir(out_dir)?;
            let mut m = Manifest::new("pretrain", cli, &cfg);
            m.input(demos)?;
            for v in variants {
                let (params, losses) = pretrain_variant(&cfg, v, &records)?;
                let path = out_dir.join(format!("{}.policy", v.name()));
                params.save(&path)?;
                let log = out_dir.join(format!("{}.train.json", v.name()));
                write_file(&log, &serde_json::to_string(&losses).expect("losses serialize"))?;
                println!("{}: final loss {:?} -> {}", v.name(), losses.last().map(|l| l.1), path.display());
                m.output(&path)?;
                m.output(&log)?;
                m.policies.insert(v.name().into(), params.param_hash());
            }
            m.write(&out_dir.join("manifest.json"))
        }
        Command::Collect {
            policy,
            scene,
            out,
            episodes,
            bandit,
            reset_bandit,
        } => {
            let params = PolicyParams::load(policy)?;
            let scene = cfg.scene(scene).map_err(|e| Failure::Config(Error::ConfigInvalid(e.to_string())))?;
            let mut bandits = BTreeMap::new();
            if let Some(path) = bandit.as_ref().filter(|p| !reset_bandit && p.exists()) {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                bandits.insert(scene.id.clone(), BanditState::from_table(&text)?);
            }
            let n = episodes.unwrap_or(cfg.collection.episodes_per_scene);
            let seed = derive_seed(cfg.seed, &format!("collect-{}", params.dims.variant.name()), 0);
            let c = collect(&cfg, &params, scene, n, seed, bandits)?;
            println!(
                "episodes {} appended {} rejected {} faults {} fallbacks {} oracle-success {:.3} truth {:.3} scene-inits {}",
                c.stats.episodes,
                c.stats.appended,
                c.stats.rejected,
                c.stats.faults,
                c.stats.fallbacks,
                c.oracle_success_rate(),
                c.gt_success_rate(),
                c.stats.scene_initializations
            );
            export(c.records, out)?;
            let mut m = Manifest::new("collect", cli, &cfg);
            m.input(policy)?;
            m.output(out)?;
            m.policies.insert(params.dims.variant.name().into(), params.param_hash());
            if let Some(path) = bandit {
                let table = c.bandits.get(&scene.id).cloned().unwrap_or_default();
                write_file(path, &table.to_table())?;
                m.output(path)?;
            }
            m.bandits = c.bandits;
            m.write(&manifest_path(out))
        }
        Command::Improve {
            demos,
            data,
            variant,
            mode,
            out,
        } => {
            let pre = Store::import(demos)?.records().to_vec();
            let mut auto = Vec::new();
            for d in data {
                auto.extend(Store::import(d)?.records().iter().cloned());
            }
            let mode = match mode {
                ModeArg::PerScene => ImproveMode::PerScene,
                ModeArg::Generalist => ImproveMode::Generalist,
            };
            let kept = auto.iter().filter(|t| vlm_successful(t)).count();
            let params = improve(&cfg, (*variant).into(), &pre, &auto, mode)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            params.save(out)?;
            println!("trained on {kept} of {} autonomous records -> {}", auto.len(), out.display());
            let mut m = Manifest::new("improve", cli, &cfg);
            m.input(demos)?;
            for d in data {
                m.input(d)?;
            }
            m.output(out)?;
            m.policies.insert(params.dims.variant.name().into(), params.param_hash());
            m.write(&manifest_path(out))
        }
        Command::Eval { policy, scene } => {
            let params = PolicyParams::load(policy)?;
            let scenes: Vec<_> = if scene.is_empty() {
                cfg.shifted_scenes.iter().collect()
            } else {
                scene
                    .iter()
                    .map(|id| cfg.scene(id).map_err(|e| Failure::Config(Error::ConfigInvalid(e.to_string()))))
                    .collect::<CliResult<_>>()?
            };
            let seed = derive_seed(cfg.seed, "eval", 0);
            println!("{:<14} {:<56} {:>5} {:>17}", "scene", "task", "n", params.dims.variant.name());
            for s in scenes {
                let r = eval_policy(&cfg, &params, s, seed)?;
                for t in &r.per_task {
                    let rate = Rate::new(t.successes, t.episodes);
                    println!(
                        "{:<14} {:<56} {:>5} {:.2} [{:.2},{:.2}]",
                        s.id, t.task, t.episodes, rate.rate, rate.ci_low, rate.ci_high
                    );
                }
            }
            Ok(())
        }
        Command::Report { out_dir, check } => {
            let out = run_pipeline(&cfg)?;
            create_dir(out_dir)?;
            let text = out.report.render();
            print!("{text}");
            write_file(&out_dir.join("report.txt"), &text)?;
            write_file(&out_dir.join("report.json"), &out.report.to_json())?;
            let mut m = Manifest::new("report", cli, &cfg);
            let demos = out_dir.join("demos.jsonl");
            export(out.demos.clone(), &demos)?;
            m.output(&demos)?;
            m.policies.insert("gc/pretrained".into(), out.pretrained.gc.param_hash());
            m.policies.insert("lc/pretrained".into(), out.pretrained.lc.param_hash());
            for s in &out.scenes {
                for (name, c) in [("gc", &s.gc_collection), ("lc", &s.lc_collection)] {
                    let path = out_dir.join(format!("{}-{name}.jsonl", s.scene_id));
                    export(c.records.clone(), &path)?;
                    m.output(&path)?;
                    for (k, b) in &c.bandits {
                        m.bandits.insert(format!("{k}/{name}"), b.clone());
                    }
                }
                m.policies.insert(format!("gc/+scene/{}", s.scene_id), s.improved_gc.param_hash());
                m.policies.insert(format!("lc/+scene/{}", s.scene_id), s.improved_lc.param_hash());
            }
            m.policies.insert("gc/+all".into(), out.generalist_gc.param_hash());
            m.policies.insert("lc/+all".into(), out.generalist_lc.param_hash());
            m.output(&out_dir.join("report.txt"))?;
            m.output(&out_dir.join("report.json"))?;
            m.write(&out_dir.join("manifest.json"))?;
            if *check {
                let checks = out.report.checks();
                println!();
                for c in &checks {
                    println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                if checks.iter().any(|c| !c.passed) {
                    return Err(Failure::Check);
                }
            }
            Ok(())
        }
        Command::Dataset { .. } => unreachable!("handled above"),
    }
}

fn dataset(cmd: &DatasetCommand) -> CliResult {
    match cmd {
        DatasetCommand::Stats { file, json } => {
            let store = Store::import(file)?;
            let s = stats(store.records());
            if *json {
                println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
            } else {
                print!("{}", s.render());
            }
            Ok(())
        }
        DatasetCommand::Validate { file } => {
            let (n, bad) = validate_file(file)?;
            for (line, violations) in &bad {
                println!("line {line}: {}", violations.join("; "));
            }
            println!("{n} records, {} invalid", bad.len());
            if bad.is_empty() {
                Ok(())
            } else {
                Err(Failure::Run(Error::SchemaViolation {
                    line: bad[0].0,
                    violations: bad[0].1.clone(),
                }))
            }
        }
        DatasetCommand::Filter { file, out, filter } => {
            let store = Store::import(file)?;
            let mut view = store.view();
            if filter.success {
                view = view.filter(vlm_successful);
            }
            if filter.failure {
                view = view.filter(|t| !t.vlm_success);
            }
            if let Some(scene) = &filter.scene {
                view = view.filter(move |t| &t.scene_id == scene);
            }
            if let Some(task) = &filter.task {
                view = view.filter(move |t| t.task.language.contains(task.as_str()));
            }
            let kept = view.to_vec();
            println!("kept {} of {}", kept.len(), store.len());
            export(kept, out)
        }
    }
}
