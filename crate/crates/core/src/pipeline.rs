//! The end-to-end pipeline as a DAG of files in one output directory.
//!
//! ```text
//! sample    -> task.json, inputs.jsonl, chains.jsonl
//! episodes  -> episodes.jsonl
//! train     -> checkpoint.json
//! generate  -> rollouts.jsonl
//! eval      -> metrics.csv, metrics.txt
//! ```
//!
//! Every artifact carries the hash of the resolved configuration; timestamps
//! live in `<artifact>.provenance.json` sidecars so that replaying a command
//! reproduces the artifact byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, RunConfig, Stage};
use crate::encoding::RewardMode;
use crate::energy::{make_guide_oracle_task, Task, TaskArtifact};
use crate::episodes::{encode_training_set, extract_episodes, fit_binner, improving_transitions, Extraction};
use crate::error::{Error, Result};
use crate::eval::{metrics, Evaluator, MetricsReport};
use crate::inference::{batch_generate, GenerateConfig, Rollout};
use crate::model::{train_ar, train_mlp, ExtrapolatorCheckpoint};
use crate::records::{read_jsonl, write_jsonl, ArtifactHeader, ChainRecord, Episode, SCHEMA_VERSION};
use crate::rng::{derive_seed, RngStream};
use crate::sampler::{run_chains, run_epochs};
use crate::vocab::TokenSequence;

pub const TASK_FILE: &str = "task.json";
pub const INPUTS_FILE: &str = "inputs.jsonl";
pub const CHAINS_FILE: &str = "chains.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Strategy tag of the 2-state episodes the MLP is trained on.
pub const IMPROVING_TRANSITIONS: &str = "improving-transitions";

// Independent streams of one run, derived from its seed.
const STREAM_TASK: u64 = 0;
const STREAM_STARTS: u64 = 1;
const STREAM_CHAINS: u64 = 2;
const STREAM_INPUTS: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_GENERATE: u64 = 5;
const STREAM_BASELINE: u64 = 6;

fn stream(seed: u64, which: u64) -> RngStream {
    RngStream::new(seed).child(which)
}

pub fn build_task(cfg: &RunConfig) -> Result<Task> {
    make_guide_oracle_task(&cfg.task, &cfg.experts, &mut stream(cfg.seed, STREAM_TASK))
}

/// Chain starts and held-out evaluation inputs.
pub fn draw_inputs(cfg: &RunConfig, task: &Task) -> Result<(Vec<TokenSequence>, Vec<TokenSequence>)> {
    let mut rng = stream(cfg.seed, STREAM_STARTS);
    let starts = (0..cfg.chains.count)
        .map(|_| task.sample_initial(&mut rng))
        .collect::<Result<_>>()?;
    let mut rng = stream(cfg.seed, STREAM_INPUTS);
    let inputs = (0..cfg.eval.inputs)
        .map(|_| task.sample_initial(&mut rng))
        .collect::<Result<_>>()?;
    Ok((starts, inputs))
}

pub fn sample_chains(cfg: &RunConfig, task: &Task, starts: &[TokenSequence]) -> Result<Vec<ChainRecord>> {
    run_chains(task, starts, &cfg.sampler_for(task.length()), &stream(cfg.seed, STREAM_CHAINS))
}

/// Episodes for the configured model: improving transitions as 2-state
/// episodes for the MLP, the configured strategy otherwise.
pub fn episodes_from_chains(cfg: &RunConfig, chains: &[ChainRecord]) -> Result<Extraction> {
    if chains.is_empty() {
        return Err(Error::contract("no chains to build episodes from"));
    }
    match cfg.model.kind {
        ModelKind::Ar => extract_episodes(chains, &cfg.strategy),
        ModelKind::Mlp => {
            let mut episodes = Vec::new();
            let mut discarded = 0;
            for c in chains {
                let pairs = improving_transitions(c);
                discarded += usize::from(pairs.is_empty());
                let energy_scores = dedup_scores(c);
                for ((a, b), s) in pairs.into_iter().zip(energy_scores) {
                    episodes.push(Episode::new(IMPROVING_TRANSITIONS, vec![a, b], vec![s])?);
                }
            }
            Ok(Extraction { episodes, discarded })
        }
    }
}

/// Scores of the destinations of improving transitions, aligned with
/// [`improving_transitions`].
fn dedup_scores(c: &ChainRecord) -> Vec<f64> {
    let d = crate::episodes::dedup_chain(c);
    (1..d.scores.len())
        .filter(|&t| d.scores[t] > d.scores[t - 1])
        .map(|t| d.scores[t])
        .collect()
}

pub fn train_from_episodes(cfg: &RunConfig, task: &Task, ex: Extraction) -> Result<ExtrapolatorCheckpoint> {
    let mut rng = stream(cfg.seed, STREAM_TRAIN);
    let hash = cfg.stage_hash(Stage::Train);
    match cfg.model.kind {
        ModelKind::Mlp => {
            if ex.episodes.is_empty() {
                return Err(Error::EmptyTrainingSet {
                    discarded: ex.discarded,
                });
            }
            let pairs: Vec<_> = ex
                .episodes
                .iter()
                .map(|e| (e.states[0].clone(), e.states[1].clone()))
                .collect();
            train_mlp(&pairs, &cfg.model.mlp, &hash, &mut rng)
        }
        ModelKind::Ar => {
            if ex.episodes.is_empty() {
                return Err(Error::EmptyTrainingSet {
                    discarded: ex.discarded,
                });
            }
            let mode = cfg.model.reward_mode;
            let binner = fit_binner(&ex.episodes, cfg.model.bins)?;
            let bins = if mode.scored() { cfg.model.bins } else { 0 };
            let vocab = task.vocabulary(cfg.strategy.cap + 2, bins)?;
            let set = encode_training_set(ex, &vocab, &binner, mode)?;
            train_ar(&set.encoded, &vocab, &binner, mode, &cfg.model.ar, &hash, &mut rng)
        }
    }
}

pub fn generate(
    cfg: &RunConfig,
    task: &Task,
    ckpt: &ExtrapolatorCheckpoint,
    inputs: &[TokenSequence],
) -> Result<Vec<Result<Rollout>>> {
    let gen = GenerateConfig {
        max_states: cfg.max_states(),
        steps: cfg.generation.steps,
        decode: cfg.decode(),
    };
    batch_generate(ckpt, inputs, Some(task), &gen, derive_seed(cfg.seed, STREAM_GENERATE))
}

/// Final state of an `epochs`-epoch chain from every input.
pub fn mcmc_baseline(cfg: &RunConfig, task: &Task, inputs: &[TokenSequence], epochs: usize) -> Result<Vec<TokenSequence>> {
    use rayon::prelude::*;
    let base = stream(cfg.seed, STREAM_BASELINE);
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let c = run_epochs(task, x0, epochs, &cfg.sampler, &mut base.child(i as u64))?;
            Ok(c.states.last().expect("chains are non-empty").clone())
        })
        .collect()
}

/// Everything one in-memory run produces.
pub struct RunOutput {
    pub task: Task,
    pub starts: Vec<TokenSequence>,
    pub inputs: Vec<TokenSequence>,
    pub chains: Vec<ChainRecord>,
    pub episodes: Vec<Episode>,
    pub discarded: usize,
    pub checkpoint: ExtrapolatorCheckpoint,
    pub rollouts: Vec<Result<Rollout>>,
}

pub fn run_all(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let task = build_task(cfg)?;
    let (starts, inputs) = draw_inputs(cfg, &task)?;
    let chains = sample_chains(cfg, &task, &starts)?;
    let ex = episodes_from_chains(cfg, &chains)?;
    let (episodes, discarded) = (ex.episodes.clone(), ex.discarded);
    let checkpoint = train_from_episodes(cfg, &task, ex)?;
    let rollouts = generate(cfg, &task, &checkpoint, &inputs)?;
    Ok(RunOutput {
        task,
        starts,
        inputs,
        chains,
        episodes,
        discarded,
        checkpoint,
        rollouts,
    })
}

// ---- file plumbing ----

#[derive(Serialize, Deserialize)]
struct TaskFile {
    header: ArtifactHeader,
    task: TaskArtifact,
}

/// One line of `rollouts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLine {
    pub input: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rollout: Option<Rollout>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

fn header(cfg: &RunConfig, artifact: &str, stage: Stage) -> ArtifactHeader {
    ArtifactHeader {
        v: SCHEMA_VERSION,
        artifact: artifact.into(),
        config_hash: cfg.stage_hash(stage),
        seed: cfg.seed,
    }
}

fn write_provenance(path: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let side = PathBuf::from(format!("{}.provenance.json", path.display()));
    let body = serde_json::json!({
        "artifact": path.file_name().map(|f| f.to_string_lossy().into_owned()),
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "created_unix": secs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(side, serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.into(),
        })
    }
}

fn check_hash(path: &Path, found: Option<&str>, cfg: &RunConfig, stage: Stage, force: bool) -> Result<()> {
    let expected = cfg.stage_hash(stage);
    match found {
        Some(h) if h == expected => Ok(()),
        _ if force => Ok(()),
        Some(h) => Err(Error::Provenance(format!(
            "{} was produced by config {h}, current config is {expected} (use --force to override)",
            path.display()
        ))),
        None => Err(Error::Provenance(format!(
            "{} has no provenance header (use --force to override)",
            path.display()
        ))),
    }
}

fn read_store<T: DeserializeOwned>(path: &Path, stage: Stage, cfg: &RunConfig, force: bool) -> Result<Vec<T>> {
    require(path, producer(stage))?;
    let (h, records) = read_jsonl(path)?;
    check_hash(path, h.as_ref().map(|h| h.config_hash.as_str()), cfg, stage, force)?;
    Ok(records)
}

fn producer(stage: Stage) -> &'static str {
    match stage {
        Stage::Sample => "chainex sample",
        Stage::Episodes => "chainex episodes",
        Stage::Train => "chainex train",
        Stage::Generate => "chainex generate",
        Stage::Eval => "chainex eval",
    }
}

fn store<T: Serialize>(dir: &Path, file: &str, cfg: &RunConfig, stage: Stage, command: &str, records: &[T]) -> Result<PathBuf> {
    let path = dir.join(file);
    write_jsonl(&path, &header(cfg, file.trim_end_matches(".jsonl"), stage), records)?;
    write_provenance(&path, cfg, command)?;
    Ok(path)
}

pub fn load_task(dir: &Path, cfg: &RunConfig, force: bool) -> Result<Task> {
    let path = dir.join(TASK_FILE);
    require(&path, producer(Stage::Sample))?;
    let f: TaskFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
    check_hash(&path, Some(&f.header.config_hash), cfg, Stage::Sample, force)?;
    Task::from_artifact(f.task)
}

pub fn cmd_sample(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    write_config(dir, cfg)?;
    let task = build_task(cfg)?;
    let (starts, inputs) = draw_inputs(cfg, &task)?;
    let task_path = dir.join(TASK_FILE);
    let tf = TaskFile {
        header: header(cfg, "task", Stage::Sample),
        task: task.artifact().clone(),
    };
    fs::write(&task_path, serde_json::to_string(&tf)?)?;
    write_provenance(&task_path, cfg, "sample")?;
    let inputs_path = store(dir, INPUTS_FILE, cfg, Stage::Sample, "sample", &inputs)?;
    let chains = sample_chains(cfg, &task, &starts)?;
    let chains_path = store(dir, CHAINS_FILE, cfg, Stage::Sample, "sample", &chains)?;
    Ok(vec![task_path, inputs_path, chains_path])
}

pub fn cmd_episodes(cfg: &RunConfig, dir: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let chains: Vec<ChainRecord> = read_store(&dir.join(CHAINS_FILE), Stage::Sample, cfg, force)?;
    let ex = episodes_from_chains(cfg, &chains)?;
    if ex.episodes.is_empty() {
        return Err(Error::EmptyTrainingSet {
            discarded: ex.discarded,
        });
    }
    write_config(dir, cfg)?;
    store(dir, EPISODES_FILE, cfg, Stage::Episodes, "episodes", &ex.episodes)
}

pub fn cmd_train(cfg: &RunConfig, dir: &Path, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let task = load_task(dir, cfg, force)?;
    let episodes: Vec<Episode> = read_store(&dir.join(EPISODES_FILE), Stage::Episodes, cfg, force)?;
    for e in &episodes {
        e.validate()?;
    }
    let ckpt = train_from_episodes(cfg, &task, Extraction { episodes, discarded: 0 })?;
    write_config(dir, cfg)?;
    let path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&path)?;
    write_provenance(&path, cfg, "train")?;
    Ok(path)
}

/// Where `generate` reads from; `None` means the run directory's own files.
#[derive(Debug, Clone, Default)]
pub struct GenerateSources {
    pub checkpoint: Option<PathBuf>,
    pub inputs: Option<PathBuf>,
    /// Reward mode the checkpoint must carry.
    pub mode: Option<RewardMode>,
}

pub fn cmd_generate(cfg: &RunConfig, dir: &Path, src: &GenerateSources, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let task = load_task(dir, cfg, force)?;
    let inputs_path = src.inputs.clone().unwrap_or_else(|| dir.join(INPUTS_FILE));
    let inputs: Vec<TokenSequence> = read_store(&inputs_path, Stage::Sample, cfg, force)?;
    let ckpt_path = src.checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    require(&ckpt_path, producer(Stage::Train))?;
    let ckpt = ExtrapolatorCheckpoint::load(&ckpt_path)?;
    check_hash(&ckpt_path, Some(&ckpt.config_hash), cfg, Stage::Train, force)?;
    if let Some(mode) = src.mode {
        if ckpt.reward_mode != mode {
            return Err(Error::Config(vec![format!(
                "{} was trained in {} mode, not {mode}",
                ckpt_path.display(),
                ckpt.reward_mode
            )]));
        }
    }
    let rollouts = generate(cfg, &task, &ckpt, &inputs)?;
    let lines: Vec<RolloutLine> = rollouts
        .into_iter()
        .enumerate()
        .map(|(input, r)| match r {
            Ok(r) => RolloutLine {
                input,
                rollout: Some(r),
                error: None,
            },
            Err(e) => RolloutLine {
                input,
                rollout: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    write_config(dir, cfg)?;
    store(dir, ROLLOUTS_FILE, cfg, Stage::Generate, "generate", &lines)
}

/// Scores `rollouts.jsonl` (and any extra rollout files) with the oracle.
pub fn cmd_eval(cfg: &RunConfig, dir: &Path, extra: &[PathBuf], force: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let task = load_task(dir, cfg, force)?;
    let mut files = vec![dir.join(ROLLOUTS_FILE)];
    files.extend(extra.iter().cloned());
    let mut lines: Vec<RolloutLine> = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    for f in &files {
        require(f, producer(Stage::Generate))?;
        let (h, mut recs) = read_jsonl::<RolloutLine>(f)?;
        hashes.push(h.map(|h| h.config_hash).unwrap_or_default());
        lines.append(&mut recs);
    }
    check_hash(&files[0], hashes.first().map(String::as_str), cfg, Stage::Generate, force)?;
    hashes.sort_unstable();
    hashes.dedup();
    if hashes.len() > 1 && !force {
        return Err(Error::Provenance(format!(
            "rollouts come from {} different configurations (use --force to mix them)",
            hashes.len()
        )));
    }
    if lines.is_empty() {
        return Err(Error::Config(vec![format!("{} holds no rollouts", files[0].display())]));
    }
    let rollouts: Vec<Result<Rollout>> = lines
        .into_iter()
        .map(|l| l.rollout.ok_or_else(|| Error::contract(l.error.unwrap_or_default())))
        .collect();
    let report = Evaluator::new(&task).report_rollouts("q_theta", cfg.seed, &rollouts, &cfg.eval.thresholds);
    write_config(dir, cfg)?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, metrics::to_csv(std::slice::from_ref(&report)))?;
    write_provenance(&csv, cfg, "eval")?;
    fs::write(dir.join("metrics.txt"), metrics::to_text(std::slice::from_ref(&report)))?;
    Ok(report)
}

/// Outcome of the binary toy recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub acceptance_rate: f64,
    pub best_reward: f64,
    pub transitions: usize,
    pub final_loss: f64,
    /// Reward of `x0` followed by the reward after each MLP step.
    pub trajectory: Vec<f64>,
    pub optimum: f64,
    /// First step whose reward is the optimum, if any.
    pub optimum_step: Option<usize>,
}

/// Reference values of the original toy experiment.
pub const TOY_REFERENCE: (f64, f64, usize, [f64; 5]) = (0.437, 244.7, 2000, [1.0, 3.3, 15.6, 314.2, 314.2]);

pub fn run_toy(cfg: &RunConfig) -> Result<(ToyReport, RunOutput)> {
    if cfg.model.kind != ModelKind::Mlp {
        return Err(Error::Config(vec!["the toy recipe needs model.kind = \"mlp\"".into()]));
    }
    let out = run_all(cfg)?;
    let ev = Evaluator::new(&out.task);
    let chain = &out.chains[0];
    let best_reward = chain
        .states
        .iter()
        .filter_map(|x| ev.oracle(x))
        .fold(f64::NEG_INFINITY, f64::max);
    let rollout = out.rollouts[0].as_ref().map_err(|e| Error::contract(e.to_string()))?;
    let mut trajectory = vec![ev.oracle(&rollout.initial).unwrap_or(f64::NAN)];
    trajectory.extend(rollout.states.iter().map(|x| ev.oracle(x).unwrap_or(f64::NAN)));
    let optimum = ev.optimum();
    let optimum_step = trajectory.iter().position(|&r| (r - optimum).abs() < 1e-9);
    let report = ToyReport {
        seed: cfg.seed,
        acceptance_rate: chain.acceptance_rate(),
        best_reward,
        transitions: out.episodes.len(),
        final_loss: out.checkpoint.final_loss().unwrap_or(f64::NAN),
        trajectory,
        optimum,
        optimum_step,
    };
    Ok((report, out))
}

impl ToyReport {
    pub fn render(&self) -> String {
        let (acc, best, trans, traj) = TOY_REFERENCE;
        let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>().join(", ");
        format!(
            "toy recipe, seed {}\n\
             {:<28} {:>14} {:>14}\n\
             {:<28} {:>13.1}% {:>13.1}%\n\
             {:<28} {:>14.1} {:>14.1}\n\
             {:<28} {:>14} {:>14}\n\
             {:<28} {:>14.4} {:>14}\n\
             reward trajectory (this run): {}\n\
             reward trajectory (reference): {}\n\
             optimum {:.2} reached at step {}\n",
            self.seed,
            "",
            "this run",
            "reference",
            "acceptance rate",
            100.0 * self.acceptance_rate,
            100.0 * acc,
            "best MCMC reward",
            self.best_reward,
            best,
            "improving transitions",
            self.transitions,
            format!("~{trans}"),
            "final MLP training loss",
            self.final_loss,
            "-",
            fmt(&self.trajectory),
            fmt(&traj),
            self.optimum,
            self.optimum_step.map_or("never".to_string(), |s| s.to_string()),
        )
    }
}

pub fn cmd_toy(cfg: &RunConfig, dir: &Path) -> Result<ToyReport> {
    let (report, out) = run_toy(cfg)?;
    write_config(dir, cfg)?;
    let path = dir.join("toy-report.txt");
    fs::write(&path, report.render())?;
    fs::write(dir.join("toy-report.json"), serde_json::to_string_pretty(&report)?)?;
    write_provenance(&path, cfg, "toy")?;
    store(dir, CHAINS_FILE, cfg, Stage::Sample, "toy", &out.chains)?;
    Ok(report)
}
