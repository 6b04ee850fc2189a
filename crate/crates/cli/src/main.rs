use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chainex::config::RunConfig;
use chainex::encoding::RewardMode;
use chainex::episodes::StrategyKind;
use chainex::error::{Error, Result};
use chainex::eval::ablation::{self, AblationRow};
use chainex::pipeline::{self, GenerateSources};
use clap::{Args, Parser, Subcommand};

/// Learn iterative extrapolation models from Markov chains.
#[derive(Parser)]
#[command(name = "chainex", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Preset name (`toy`, `motif`) or path to a TOML config. Defaults to the
    /// `config.toml` already in the output directory.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all pipeline stages.
    #[arg(long, global = true, env = "CHAINEX_OUT", default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Accept upstream artifacts produced by a different configuration.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the task and sample chains: task.json, inputs.jsonl, chains.jsonl.
    Sample,
    /// Select training episodes from the chains: episodes.jsonl.
    Episodes(StrategyArgs),
    /// Train the extrapolator: checkpoint.json.
    Train,
    /// Roll the extrapolator out from every input: rollouts.jsonl.
    Generate(GenerateArgs),
    /// Score rollouts with the oracle: metrics.csv, metrics.txt.
    Eval {
        /// Further rollout files to pool with the run's own.
        #[arg(long = "rollouts")]
        extra: Vec<PathBuf>,
    },
    /// Run an ablation over the configured seeds.
    Ablate {
        #[command(subcommand)]
        which: Ablation,
        /// Seeds to run (defaults to the config's seed list).
        #[arg(long, value_delimiter = ',', global = true)]
        seeds: Vec<u64>,
    },
    /// The binary toy recipe end to end, with reference values.
    Toy,
    /// Print the resolved configuration.
    Config,
}

#[derive(Args)]
struct StrategyArgs {
    /// first-best, thin-fixed, thin-variable, denergy-fixed or denergy-variable.
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Revised states of the fixed-length strategies.
    #[arg(long)]
    n: Option<usize>,
    /// Thinning factor of thin-variable.
    #[arg(long)]
    k: Option<usize>,
    /// Relative-improvement threshold of denergy-variable.
    #[arg(long)]
    theta: Option<f64>,
    /// Most revised states of the variable-length strategies.
    #[arg(long)]
    cap: Option<usize>,
}

impl StrategyArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.strategy;
        s.kind = self.strategy.unwrap_or(s.kind);
        s.n = self.n.unwrap_or(s.n);
        s.k = self.k.unwrap_or(s.k);
        s.theta = self.theta.unwrap_or(s.theta);
        s.cap = self.cap.unwrap_or(s.cap);
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint to load (defaults to the run's own).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Inputs file (defaults to the run's own).
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Reward mode the checkpoint must have been trained with.
    #[arg(long)]
    mode: Option<RewardMode>,
    #[arg(long)]
    max_states: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// 0 disables top-k truncation.
    #[arg(long)]
    top_k: Option<usize>,
}

impl GenerateArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.generation;
        g.max_states = self.max_states.or(g.max_states);
        g.temperature = self.temperature.unwrap_or(g.temperature);
        g.top_k = self.top_k.unwrap_or(g.top_k);
    }
}

#[derive(Subcommand)]
enum Ablation {
    /// Reward tokens: none, real, predicted.
    RewardMode,
    /// Fixed episode lengths; 2 means first/best.
    EpisodeLength {
        #[arg(long, value_delimiter = ',', default_value = "2,3,5,9")]
        lengths: Vec<usize>,
    },
    /// Train on a prefix of every chain.
    ChainLength {
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
        fractions: Vec<f64>,
    },
    /// Best score of continued MCMC per epoch against the extrapolator.
    McmcContinue,
}

fn resolve_config(g: &Global, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(name) if Path::new(name).is_file() => RunConfig::load(Path::new(name))?,
        Some(name) => RunConfig::preset(name)?,
        None => {
            let saved = g.out.join(pipeline::CONFIG_FILE);
            if !saved.is_file() {
                return Err(Error::Config(vec![format!(
                    "no --config given and {} does not exist",
                    saved.display()
                )]));
            }
            RunConfig::load(&saved)?
        }
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    match command {
        Command::Episodes(a) => a.apply(&mut cfg),
        Command::Generate(a) => a.apply(&mut cfg),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_ablation(out: &Path, name: &str, rows: &[AblationRow]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("ablation-{name}.csv")), ablation::rows_to_csv(rows))?;
    let text = ablation::rows_to_text(rows);
    std::fs::write(out.join(format!("ablation-{name}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(vec![format!("--jobs: {e}")]))?;
    }
    let cfg = resolve_config(&cli.global, &cli.command)?;
    let (out, force) = (&cli.global.out, cli.global.force);
    match cli.command {
        Command::Sample => {
            for p in pipeline::cmd_sample(&cfg, out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Episodes(_) => println!("wrote {}", pipeline::cmd_episodes(&cfg, out, force)?.display()),
        Command::Train => println!("wrote {}", pipeline::cmd_train(&cfg, out, force)?.display()),
        Command::Generate(a) => {
            let src = GenerateSources {
                checkpoint: a.ckpt,
                inputs: a.inputs,
                mode: a.mode,
            };
            println!("wrote {}", pipeline::cmd_generate(&cfg, out, &src, force)?.display());
        }
        Command::Eval { extra } => {
            let report = pipeline::cmd_eval(&cfg, out, &extra, force)?;
            print!("{}", chainex::eval::metrics::to_text(&[report]));
        }
        Command::Ablate { which, seeds } => {
            let seeds = if seeds.is_empty() { ablation::seeds_of(&cfg) } else { seeds };
            match which {
                Ablation::RewardMode => write_ablation(out, "reward-mode", &ablation::ablate_reward_mode(&cfg, &seeds)?)?,
                Ablation::EpisodeLength { lengths } => write_ablation(
                    out,
                    "episode-length",
                    &ablation::ablate_episode_length(&cfg, &lengths, &seeds)?,
                )?,
                Ablation::ChainLength { fractions } => write_ablation(
                    out,
                    "chain-length",
                    &ablation::ablate_chain_truncation(&cfg, &fractions, &seeds)?,
                )?,
                Ablation::McmcContinue => {
                    let curves = ablation::compare_mcmc_continuation(&cfg, &seeds)?;
                    std::fs::create_dir_all(out)?;
                    std::fs::write(out.join("mcmc-continuation.csv"), ablation::curves_to_csv(&curves))?;
                    print!("{}", ablation::curves_to_text(&curves));
                }
            }
        }
        Command::Toy => print!("{}", pipeline::cmd_toy(&cfg, out)?.render()),
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } | Error::Provenance(_) | Error::Parse { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
