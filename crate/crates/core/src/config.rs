//! Run configuration: one TOML file with nested blocks, strict about unknown
//! keys, with the `toy` and `motif` presets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{ExpertSpec, MotifConfig, TaskConfig};
use crate::episodes::{StrategyConfig, StrategyKind};
use crate::encoding::RewardMode;
use crate::error::{Error, Result};
use crate::model::{ArSettings, DecodeConfig, MlpTrainConfig};
use crate::sampler::{FillRule, KernelConfig, MaskRule, SamplerConfig};

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Sample,
    Episodes,
    Train,
    Generate,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Fixed-length one-step extrapolator trained on improving transitions.
    Mlp,
    /// Autoregressive episode model.
    Ar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainsConfig {
    /// Chains per run, one per initial state.
    pub count: usize,
    /// When set, overrides `sampler.steps` with `epochs * L`.
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub reward_mode: RewardMode,
    /// Score-quantization bins.
    pub bins: usize,
    pub mlp: MlpTrainConfig,
    pub ar: ArSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
    /// Defaults to the strategy cap plus 2.
    pub max_states: Option<usize>,
    /// Rollout length of MLP checkpoints.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out initial states to generate from.
    pub inputs: usize,
    pub thresholds: Vec<f64>,
    /// Length of the MCMC baseline run from each input, in epochs.
    pub baseline_epochs: usize,
    /// Length of the continued-MCMC curve, in epochs.
    pub continuation_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds of multi-seed drivers (ablations).
    pub seeds: Vec<u64>,
    pub task: TaskConfig,
    pub experts: Vec<ExpertSpec>,
    pub sampler: SamplerConfig,
    pub chains: ChainsConfig,
    pub strategy: StrategyConfig,
    pub model: ModelConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "motif" => Ok(Self::motif()),
            other => Err(Error::Config(vec![format!("unknown preset `{other}` (expected toy or motif)")])),
        }
    }

    /// The binary toy problem: one 10000-step Metropolis chain from all zeros,
    /// improving transitions, MLP, five parallel decoding steps.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            task: TaskConfig::Toy { length: 16 },
            experts: vec![ExpertSpec::new("guide", 1.0)],
            sampler: SamplerConfig {
                steps: 10_000,
                record_every: 1,
                kernel: KernelConfig::BlockFlip,
                temperature: 1.0,
            },
            chains: ChainsConfig { count: 1, epochs: None },
            strategy: StrategyConfig {
                kind: StrategyKind::FirstBest,
                ..Default::default()
            },
            model: ModelConfig {
                kind: ModelKind::Mlp,
                reward_mode: RewardMode::None,
                bins: 32,
                mlp: MlpTrainConfig::default(),
                ar: ArSettings::default(),
            },
            generation: GenerationConfig {
                temperature: 1.0,
                top_k: 0,
                max_states: None,
                steps: 5,
            },
            eval: EvalConfig {
                inputs: 1,
                thresholds: vec![100.0, 300.0],
                baseline_epochs: 1,
                continuation_epochs: 10,
            },
        }
    }

    /// The motif guide/oracle task with the autoregressive extrapolator.
    pub fn motif() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            task: TaskConfig::Motif(MotifConfig::default()),
            experts: vec![ExpertSpec::new("guide", 3.0)],
            sampler: SamplerConfig {
                steps: 240,
                record_every: 1,
                kernel: KernelConfig::MaskInfill {
                    mask: MaskRule::Bernoulli { rate: 0.1 },
                    fill: FillRule::Positional,
                },
                temperature: 1.0,
            },
            chains: ChainsConfig {
                count: 400,
                epochs: Some(10),
            },
            strategy: StrategyConfig {
                kind: StrategyKind::DenergyFixed,
                n: 4,
                ..Default::default()
            },
            model: ModelConfig {
                kind: ModelKind::Ar,
                reward_mode: RewardMode::Predicted,
                bins: 32,
                mlp: MlpTrainConfig::default(),
                ar: ArSettings {
                    context_slack: 8,
                    ..Default::default()
                },
            },
            generation: GenerationConfig {
                temperature: 1.0,
                top_k: 0,
                max_states: None,
                steps: 5,
            },
            eval: EvalConfig {
                inputs: 200,
                thresholds: vec![5.0, 7.5, 10.0],
                baseline_epochs: 1,
                continuation_epochs: 10,
            },
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&s)
    }

    /// Every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Hash of the settings that can influence the artifacts of `stage`.
    /// Changing a later stage's settings keeps earlier artifacts valid.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut t = toml::Table::try_from(self).expect("run config serializes");
        t.remove("seeds");
        let keep_only = |t: &mut toml::Table, key: &str, fields: &[&str]| {
            if let Some(toml::Value::Table(inner)) = t.get_mut(key) {
                inner.retain(|k, _| fields.contains(&k));
            }
        };
        if stage < Stage::Eval {
            keep_only(&mut t, "eval", &["inputs"]);
        }
        if stage < Stage::Generate {
            t.remove("generation");
        }
        if stage < Stage::Train {
            keep_only(&mut t, "model", &["kind"]);
        }
        if stage < Stage::Episodes {
            t.remove("strategy");
            t.remove("model");
        }
        hex::encode(Sha256::digest(toml::to_string(&t).expect("table serializes").as_bytes()))
    }

    /// Reports every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = self.task.validate();
        errs.extend(self.sampler.validate());
        errs.extend(self.strategy.validate());
        if self.experts.is_empty() {
            errs.push("at least one expert is required".into());
        }
        for e in &self.experts {
            if !matches!(e.name.as_str(), "guide" | "toy-log-reward" | "hamming-to-start") {
                errs.push(format!("unknown expert `{}`", e.name));
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                errs.push(format!("expert `{}` weight must be finite and >= 0", e.name));
            }
        }
        if self.chains.count == 0 {
            errs.push("chains.count must be at least 1".into());
        }
        if self.chains.epochs == Some(0) {
            errs.push("chains.epochs must be at least 1".into());
        }
        if self.model.bins == 0 {
            errs.push("model.bins must be at least 1".into());
        }
        if self.model.kind == ModelKind::Mlp {
            if !matches!(self.task, TaskConfig::Toy { .. }) {
                errs.push("the MLP extrapolator needs the binary toy task".into());
            }
            if self.model.reward_mode != RewardMode::None {
                errs.push("the MLP extrapolator only supports reward mode none".into());
            }
        }
        if self.model.ar.heads == 0 || self.model.ar.d_model % self.model.ar.heads.max(1) != 0 {
            errs.push("model.ar.d_model must be a positive multiple of heads".into());
        }
        if !(self.generation.temperature > 0.0) {
            errs.push("generation.temperature must be positive".into());
        }
        if self.generation.steps == 0 || self.generation.max_states == Some(0) {
            errs.push("generation steps and max_states must be at least 1".into());
        }
        if self.eval.inputs == 0 || self.eval.baseline_epochs == 0 || self.eval.continuation_epochs == 0 {
            errs.push("eval inputs and epoch counts must be at least 1".into());
        }
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Sampler settings with the epoch override applied.
    pub fn sampler_for(&self, length: usize) -> SamplerConfig {
        SamplerConfig {
            steps: self.chains.epochs.map_or(self.sampler.steps, |e| e * length),
            ..self.sampler
        }
    }

    pub fn max_states(&self) -> usize {
        self.generation.max_states.unwrap_or(self.strategy.cap + 2)
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            temperature: self.generation.temperature,
            top_k: self.generation.top_k,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Energy weights and episode/decoding defaults of the three
/// full-scale settings. They need scorers this crate does not ship, so they
/// exist only as documented values.
pub mod fixtures {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub struct Fixture {
        pub name: &'static str,
        pub mcmc_epochs: usize,
        pub experts: Vec<(&'static str, f64)>,
        pub fixed_length: usize,
        pub theta: f64,
        pub thinning: usize,
        pub learning_rate: f64,
        pub temperature: f64,
        /// `None` where decoding runs without top-k truncation.
        pub top_k: Option<usize>,
    }

    pub fn protein() -> Fixture {
        Fixture {
            name: "protein",
            mcmc_epochs: 1,
            experts: vec![("ddg", 500.0), ("hamming-to-start", 10.0)],
            fixed_length: 4,
            theta: 0.2,
            thinning: 2,
            learning_rate: 2e-4,
            temperature: 1.5,
            top_k: None,
        }
    }

    pub fn sentiment() -> Fixture {
        Fixture {
            name: "sentiment",
            mcmc_epochs: 8,
            experts: vec![("sentiment", 1e5), ("hamming-to-start", 100.0)],
            fixed_length: 5,
            theta: 0.02,
            thinning: 100,
            learning_rate: 1e-4,
            temperature: 1.1,
            top_k: Some(16),
        }
    }

    pub fn anonymization() -> Fixture {
        Fixture {
            name: "anonymization",
            mcmc_epochs: 40,
            experts: vec![
                ("fluency", 10.0),
                ("hamming-to-start", 1.0),
                ("luar", 1e7),
                ("sbert", 5e5),
            ],
            fixed_length: 5,
            theta: 0.01,
            thinning: 3,
            learning_rate: 5e-5,
            temperature: 1.1,
            top_k: Some(50),
        }
    }

    impl Fixture {
        pub fn strategy(&self, kind: StrategyKind) -> StrategyConfig {
            StrategyConfig {
                kind,
                n: self.fixed_length,
                k: self.thinning,
                theta: self.theta,
                cap: 10,
            }
        }

        pub fn decode(&self) -> DecodeConfig {
            DecodeConfig {
                temperature: self.temperature,
                top_k: self.top_k.unwrap_or(0),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_hashes_ignore_later_stages() {
        let base = RunConfig::motif();
        let mut strat = base.clone();
        strat.strategy.n = 7;
        assert_eq!(base.stage_hash(Stage::Sample), strat.stage_hash(Stage::Sample));
        assert_ne!(base.stage_hash(Stage::Episodes), strat.stage_hash(Stage::Episodes));

        let mut gen = base.clone();
        gen.generation.temperature = 0.5;
        gen.seeds = vec![9];
        gen.eval.thresholds = vec![1.0];
        assert_eq!(base.stage_hash(Stage::Train), gen.stage_hash(Stage::Train));
        assert_ne!(base.stage_hash(Stage::Generate), gen.stage_hash(Stage::Generate));

        let mut inputs = base.clone();
        inputs.eval.inputs = 3;
        assert_ne!(base.stage_hash(Stage::Sample), inputs.stage_hash(Stage::Sample));
        assert_ne!(base.with_seed(1).stage_hash(Stage::Sample), base.stage_hash(Stage::Sample));
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for name in ["toy", "motif"] {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert_ne!(RunConfig::toy().hash(), RunConfig::motif().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = RunConfig::toy().to_toml();
        s = s.replacen("seed = 0", "seed = 0\nsede = 1", 1);
        assert!(matches!(RunConfig::from_toml(&s), Err(Error::Config(_))));
    }

    #[test]
    fn all_violations_are_listed() {
        let mut cfg = RunConfig::toy();
        cfg.chains.count = 0;
        cfg.model.bins = 0;
        cfg.experts.push(ExpertSpec::new("fluency", -1.0));
        let Err(Error::Config(errs)) = cfg.validate() else {
            panic!("expected config error")
        };
        assert!(errs.len() >= 4, "{errs:?}");
    }

    #[test]
    fn fixtures_match_the_hyperparameter_table() {
        let p = fixtures::protein();
        assert_eq!(p.experts[0].1, 500.0);
        assert_eq!(p.experts[1].1, 10.0);
        assert_eq!(p.strategy(StrategyKind::DenergyVariable).theta, 0.2);
        let s = fixtures::sentiment();
        assert_eq!(s.decode().top_k, 16);
        assert_eq!(s.decode().temperature, 1.1);
        assert_eq!(s.strategy(StrategyKind::ThinVariable).k, 100);
        let a = fixtures::anonymization();
        assert_eq!(a.strategy(StrategyKind::DenergyVariable).theta, 0.01);
        assert_eq!(a.decode().top_k, 50);
    }
}
