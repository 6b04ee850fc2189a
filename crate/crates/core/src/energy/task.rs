//! Tasks bundle a cheap guide, an oracle reserved for evaluation, the
//! training range and an initial-state sampler.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::energy::motif::{fit_guide, MlpGuide, MotifConfig, MotifGenerator, MotifOracle};
use crate::energy::{toy_score, EnergyModel, Expert, HammingToReference, ToyLogReward, WeightedExpert};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::{TokenSequence, Vocabulary};

/// One weighted term of a task's energy model, by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    /// `guide`, `toy-log-reward` or `hamming-to-start`.
    pub name: String,
    pub weight: f64,
}

impl ExpertSpec {
    pub fn new(name: &str, weight: f64) -> Self {
        Self {
            name: name.into(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Toy {
        length: usize,
    },
    Motif(MotifConfig),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Toy { .. } => "toy",
            TaskConfig::Motif(_) => "motif",
        }
    }

    pub fn validate(&self) -> Vec<String> {
        match self {
            TaskConfig::Toy { length } if *length == 0 || length % 2 != 0 => {
                vec![format!("toy length must be even and positive, got {length}")]
            }
            TaskConfig::Toy { .. } => Vec::new(),
            TaskConfig::Motif(m) => m.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
enum Family {
    Toy,
    Motif {
        oracle: MotifOracle,
        guide: MlpGuide,
        max_match: f64,
        holdout_mae: f64,
    },
}

/// Serializable form of a [`Task`], so downstream commands need not refit the
/// guide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskArtifact {
    pub name: String,
    pub length: usize,
    pub content_size: usize,
    pub experts: Vec<ExpertSpec>,
    pub training_range: Option<(f64, f64)>,
    pub pool: Vec<TokenSequence>,
    family: Family,
}

#[derive(Debug, Clone)]
pub struct Task {
    artifact: TaskArtifact,
    guide: Option<Arc<MlpGuide>>,
}

/// Builds a task from its config; for the motif family this draws the target
/// pattern and fits the guide on in-range data only.
pub fn make_guide_oracle_task(cfg: &TaskConfig, experts: &[ExpertSpec], rng: &mut RngStream) -> Result<Task> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let artifact = match cfg {
        TaskConfig::Toy { length } => TaskArtifact {
            name: "toy".into(),
            length: *length,
            content_size: 2,
            experts: experts.to_vec(),
            training_range: None,
            pool: Vec::new(),
            family: Family::Toy,
        },
        TaskConfig::Motif(m) => {
            use rand::Rng;
            let target = TokenSequence::new((0..m.length).map(|_| rng.gen_range(0..m.vocab as u32)).collect());
            let oracle = MotifOracle { target };
            let fit = fit_guide(m, &oracle, rng)?;
            TaskArtifact {
                name: "motif".into(),
                length: m.length,
                content_size: m.vocab,
                experts: experts.to_vec(),
                training_range: Some((m.lo, m.hi)),
                pool: fit.pool,
                family: Family::Motif {
                    oracle,
                    guide: fit.guide,
                    max_match: m.max_match,
                    holdout_mae: fit.holdout_mae,
                },
            }
        }
    };
    Task::from_artifact(artifact)
}

impl Task {
    pub fn from_artifact(artifact: TaskArtifact) -> Result<Self> {
        let guide = match &artifact.family {
            Family::Toy => None,
            Family::Motif { guide, .. } => Some(Arc::new(guide.clone())),
        };
        let task = Self { artifact, guide };
        for spec in &task.artifact.experts {
            task.expert(spec, &TokenSequence::zeros(task.artifact.length))?;
        }
        if task.artifact.experts.is_empty() {
            return Err(Error::Config(vec!["task needs at least one expert".into()]));
        }
        Ok(task)
    }

    pub fn artifact(&self) -> &TaskArtifact {
        &self.artifact
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.artifact)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn name(&self) -> &str {
        &self.artifact.name
    }

    pub fn length(&self) -> usize {
        self.artifact.length
    }

    pub fn content_size(&self) -> usize {
        self.artifact.content_size
    }

    pub fn vocabulary(&self, separators: usize, bins: usize) -> Result<Vocabulary> {
        Vocabulary::numeric(self.content_size(), separators, bins)
    }

    pub fn training_range(&self) -> Option<(f64, f64)> {
        self.artifact.training_range
    }

    /// In-range sequences the guide was fit on; empty for the toy task.
    pub fn pool(&self) -> &[TokenSequence] {
        &self.artifact.pool
    }

    /// Held-out guide error recorded at fit time.
    pub fn guide_holdout_mae(&self) -> Option<f64> {
        match &self.artifact.family {
            Family::Toy => None,
            Family::Motif { holdout_mae, .. } => Some(*holdout_mae),
        }
    }

    /// The guide alone, without the weighting of the energy model.
    pub fn guide(&self) -> Arc<dyn Expert> {
        match &self.guide {
            Some(g) => g.clone(),
            None => Arc::new(ToyLogReward {
                length: self.artifact.length,
            }),
        }
    }

    fn expert(&self, spec: &ExpertSpec, x0: &TokenSequence) -> Result<Arc<dyn Expert>> {
        Ok(match spec.name.as_str() {
            "guide" => self.guide(),
            "toy-log-reward" => Arc::new(ToyLogReward {
                length: self.artifact.length,
            }),
            "hamming-to-start" => Arc::new(HammingToReference { reference: x0.clone() }),
            other => {
                return Err(Error::Config(vec![format!(
                    "unknown expert `{other}` (expected guide, toy-log-reward or hamming-to-start)"
                )]))
            }
        })
    }

    /// Energy model of a chain started at `x0`; experts referring to the start
    /// state are bound to it.
    pub fn energy_for(&self, x0: &TokenSequence) -> Result<EnergyModel> {
        self.check_state(x0)?;
        let experts = self
            .artifact
            .experts
            .iter()
            .map(|spec| {
                Ok(WeightedExpert {
                    expert: self.expert(spec, x0)?,
                    weight: spec.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EnergyModel::new(experts)
    }

    pub fn check_state(&self, x: &TokenSequence) -> Result<()> {
        if x.len() != self.length() {
            return Err(Error::contract(format!(
                "{} states have length {}, got {}",
                self.name(),
                self.length(),
                x.len()
            )));
        }
        if let Some(&t) = x.tokens().iter().find(|&&t| t as usize >= self.content_size()) {
            return Err(Error::contract(format!("token {t} outside the content vocabulary")));
        }
        Ok(())
    }

    /// Initial state: all zeros for the toy task, an in-range draw otherwise.
    pub fn sample_initial(&self, rng: &mut RngStream) -> Result<TokenSequence> {
        match &self.artifact.family {
            Family::Toy => Ok(TokenSequence::zeros(self.length())),
            Family::Motif { oracle, max_match, .. } => {
                let (lo, hi) = self.training_range().unwrap_or((0.0, oracle.optimum()));
                MotifGenerator {
                    oracle: oracle.clone(),
                    vocab: self.content_size(),
                    lo,
                    hi,
                    max_match: *max_match,
                }
                .draw(rng)
            }
        }
    }

    /// Ground truth; only evaluation code reaches this.
    pub(crate) fn oracle(&self, x: &TokenSequence) -> Result<f64> {
        match &self.artifact.family {
            Family::Toy => toy_score(x, self.length()),
            Family::Motif { oracle, .. } => oracle.score(x),
        }
    }

    pub(crate) fn oracle_optimum(&self) -> f64 {
        match &self.artifact.family {
            Family::Toy => toy_score(&toy_optimum(self.length()), self.length()).unwrap_or(f64::NAN),
            Family::Motif { oracle, .. } => oracle.optimum(),
        }
    }
}

pub(crate) fn toy_optimum(length: usize) -> TokenSequence {
    TokenSequence::new((0..length).map(|i| u32::from(i >= length / 2)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_task_energy_is_the_log_reward() {
        let task = make_guide_oracle_task(
            &TaskConfig::Toy { length: 16 },
            &[ExpertSpec::new("guide", 1.0)],
            &mut RngStream::new(0),
        )
        .unwrap();
        let x = toy_optimum(16);
        let e = task.energy_for(&TokenSequence::zeros(16)).unwrap();
        assert!((e.combined_score(&x).unwrap() - 5.75).abs() < 1e-12);
        assert!((task.oracle(&x).unwrap() - 5.75f64.exp()).abs() < 1e-9);
        assert_eq!(task.sample_initial(&mut RngStream::new(1)).unwrap(), TokenSequence::zeros(16));
    }

    #[test]
    fn unknown_expert_is_a_config_error() {
        let err = make_guide_oracle_task(
            &TaskConfig::Toy { length: 4 },
            &[ExpertSpec::new("fluency", 1.0)],
            &mut RngStream::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn hamming_term_binds_to_the_start_state() {
        let task = make_guide_oracle_task(
            &TaskConfig::Toy { length: 4 },
            &[ExpertSpec::new("guide", 1.0), ExpertSpec::new("hamming-to-start", 0.5)],
            &mut RngStream::new(0),
        )
        .unwrap();
        let x0 = TokenSequence::new(vec![0, 1, 1, 0]);
        let e = task.energy_for(&x0).unwrap();
        let s = e.combined_score(&x0).unwrap();
        assert_eq!(s, crate::energy::toy_log_score(&x0, 4).unwrap());
        let x = TokenSequence::new(vec![1, 1, 1, 1]);
        let d = e.combined_score(&x).unwrap() - crate::energy::toy_log_score(&x, 4).unwrap();
        assert!((d + 1.0).abs() < 1e-12);
    }
}
