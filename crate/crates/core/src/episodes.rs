//! Training episodes cut from Markov chains.
//!
//! Chains are first de-duplicated (consecutive repeats from rejected
//! proposals are dropped). A strategy then picks which of the remaining states
//! follow `x0` in the episode. Every selector returns `None` when the chain
//! yields nothing usable; such chains are discarded from training.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binner::ScoreBinner;
use crate::encoding::{encode_episode, RewardMode};
use crate::error::{Error, Result};
use crate::records::{ChainRecord, Episode};
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Relative improvements divide by `max(|previous score|, EPS)`.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    FirstBest,
    ThinFixed,
    ThinVariable,
    DenergyFixed,
    DenergyVariable,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::FirstBest,
        StrategyKind::ThinFixed,
        StrategyKind::ThinVariable,
        StrategyKind::DenergyFixed,
        StrategyKind::DenergyVariable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FirstBest => "first-best",
            StrategyKind::ThinFixed => "thin-fixed",
            StrategyKind::ThinVariable => "thin-variable",
            StrategyKind::DenergyFixed => "denergy-fixed",
            StrategyKind::DenergyVariable => "denergy-variable",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(vec![format!(
                "unknown strategy `{s}` (expected first-best, thin-fixed, thin-variable, denergy-fixed or denergy-variable)"
            )])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Episode length for the fixed-length kinds.
    pub n: usize,
    /// Thinning factor of `thin-variable`.
    pub k: usize,
    /// Relative-improvement threshold of `denergy-variable`.
    pub theta: f64,
    /// Longest variable-length episode, in revised states.
    pub cap: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::DenergyFixed,
            n: 4,
            k: 2,
            theta: 0.2,
            cap: 10,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.cap == 0 {
            errs.push("strategy cap must be at least 1".into());
        }
        match self.kind {
            StrategyKind::ThinFixed | StrategyKind::DenergyFixed if self.n == 0 => {
                errs.push(format!("{} needs n >= 1", self.kind))
            }
            StrategyKind::ThinFixed | StrategyKind::DenergyFixed if self.n > self.cap => {
                errs.push(format!("{} n = {} exceeds cap {}", self.kind, self.n, self.cap))
            }
            StrategyKind::ThinVariable if self.k == 0 => errs.push("thin-variable needs k >= 1".into()),
            StrategyKind::DenergyVariable if !(self.theta > 0.0) => {
                errs.push(format!("denergy-variable needs theta > 0, got {}", self.theta))
            }
            _ => {}
        }
        errs
    }

    /// Upper bound on revised states per episode.
    pub fn max_revisions(&self) -> usize {
        match self.kind {
            StrategyKind::FirstBest => 1,
            StrategyKind::ThinFixed | StrategyKind::DenergyFixed => self.n,
            StrategyKind::ThinVariable | StrategyKind::DenergyVariable => self.cap,
        }
    }
}

/// Drops consecutive repeats, keeping the first occurrence.
pub fn dedup_chain(c: &ChainRecord) -> ChainRecord {
    let mut out = ChainRecord {
        states: Vec::new(),
        scores: Vec::new(),
        accepted: Vec::new(),
        ..c.clone()
    };
    for (t, x) in c.states.iter().enumerate() {
        if out.states.last() == Some(x) {
            continue;
        }
        if t > 0 {
            out.accepted.push(true);
        }
        out.states.push(x.clone());
        out.scores.push(c.scores[t]);
    }
    out
}

/// `[0, argmax]` with the earliest maximum; `None` if that is `x0`.
pub fn first_best_indices(scores: &[f64]) -> Option<Vec<usize>> {
    let best = scores
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &s)| match acc {
            Some((_, b)) if s <= b => acc,
            _ => Some((i, s)),
        })?
        .0;
    (best > 0).then(|| vec![0, best])
}

/// `round(j * (len - 1) / n)` for `j = 1..=n` (halves round up), collapsed
/// and prefixed by 0.
pub fn thin_fixed_indices(len: usize, n: usize) -> Option<Vec<usize>> {
    if len < 2 || n == 0 {
        return None;
    }
    let mut idx = vec![0];
    for j in 1..=n {
        let i = (2 * j * (len - 1) + n) / (2 * n);
        if *idx.last().unwrap() != i {
            idx.push(i);
        }
    }
    Some(idx)
}

pub fn thin_variable_indices(len: usize, k: usize, cap: usize) -> Option<Vec<usize>> {
    let n = cap.min(len / k.max(1));
    if n == 0 {
        return None;
    }
    thin_fixed_indices(len, n)
}

fn improvements(scores: &[f64]) -> Vec<(usize, f64)> {
    (1..scores.len()).map(|t| (t, scores[t] - scores[t - 1])).collect()
}

/// Destinations of the `n` largest positive improvements (ties to the
/// earliest), in chronological order.
pub fn denergy_fixed_indices(scores: &[f64], n: usize) -> Option<Vec<usize>> {
    let mut gains: Vec<(usize, f64)> = improvements(scores).into_iter().filter(|&(_, d)| d > 0.0).collect();
    if gains.is_empty() || n == 0 {
        return None;
    }
    gains.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    gains.truncate(n);
    let mut idx: Vec<usize> = gains.into_iter().map(|(t, _)| t).collect();
    idx.sort_unstable();
    idx.insert(0, 0);
    Some(idx)
}

/// Destinations whose relative improvement reaches `theta`; above `cap`,
/// the `cap` largest relative improvements are kept.
pub fn denergy_variable_indices(scores: &[f64], theta: f64, cap: usize) -> Option<Vec<usize>> {
    let mut picked: Vec<(usize, f64)> = (1..scores.len())
        .map(|t| (t, (scores[t] - scores[t - 1]) / scores[t - 1].abs().max(EPS)))
        .filter(|&(_, r)| r >= theta)
        .collect();
    if picked.is_empty() || cap == 0 {
        return None;
    }
    if picked.len() > cap {
        picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        picked.truncate(cap);
    }
    let mut idx: Vec<usize> = picked.into_iter().map(|(t, _)| t).collect();
    idx.sort_unstable();
    idx.insert(0, 0);
    Some(idx)
}

/// Indices into the de-duplicated chain chosen by `cfg`.
pub fn select_indices(deduped: &ChainRecord, cfg: &StrategyConfig) -> Option<Vec<usize>> {
    let s = &deduped.scores;
    match cfg.kind {
        StrategyKind::FirstBest => first_best_indices(s),
        StrategyKind::ThinFixed => thin_fixed_indices(s.len(), cfg.n),
        StrategyKind::ThinVariable => thin_variable_indices(s.len(), cfg.k, cfg.cap),
        StrategyKind::DenergyFixed => denergy_fixed_indices(s, cfg.n),
        StrategyKind::DenergyVariable => denergy_variable_indices(s, cfg.theta, cfg.cap),
    }
}

fn episode_at(c: &ChainRecord, idx: &[usize], strategy: StrategyKind) -> Episode {
    Episode {
        v: crate::records::SCHEMA_VERSION,
        strategy: strategy.to_string(),
        states: idx.iter().map(|&i| c.states[i].clone()).collect(),
        scores: idx[1..].iter().map(|&i| c.scores[i]).collect(),
    }
}

/// De-duplicates `c` and applies the strategy.
pub fn select_episode(c: &ChainRecord, cfg: &StrategyConfig) -> Option<Episode> {
    let d = dedup_chain(c);
    select_indices(&d, cfg).map(|idx| episode_at(&d, &idx, cfg.kind))
}

/// Consecutive de-duplicated pairs whose score increased.
pub fn improving_transitions(c: &ChainRecord) -> Vec<(TokenSequence, TokenSequence)> {
    let d = dedup_chain(c);
    (1..d.states.len())
        .filter(|&t| d.scores[t] > d.scores[t - 1])
        .map(|t| (d.states[t - 1].clone(), d.states[t].clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub episodes: Vec<Episode>,
    pub discarded: usize,
}

/// Applies the strategy to every chain in parallel; output follows chain order.
pub fn extract_episodes(chains: &[ChainRecord], cfg: &StrategyConfig) -> Result<Extraction> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let picked: Vec<Option<Episode>> = chains.par_iter().map(|c| select_episode(c, cfg)).collect();
    let discarded = picked.iter().filter(|e| e.is_none()).count();
    Ok(Extraction {
        episodes: picked.into_iter().flatten().collect(),
        discarded,
    })
}

/// Bins spanning every revised-state score of `episodes`.
pub fn fit_binner(episodes: &[Episode], bins: usize) -> Result<ScoreBinner> {
    let scores: Vec<f64> = episodes.iter().flat_map(|e| e.scores.iter().copied()).collect();
    ScoreBinner::fit(&scores, bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub episodes: Vec<Episode>,
    pub encoded: Vec<Vec<TokenId>>,
    pub kept: usize,
    pub discarded: usize,
    pub clamped: usize,
}

pub fn build_training_set(
    chains: &[ChainRecord],
    cfg: &StrategyConfig,
    vocab: &Vocabulary,
    binner: &ScoreBinner,
    mode: RewardMode,
) -> Result<TrainingSet> {
    if chains.is_empty() {
        return Err(Error::contract("no chains to build episodes from"));
    }
    let ex = extract_episodes(chains, cfg)?;
    encode_training_set(ex, vocab, binner, mode)
}

pub fn encode_training_set(
    ex: Extraction,
    vocab: &Vocabulary,
    binner: &ScoreBinner,
    mode: RewardMode,
) -> Result<TrainingSet> {
    if ex.episodes.is_empty() {
        return Err(Error::EmptyTrainingSet {
            discarded: ex.discarded,
        });
    }
    let mut encoded = Vec::with_capacity(ex.episodes.len());
    let mut clamped = 0;
    for ep in &ex.episodes {
        let e = encode_episode(ep, vocab, binner, mode)?;
        clamped += e.clamped;
        encoded.push(e.tokens);
    }
    Ok(TrainingSet {
        kept: ex.episodes.len(),
        discarded: ex.discarded,
        clamped,
        episodes: ex.episodes,
        encoded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::KernelConfig;

    fn chain(states: &[u32], scores: &[f64]) -> ChainRecord {
        ChainRecord {
            v: 1,
            task: "t".into(),
            seed: 0,
            states: states.iter().map(|&s| TokenSequence::new(vec![s])).collect(),
            scores: scores.to_vec(),
            accepted: states.windows(2).map(|w| w[0] != w[1]).collect(),
            proposal: KernelConfig::BlockFlip,
        }
    }

    #[test]
    fn dedup_examples() {
        let c = chain(&[0, 0, 1, 1, 1, 2], &[0.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let d = dedup_chain(&c);
        assert_eq!(d.states, chain(&[0, 1, 2], &[0.0, 1.0, 2.0]).states);
        assert_eq!(d.scores, vec![0.0, 1.0, 2.0]);
        d.validate().unwrap();
        let stuck = dedup_chain(&chain(&[3, 3, 3], &[1.0; 3]));
        assert_eq!(stuck.len(), 1);
    }

    #[test]
    fn first_best_examples() {
        assert_eq!(first_best_indices(&[1.0, 5.0, 3.0]), Some(vec![0, 1]));
        assert_eq!(first_best_indices(&[1.0, 5.0, 5.0]), Some(vec![0, 1]));
        assert_eq!(first_best_indices(&[9.0, 5.0, 5.0]), None);
        assert_eq!(first_best_indices(&[1.0]), None);
    }

    #[test]
    fn thin_examples() {
        assert_eq!(thin_fixed_indices(11, 2), Some(vec![0, 5, 10]));
        assert_eq!(thin_fixed_indices(2, 3), Some(vec![0, 1]));
        assert_eq!(thin_fixed_indices(7, 1), Some(vec![0, 6]));
        assert_eq!(thin_variable_indices(20, 3, 10).unwrap().len(), 7);
        assert_eq!(thin_variable_indices(2, 100, 10), None);
        assert_eq!(thin_variable_indices(100, 3, 10).unwrap().len(), 11);
    }

    #[test]
    fn denergy_examples() {
        assert_eq!(denergy_fixed_indices(&[1.0, 4.0, 2.0, 8.0], 2), Some(vec![0, 1, 3]));
        assert_eq!(denergy_fixed_indices(&[4.0, 3.0, 2.0], 2), None);
        assert_eq!(denergy_fixed_indices(&[1.0, 2.0, 1.0, 3.0], 10), Some(vec![0, 1, 3]));
        assert_eq!(denergy_variable_indices(&[10.0, 12.0, 12.5], 0.1, 10), Some(vec![0, 1]));
        assert_eq!(denergy_variable_indices(&[0.0, 1.0], 0.2, 10), Some(vec![0, 1]));
        assert_eq!(denergy_variable_indices(&[0.0, 0.0], 0.2, 10), None);
    }

    #[test]
    fn first_best_episodes_have_two_states() {
        let c = chain(&[0, 1, 2, 1, 3], &[0.0, 2.0, 1.0, 2.0, 5.0]);
        let cfg = StrategyConfig {
            kind: StrategyKind::FirstBest,
            ..Default::default()
        };
        let ep = select_episode(&c, &cfg).unwrap();
        assert_eq!(ep.states.len(), 2);
        assert_eq!(ep.scores, vec![5.0]);
    }

    #[test]
    fn improving_transitions_skip_rejections() {
        let c = chain(&[0, 0, 1, 1, 2, 3], &[0.0, 0.0, 1.0, 1.0, 0.5, 2.0]);
        let pairs = improving_transitions(&c);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].1, TokenSequence::new(vec![3]));
    }

    #[test]
    fn all_discarded_is_an_empty_training_set() {
        let chains = vec![chain(&[0, 0], &[1.0, 1.0])];
        let vocab = Vocabulary::numeric(4, 4, 4).unwrap();
        let binner = ScoreBinner::from_range(0.0, 1.0, 4).unwrap();
        let err = build_training_set(&chains, &StrategyConfig::default(), &vocab, &binner, RewardMode::None).unwrap_err();
        assert!(matches!(err, Error::EmptyTrainingSet { discarded: 1 }));
    }

    #[test]
    fn invalid_strategy_parameters() {
        let cfg = StrategyConfig {
            kind: StrategyKind::DenergyVariable,
            theta: 0.0,
            ..Default::default()
        };
        assert!(!cfg.validate().is_empty());
        assert!("thin".parse::<StrategyKind>().is_err());
        assert_eq!("thin-fixed".parse::<StrategyKind>().unwrap(), StrategyKind::ThinFixed);
    }
}
