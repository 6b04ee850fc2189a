//! Iterative refinement with a trained extrapolator.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::RewardMode;
use crate::energy::{EnergyModel, Task};
use crate::error::{Error, Result};
use crate::model::{ar_next_state, mlp_step, Boundary, DecodeConfig, ExtrapolatorCheckpoint};
use crate::rng::{derive_seed, RngStream};
use crate::vocab::{TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    StopToken,
    MaxStates,
    Runaway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub initial: TokenSequence,
    /// Revised states `x1..xn`.
    pub states: Vec<TokenSequence>,
    /// Guide score (real mode, MLP), bin midpoint (predicted mode) or none.
    pub scores: Vec<Option<f64>>,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

impl Rollout {
    /// The sample: the last revised state, or `x0` when nothing was revised.
    pub fn output(&self) -> &TokenSequence {
        self.states.last().unwrap_or(&self.initial)
    }
}

/// Per-state token budget before a generation is declared runaway.
pub fn runaway_budget(ckpt: &ExtrapolatorCheckpoint) -> usize {
    4 * ckpt.longest_episode.max(1)
}

/// Autoregressive rollout from `x0`. `energy` supplies real-mode scores and
/// must be given exactly when the checkpoint was trained in real mode.
pub fn rollout_ar(
    ckpt: &ExtrapolatorCheckpoint,
    x0: &TokenSequence,
    max_states: usize,
    energy: Option<&EnergyModel>,
    decode: &DecodeConfig,
    rng: &mut RngStream,
) -> Result<Rollout> {
    let model = ckpt.ar()?;
    let vocab = &ckpt.vocab;
    let mode = ckpt.reward_mode;
    if max_states == 0 {
        return Err(Error::contract("max_states must be at least 1"));
    }
    if (mode == RewardMode::Real) != energy.is_some() {
        return Err(Error::contract("a guide is required in real mode and only there"));
    }
    if let Some(&t) = x0.tokens().iter().find(|&&t| !vocab.is_content(t)) {
        return Err(Error::contract(format!("initial token {t} is not a content token")));
    }
    let binner = ckpt.binner.as_ref();
    let bin_token = |s: f64| -> Result<TokenId> {
        let b = binner.ok_or_else(|| Error::contract("scored checkpoint without binner"))?.bin(s).0;
        vocab.score_bin(b).ok_or_else(|| Error::contract("bin outside vocabulary"))
    };
    let bin_range = vocab
        .score_bin(0)
        .map(|first| first as usize..first as usize + vocab.bins());
    let budget = runaway_budget(ckpt);

    let mut session = model.session();
    session.push_all(x0.tokens())?;
    session.push(vocab.separator(0).ok_or_else(|| Error::contract("vocabulary has no separators"))?)?;
    let mut rollout = Rollout {
        initial: x0.clone(),
        states: Vec::new(),
        scores: Vec::new(),
        iterations: 0,
        stop_reason: StopReason::MaxStates,
    };
    loop {
        let next = match ar_next_state(&mut session, vocab, decode, budget, rng) {
            Ok(n) => n,
            Err(Error::Runaway { .. }) => {
                rollout.stop_reason = StopReason::Runaway;
                break;
            }
            Err(e) => return Err(e),
        };
        if next.is_stop() {
            rollout.stop_reason = StopReason::StopToken;
            break;
        }
        let state = TokenSequence::new(next.tokens);
        let real = || -> Result<f64> { energy.expect("checked above").combined_score(&state) };
        let score = match (mode, next.boundary) {
            (RewardMode::None, _) => None,
            (RewardMode::Real, Boundary::Separator(_)) => {
                let s = real()?;
                if session.remaining() == 0 {
                    rollout.stop_reason = StopReason::Runaway;
                    rollout.states.push(state);
                    rollout.scores.push(Some(s));
                    break;
                }
                session.push(bin_token(s)?)?;
                Some(s)
            }
            (RewardMode::Real, _) => Some(real()?),
            (RewardMode::Predicted, Boundary::Separator(_)) => {
                if session.remaining() == 0 {
                    rollout.stop_reason = StopReason::Runaway;
                    rollout.states.push(state);
                    rollout.scores.push(None);
                    break;
                }
                let logits = session.logits().expect("prefix is non-empty").clone();
                let range = bin_range.clone().ok_or_else(|| Error::contract("predicted mode needs score bins"))?;
                let t = crate::model::sample_token(&logits, Some(range.clone()), decode, rng);
                session.push(t)?;
                binner.map(|b| b.midpoint(t as usize - range.start))
            }
            (RewardMode::Predicted, Boundary::ScoreBin(b)) => binner.map(|bn| bn.midpoint(b)),
            (RewardMode::Predicted, _) => None,
        };
        rollout.states.push(state);
        rollout.scores.push(score);
        if !matches!(next.boundary, Boundary::Separator(_)) {
            rollout.stop_reason = StopReason::StopToken;
            break;
        }
        if rollout.states.len() >= max_states {
            rollout.stop_reason = StopReason::MaxStates;
            break;
        }
    }
    rollout.iterations = rollout.states.len();
    Ok(rollout)
}

/// Applies the MLP `steps` times; scores come from `energy` when given.
pub fn rollout_mlp(
    ckpt: &ExtrapolatorCheckpoint,
    x0: &TokenSequence,
    steps: usize,
    energy: Option<&EnergyModel>,
) -> Result<Rollout> {
    if steps == 0 {
        return Err(Error::contract("rollout needs at least one step"));
    }
    let mut states = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        x = mlp_step(ckpt, &x)?;
        states.push(x.clone());
    }
    let scores = states
        .iter()
        .map(|s| energy.map(|e| e.combined_score(s)).transpose())
        .collect::<Result<_>>()?;
    Ok(Rollout {
        initial: x0.clone(),
        iterations: states.len(),
        states,
        scores,
        stop_reason: StopReason::MaxStates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub max_states: usize,
    /// MLP checkpoints only.
    pub steps: usize,
    pub decode: DecodeConfig,
}

fn input_seed(seed: u64, x: &TokenSequence, occurrence: u64) -> u64 {
    let h = x
        .tokens()
        .iter()
        .fold(derive_seed(seed, x.len() as u64), |acc, &t| derive_seed(acc, u64::from(t)));
    derive_seed(h, occurrence)
}

/// Independent rollouts for every input. Each input's stream is derived from
/// its tokens and its occurrence index among equal inputs, so permuting the
/// inputs permutes the outputs. Failures are returned per input.
pub fn batch_generate(
    ckpt: &ExtrapolatorCheckpoint,
    inputs: &[TokenSequence],
    task: Option<&Task>,
    cfg: &GenerateConfig,
    seed: u64,
) -> Result<Vec<Result<Rollout>>> {
    if inputs.is_empty() {
        return Err(Error::contract("batch_generate needs at least one input"));
    }
    let mut seen: HashMap<&TokenSequence, u64> = HashMap::new();
    let seeds: Vec<u64> = inputs
        .iter()
        .map(|x| {
            let occ = seen.entry(x).or_insert(0);
            *occ += 1;
            input_seed(seed, x, *occ - 1)
        })
        .collect();
    let needs_energy = ckpt.reward_mode == RewardMode::Real || matches!(ckpt.model, crate::model::ModelParams::Mlp(_));
    Ok(inputs
        .par_iter()
        .zip(seeds)
        .map(|(x0, s)| {
            let energy = match (needs_energy, task) {
                (true, Some(t)) => Some(t.energy_for(x0)?),
                (true, None) if ckpt.reward_mode == RewardMode::Real => {
                    return Err(Error::contract("real-mode generation needs the task guide"))
                }
                _ => None,
            };
            match ckpt.model {
                crate::model::ModelParams::Mlp(_) => rollout_mlp(ckpt, x0, cfg.steps, energy.as_ref()),
                crate::model::ModelParams::Ar(_) => {
                    rollout_ar(ckpt, x0, cfg.max_states, energy.as_ref(), &cfg.decode, &mut RngStream::new(s))
                }
            }
        })
        .collect())
}
