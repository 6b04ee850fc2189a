//! Ablation drivers. Each one shares the task and chains of a seed across its
//! variants so that only the ablated factor changes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoding::RewardMode;
use crate::energy::Task;
use crate::episodes::StrategyKind;
use crate::error::{Error, Result};
use crate::eval::metrics::{self, Evaluator, MetricsReport};
use crate::inference::Rollout;
use crate::model::ExtrapolatorCheckpoint;
use crate::pipeline::{self, build_task, draw_inputs, episodes_from_chains, generate, sample_chains, train_from_episodes};
use crate::records::ChainRecord;
use crate::rng::RngStream;
use crate::sampler::run_epochs;
use crate::vocab::TokenSequence;

/// Task, inputs and chains of one seed.
pub struct Prepared {
    pub task: Task,
    pub inputs: Vec<TokenSequence>,
    pub chains: Vec<ChainRecord>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let task = build_task(cfg)?;
    let (starts, inputs) = draw_inputs(cfg, &task)?;
    let chains = sample_chains(cfg, &task, &starts)?;
    Ok(Prepared { task, inputs, chains })
}

/// One ablation variant evaluated on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub setting: String,
    pub report: MetricsReport,
    /// Chains that yielded no episode.
    pub discarded: usize,
    /// Predicted-mode only: fraction of emitted bins equal to the guide's bin.
    pub bin_agreement: Option<f64>,
}

pub struct Trained {
    pub checkpoint: ExtrapolatorCheckpoint,
    pub rollouts: Vec<Result<Rollout>>,
    pub discarded: usize,
}

/// Trains on `chains` with `cfg` and generates from the prepared inputs.
pub fn train_and_generate(cfg: &RunConfig, p: &Prepared, chains: &[ChainRecord]) -> Result<Trained> {
    let ex = episodes_from_chains(cfg, chains)?;
    let discarded = ex.discarded;
    let checkpoint = train_from_episodes(cfg, &p.task, ex)?;
    let rollouts = generate(cfg, &p.task, &checkpoint, &p.inputs)?;
    Ok(Trained {
        checkpoint,
        rollouts,
        discarded,
    })
}

fn row(ablation: &str, setting: String, cfg: &RunConfig, p: &Prepared, t: &Trained) -> Result<AblationRow> {
    let report =
        Evaluator::new(&p.task).report_rollouts(&format!("{ablation}={setting}"), cfg.seed, &t.rollouts, &cfg.eval.thresholds);
    Ok(AblationRow {
        ablation: ablation.into(),
        setting,
        report,
        discarded: t.discarded,
        bin_agreement: bin_agreement(&p.task, &t.checkpoint, &t.rollouts)?,
    })
}

/// How often predicted bins match the bin of the guide score of the state.
pub fn bin_agreement(task: &Task, ckpt: &ExtrapolatorCheckpoint, rollouts: &[Result<Rollout>]) -> Result<Option<f64>> {
    if ckpt.reward_mode != RewardMode::Predicted {
        return Ok(None);
    }
    let binner = ckpt.binner.as_ref().ok_or_else(|| Error::contract("scored checkpoint without binner"))?;
    let (mut hit, mut total) = (0usize, 0usize);
    for r in rollouts.iter().flatten() {
        let energy = task.energy_for(&r.initial)?;
        for (x, s) in r.states.iter().zip(&r.scores) {
            let (Some(s), true) = (s, task.check_state(x).is_ok()) else {
                continue;
            };
            total += 1;
            hit += usize::from(binner.bin(*s).0 == binner.bin(energy.combined_score(x)?).0);
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

fn for_seeds<T>(cfg: &RunConfig, seeds: &[u64], mut f: impl FnMut(&RunConfig, &Prepared) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for &s in seeds {
        let c = cfg.with_seed(s);
        let p = prepare(&c)?;
        out.extend(f(&c, &p)?);
    }
    Ok(out)
}

/// Seeds to ablate over: the configured list, or the run seed alone.
pub fn seeds_of(cfg: &RunConfig) -> Vec<u64> {
    if cfg.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.seeds.clone()
    }
}

pub fn ablate_reward_mode(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    for_seeds(cfg, seeds, |c, p| {
        RewardMode::ALL
            .into_iter()
            .map(|mode| {
                let mut v = c.clone();
                v.model.reward_mode = mode;
                let t = train_and_generate(&v, p, &p.chains)?;
                row("reward-mode", mode.to_string(), &v, p, &t)
            })
            .collect()
    })
}

/// Fixed episode lengths; length 2 is first/best, longer ones use the
/// configured fixed-length strategy with `n = length - 1`.
pub fn ablate_episode_length(cfg: &RunConfig, lengths: &[usize], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if lengths.iter().any(|&l| l < 2) {
        return Err(Error::Config(vec!["episode lengths must be at least 2".into()]));
    }
    let fixed = match cfg.strategy.kind {
        StrategyKind::ThinFixed => StrategyKind::ThinFixed,
        _ => StrategyKind::DenergyFixed,
    };
    for_seeds(cfg, seeds, |c, p| {
        lengths
            .iter()
            .map(|&len| {
                let mut v = c.clone();
                if len == 2 {
                    v.strategy.kind = StrategyKind::FirstBest;
                } else {
                    v.strategy.kind = fixed;
                    v.strategy.n = len - 1;
                }
                let t = train_and_generate(&v, p, &p.chains)?;
                row("episode-length", len.to_string(), &v, p, &t)
            })
            .collect()
    })
}

/// Keeps the first `round(fraction * len)` states of every chain.
pub fn truncate_chains(chains: &[ChainRecord], fraction: f64) -> Vec<ChainRecord> {
    chains
        .iter()
        .map(|c| {
            if fraction >= 1.0 {
                c.clone()
            } else {
                c.truncated((fraction * c.len() as f64).round() as usize)
            }
        })
        .collect()
}

pub fn ablate_chain_truncation(cfg: &RunConfig, fractions: &[f64], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(vec!["truncation fractions must lie in (0, 1]".into()]));
    }
    for_seeds(cfg, seeds, |c, p| {
        fractions
            .iter()
            .map(|&f| {
                let chains = truncate_chains(&p.chains, f);
                let t = train_and_generate(c, p, &chains)?;
                row("chain-length", format!("{f}"), c, p, &t)
            })
            .collect()
    })
}

/// Best oracle score so far of continued MCMC, per epoch, against q_θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationCurve {
    pub seed: u64,
    /// Mean over inputs of the best oracle score after `e` epochs; entry 0
    /// is the inputs' own score.
    pub mcmc_best: Vec<f64>,
    /// Mean over inputs of the best oracle score along the q_θ rollout.
    pub model_best: f64,
    pub model_iterations: f64,
}

pub fn compare_mcmc_continuation(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<ContinuationCurve>> {
    for_seeds(cfg, seeds, |c, p| {
        let t = train_and_generate(c, p, &p.chains)?;
        Ok(vec![continuation_curve(c, p, &t.rollouts)?])
    })
}

pub fn continuation_curve(cfg: &RunConfig, p: &Prepared, rollouts: &[Result<Rollout>]) -> Result<ContinuationCurve> {
    use rayon::prelude::*;
    let ev = Evaluator::new(&p.task);
    let epochs = cfg.eval.continuation_epochs;
    let len = p.task.length();
    let base = RngStream::new(cfg.seed).child(7);
    let curves: Vec<Vec<f64>> = p
        .inputs
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let chain = run_epochs(&p.task, x0, epochs.max(1), &cfg.sampler, &mut base.child(i as u64))?;
            let mut best = f64::NEG_INFINITY;
            let mut curve = Vec::with_capacity(epochs + 1);
            for (t, x) in chain.states.iter().enumerate() {
                best = best.max(ev.oracle(x).unwrap_or(f64::NEG_INFINITY));
                if t % len == 0 && curve.len() <= epochs {
                    curve.push(best);
                }
            }
            Ok(curve)
        })
        .collect::<Result<_>>()?;
    let n = curves.len() as f64;
    let mcmc_best = (0..=epochs).map(|e| curves.iter().map(|c| c[e]).sum::<f64>() / n).collect();
    let ok: Vec<&Rollout> = rollouts.iter().filter_map(|r| r.as_ref().ok()).collect();
    let model_best = rollouts
        .iter()
        .map(|r| match r {
            Ok(r) => r
                .states
                .iter()
                .filter_map(|x| ev.oracle(x))
                .fold(f64::NEG_INFINITY, f64::max),
            Err(_) => f64::NEG_INFINITY,
        })
        .sum::<f64>()
        / rollouts.len().max(1) as f64;
    let model_iterations = ok.iter().map(|r| r.iterations as f64).sum::<f64>() / ok.len().max(1) as f64;
    Ok(ContinuationCurve {
        seed: cfg.seed,
        mcmc_best,
        model_best,
        model_iterations,
    })
}

/// Metrics of the final state of `epochs`-epoch MCMC from every input.
pub fn mcmc_baseline_report(cfg: &RunConfig, p: &Prepared, epochs: usize) -> Result<MetricsReport> {
    let outs = pipeline::mcmc_baseline(cfg, &p.task, &p.inputs, epochs)?;
    let its = vec![epochs * p.task.length(); outs.len()];
    Ok(Evaluator::new(&p.task).report(&format!("mcmc-{epochs}ep"), cfg.seed, &outs, &its, 0, &cfg.eval.thresholds))
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("ablation,setting,discarded,bin_agreement,{}\n", metrics::CSV_HEADER);
    for r in rows {
        let agree = r.bin_agreement.map_or(String::new(), |a| format!("{a:.4}"));
        let _ = writeln!(s, "{},{},{},{},{}", r.ablation, r.setting, r.discarded, agree, r.report.csv_row());
    }
    s
}

pub fn rows_to_text(rows: &[AblationRow]) -> String {
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.report.clone()).collect();
    let mut s = metrics::to_text(&reports);
    for r in rows.iter().filter(|r| r.discarded > 0 || r.bin_agreement.is_some()) {
        let _ = write!(s, "{}: {} chains discarded", r.report.label, r.discarded);
        if let Some(a) = r.bin_agreement {
            let _ = write!(s, ", bin agreement {a:.3}");
        }
        s.push('\n');
    }
    s
}

pub fn curves_to_csv(curves: &[ContinuationCurve]) -> String {
    let mut s = String::from("seed,source,epoch,best_oracle\n");
    for c in curves {
        for (e, v) in c.mcmc_best.iter().enumerate() {
            let _ = writeln!(s, "{},mcmc,{e},{v:.6}", c.seed);
        }
        let _ = writeln!(s, "{},q_theta,{:.3},{:.6}", c.seed, c.model_iterations, c.model_best);
    }
    s
}

pub fn curves_to_text(curves: &[ContinuationCurve]) -> String {
    let mut s = String::new();
    for c in curves {
        let mcmc: Vec<String> = c.mcmc_best.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(
            s,
            "seed {}: mcmc best by epoch [{}]; q_theta {:.2} after {:.1} iterations",
            c.seed,
            mcmc.join(", "),
            c.model_best,
            c.model_iterations
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_a_rounded_prefix() {
        let c = ChainRecord {
            v: crate::records::SCHEMA_VERSION,
            task: "t".into(),
            seed: 0,
            states: (0..9).map(|i| TokenSequence::new(vec![i])).collect(),
            scores: (0..9).map(f64::from).collect(),
            accepted: vec![true; 8],
            proposal: crate::sampler::KernelConfig::BlockFlip,
        };
        assert_eq!(truncate_chains(std::slice::from_ref(&c), 0.25)[0].len(), 2);
        assert_eq!(truncate_chains(std::slice::from_ref(&c), 1.0)[0], c);
        assert_eq!(truncate_chains(std::slice::from_ref(&c), 0.01)[0].len(), 1);
    }
}
