//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use chainex::episodes::{StrategyConfig, StrategyKind};
use chainex::records::{ChainRecord, SCHEMA_VERSION};
use chainex::sampler::KernelConfig;
use chainex::vocab::TokenSequence;
use rand::Rng;

/// Reward exponent of the binary toy problem, written out from its definition.
pub fn toy_exponent(bits: &[u32]) -> f64 {
    let l = bits.len();
    bits.iter()
        .enumerate()
        .map(|(i, &b)| {
            let r = i as f64 * b as f64 / l as f64;
            if i < l / 2 {
                -r
            } else {
                r
            }
        })
        .sum()
}

/// Chain with a few repeated states and coarse, often tied, scores.
pub fn random_chain(rng: &mut impl Rng) -> ChainRecord {
    let len = rng.gen_range(1..40);
    let mut states = vec![TokenSequence::new(vec![rng.gen_range(0..4), rng.gen_range(0..4)])];
    let mut scores = vec![f64::from(rng.gen_range(-6..6)) / 2.0];
    let mut accepted = Vec::new();
    for _ in 1..len {
        if rng.gen_bool(0.3) {
            states.push(states.last().unwrap().clone());
            scores.push(*scores.last().unwrap());
            accepted.push(false);
        } else {
            states.push(TokenSequence::new(vec![rng.gen_range(0..4), rng.gen_range(0..4)]));
            scores.push(f64::from(rng.gen_range(-6..6)) / 2.0);
            accepted.push(true);
        }
    }
    ChainRecord {
        v: SCHEMA_VERSION,
        task: "synthetic".into(),
        seed: 0,
        states,
        scores,
        accepted,
        proposal: KernelConfig::BlockFlip,
    }
}

pub fn random_strategy(rng: &mut impl Rng) -> StrategyConfig {
    StrategyConfig {
        kind: StrategyKind::ALL[rng.gen_range(0..5)],
        n: rng.gen_range(1..7),
        k: rng.gen_range(1..5),
        theta: [0.0, 0.1, 0.5, 1.0][rng.gen_range(0..4)],
        cap: rng.gen_range(1..8),
    }
}

/// (states, scores) with consecutive repeats removed.
pub fn dedup(c: &ChainRecord) -> (Vec<TokenSequence>, Vec<f64>) {
    let mut states: Vec<TokenSequence> = Vec::new();
    let mut scores = Vec::new();
    for (x, &s) in c.states.iter().zip(&c.scores) {
        if states.last() != Some(x) {
            states.push(x.clone());
            scores.push(s);
        }
    }
    (states, scores)
}

fn thin_formula(len: usize, n: usize) -> Vec<usize> {
    let mut idx = vec![0];
    for j in 1..=n {
        let i = (j as f64 * (len - 1) as f64 / n as f64 + 0.5).floor() as usize;
        if !idx.contains(&i) {
            idx.push(i);
        }
    }
    idx
}

/// Keeps candidates whose rank (value descending, then index ascending) is
/// below `keep`, by counting those that beat each candidate.
fn rank_select(cands: &[(usize, f64)], keep: usize) -> Vec<usize> {
    cands
        .iter()
        .filter(|&&(t, v)| {
            cands
                .iter()
                .filter(|&&(u, w)| w > v || (w == v && u < t))
                .count()
                < keep
        })
        .map(|&(t, _)| t)
        .collect()
}

/// Selected indices into the de-duplicated chain.
pub fn reference_indices(scores: &[f64], cfg: &StrategyConfig) -> Option<Vec<usize>> {
    let len = scores.len();
    let with_origin = |mut v: Vec<usize>| {
        v.insert(0, 0);
        v
    };
    match cfg.kind {
        StrategyKind::FirstBest => {
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let best = scores.iter().position(|&s| s == max)?;
            (best > 0).then(|| vec![0, best])
        }
        StrategyKind::ThinFixed => (len >= 2).then(|| thin_formula(len, cfg.n)),
        StrategyKind::ThinVariable => {
            let n = (len / cfg.k).min(cfg.cap);
            (len >= 2 && n > 0).then(|| thin_formula(len, n))
        }
        StrategyKind::DenergyFixed => {
            let gains: Vec<(usize, f64)> = (1..len)
                .map(|t| (t, scores[t] - scores[t - 1]))
                .filter(|&(_, d)| d > 0.0)
                .collect();
            (!gains.is_empty()).then(|| with_origin(rank_select(&gains, cfg.n)))
        }
        StrategyKind::DenergyVariable => {
            let rel: Vec<(usize, f64)> = (1..len)
                .map(|t| (t, (scores[t] - scores[t - 1]) / scores[t - 1].abs().max(1e-9)))
                .filter(|&(_, r)| r >= cfg.theta)
                .collect();
            (!rel.is_empty()).then(|| with_origin(rank_select(&rel, cfg.cap)))
        }
    }
}
