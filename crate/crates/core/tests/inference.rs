use std::sync::OnceLock;

use chainex::config::{ModelKind, RunConfig};
use chainex::encoding::RewardMode;
use chainex::energy::TaskConfig;
use chainex::episodes::StrategyKind;
use chainex::error::Error;
use chainex::inference::{batch_generate, rollout_ar, rollout_mlp, GenerateConfig, Rollout, StopReason};
use chainex::model::{ArSettings, DecodeConfig, ExtrapolatorCheckpoint};
use chainex::model::ar::ArTrainConfig;
use chainex::pipeline::{run_all, RunOutput};
use chainex::rng::RngStream;
use chainex::vocab::TokenSequence;

fn small_ar(mode: RewardMode) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.task = TaskConfig::Toy { length: 8 };
    cfg.sampler.steps = 120;
    cfg.chains.count = 60;
    cfg.strategy.kind = StrategyKind::DenergyFixed;
    cfg.strategy.n = 3;
    cfg.model.kind = ModelKind::Ar;
    cfg.model.reward_mode = mode;
    cfg.model.bins = 8;
    cfg.model.ar = ArSettings {
        d_model: 16,
        heads: 2,
        ff: 32,
        layers: 1,
        context_slack: 8,
        train: ArTrainConfig {
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            init_scale: 1.0,
        },
    };
    cfg.eval.inputs = 4;
    cfg
}

fn trained(mode: RewardMode) -> &'static RunOutput {
    static NONE: OnceLock<RunOutput> = OnceLock::new();
    static REAL: OnceLock<RunOutput> = OnceLock::new();
    static PRED: OnceLock<RunOutput> = OnceLock::new();
    let cell = match mode {
        RewardMode::None => &NONE,
        RewardMode::Real => &REAL,
        RewardMode::Predicted => &PRED,
    };
    cell.get_or_init(|| run_all(&small_ar(mode)).expect("small run"))
}

fn inputs() -> Vec<TokenSequence> {
    (0..6u32)
        .map(|m| TokenSequence::new((0..8).map(|i| (m >> (i % 3)) & 1).collect()))
        .collect()
}

/// Unwraps a rollout, passing over one the guide refused to score.
fn scored_or_rejected(r: chainex::error::Result<Rollout>) -> Option<Rollout> {
    match r {
        Ok(r) => Some(r),
        Err(Error::Expert { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

fn gen_cfg(max_states: usize) -> GenerateConfig {
    GenerateConfig {
        max_states,
        steps: 5,
        decode: DecodeConfig::default(),
    }
}

#[test]
fn real_mode_scores_are_the_guide_scores_of_the_states() {
    let out = trained(RewardMode::Real);
    let ckpt = &out.checkpoint;
    let binner = ckpt.binner.as_ref().unwrap();
    let mut scored = 0;
    // every training chain starts from zeros
    let x0 = TokenSequence::zeros(8);
    let energy = out.task.energy_for(&x0).unwrap();
    for seed in 0..16 {
        let r = rollout_ar(ckpt, &x0, 4, Some(&energy), &DecodeConfig::default(), &mut RngStream::new(seed));
        // a malformed state cannot be scored, which fails the whole rollout
        let Some(r) = scored_or_rejected(r) else { continue };
        scored += 1;
        for (x, s) in r.states.iter().zip(&r.scores) {
            if let Ok(expect) = energy.combined_score(x) {
                assert_eq!(*s, Some(expect));
                assert_eq!(binner.bin(s.unwrap()), binner.bin(expect));
            }
        }
    }
    assert!(scored > 0);
}

#[test]
fn real_mode_requires_the_guide() {
    let out = trained(RewardMode::Real);
    let x0 = TokenSequence::zeros(8);
    let r = rollout_ar(&out.checkpoint, &x0, 3, None, &DecodeConfig::default(), &mut RngStream::new(0));
    assert!(r.is_err());
}

#[test]
fn max_states_one_yields_at_most_one_revision() {
    for mode in RewardMode::ALL {
        let out = trained(mode);
        let rs = batch_generate(&out.checkpoint, &inputs(), Some(&out.task), &gen_cfg(1), 3).unwrap();
        for r in rs {
            let Some(r) = scored_or_rejected(r) else { continue };
            assert!(r.iterations <= 1, "{mode}: {}", r.iterations);
            assert_eq!(r.iterations, r.states.len());
        }
    }
}

#[test]
fn none_mode_has_no_score_tokens() {
    let out = trained(RewardMode::None);
    assert_eq!(out.checkpoint.vocab.bins(), 0);
    let rs = batch_generate(&out.checkpoint, &inputs(), Some(&out.task), &gen_cfg(6), 4).unwrap();
    for r in rs {
        assert!(r.unwrap().scores.iter().all(Option::is_none));
    }
}

#[test]
fn predicted_mode_scores_are_bin_midpoints() {
    let out = trained(RewardMode::Predicted);
    let binner = out.checkpoint.binner.as_ref().unwrap();
    let mids: Vec<f64> = (0..binner.bins()).map(|b| binner.midpoint(b)).collect();
    let rs = batch_generate(&out.checkpoint, &inputs(), Some(&out.task), &gen_cfg(6), 5).unwrap();
    for r in rs {
        for s in r.unwrap().scores.into_iter().flatten() {
            assert!(mids.contains(&s), "{s}");
        }
    }
}

#[test]
fn same_seed_same_rollouts() {
    let out = trained(RewardMode::Predicted);
    let a = batch_generate(&out.checkpoint, &inputs(), Some(&out.task), &gen_cfg(6), 9).unwrap();
    let b = batch_generate(&out.checkpoint, &inputs(), Some(&out.task), &gen_cfg(6), 9).unwrap();
    let a: Vec<_> = a.into_iter().map(Result::unwrap).collect();
    let b: Vec<_> = b.into_iter().map(Result::unwrap).collect();
    assert_eq!(a, b);
}

#[test]
fn permuting_inputs_permutes_outputs() {
    let out = trained(RewardMode::Predicted);
    let mut xs = inputs();
    xs.push(xs[0].clone());
    let fwd: Vec<_> = batch_generate(&out.checkpoint, &xs, Some(&out.task), &gen_cfg(6), 2)
        .unwrap()
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let perm: Vec<usize> = (0..xs.len()).rev().collect();
    let shuffled: Vec<TokenSequence> = perm.iter().map(|&i| xs[i].clone()).collect();
    let back: Vec<_> = batch_generate(&out.checkpoint, &shuffled, Some(&out.task), &gen_cfg(6), 2)
        .unwrap()
        .into_iter()
        .map(Result::unwrap)
        .collect();
    // equal inputs are matched by occurrence order, not position
    for (j, &i) in perm.iter().enumerate() {
        if i == 0 || i == xs.len() - 1 {
            continue;
        }
        assert_eq!(back[j], fwd[i]);
    }
    assert_eq!(back[0], fwd[0]);
    assert_eq!(back[xs.len() - 1], fwd[xs.len() - 1]);
}

#[test]
fn empty_batch_is_rejected_and_failures_stay_per_input() {
    let out = trained(RewardMode::Predicted);
    assert!(batch_generate(&out.checkpoint, &[], Some(&out.task), &gen_cfg(3), 0).is_err());
    let mut xs = inputs();
    xs.insert(1, TokenSequence::new(vec![0, 7, 0, 0, 0, 0, 0, 0]));
    let rs = batch_generate(&out.checkpoint, &xs, Some(&out.task), &gen_cfg(3), 0).unwrap();
    assert!(rs[1].is_err());
    assert!(rs.iter().enumerate().all(|(i, r)| i == 1 || r.is_ok()));
}

fn toy_mlp() -> &'static ExtrapolatorCheckpoint {
    static CKPT: OnceLock<ExtrapolatorCheckpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let mut cfg = RunConfig::toy();
        cfg.sampler.steps = 3000;
        run_all(&cfg).unwrap().checkpoint
    })
}

#[test]
fn mlp_rollout_reaches_a_fixed_point_and_stays() {
    let ckpt = toy_mlp();
    let r = rollout_mlp(ckpt, &TokenSequence::zeros(16), 8, None).unwrap();
    assert_eq!(r.iterations, 8);
    assert_eq!(r.stop_reason, StopReason::MaxStates);
    for t in 1..r.states.len() {
        if r.states[t] == r.states[t - 1] {
            assert!(r.states[t..].iter().all(|s| s == &r.states[t]));
            break;
        }
    }
}

#[test]
fn mlp_rollout_needs_a_step() {
    assert!(rollout_mlp(toy_mlp(), &TokenSequence::zeros(16), 0, None).is_err());
}
