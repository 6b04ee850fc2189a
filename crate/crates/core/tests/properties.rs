mod common;

use chainex::binner::ScoreBinner;
use chainex::encoding::{decode_episode, encode_episode, RewardMode};
use chainex::episodes::{dedup_chain, select_episode, select_indices, StrategyConfig, StrategyKind};
use chainex::eval::{diversity, threshold_fractions, Direction};
use chainex::records::{ChainRecord, Episode, SCHEMA_VERSION};
use chainex::sampler::{acceptance_probability, KernelConfig};
use chainex::vocab::{TokenSequence, Vocabulary};
use proptest::prelude::*;

fn chain() -> impl Strategy<Value = ChainRecord> {
    (1usize..30, any::<u64>()).prop_map(|(len, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut states = vec![TokenSequence::new(vec![rng.gen_range(0..3), rng.gen_range(0..3)])];
        let mut scores = vec![rng.gen_range(-3.0..3.0)];
        for _ in 1..len {
            if rng.gen_bool(0.3) {
                states.push(states.last().unwrap().clone());
                scores.push(*scores.last().unwrap());
            } else {
                states.push(TokenSequence::new(vec![rng.gen_range(0..3), rng.gen_range(0..3)]));
                scores.push(rng.gen_range(-3.0..3.0));
            }
        }
        ChainRecord {
            v: SCHEMA_VERSION,
            task: "p".into(),
            seed,
            accepted: vec![true; len - 1],
            states,
            scores,
            proposal: KernelConfig::BlockFlip,
        }
    })
}

fn strategy() -> impl Strategy<Value = StrategyConfig> {
    (0usize..5, 1usize..6, 1usize..4, 0.0f64..1.0, 1usize..8).prop_map(|(kind, n, k, theta, cap)| StrategyConfig {
        kind: StrategyKind::ALL[kind],
        n,
        k,
        theta,
        cap,
    })
}

proptest! {
    #[test]
    fn acceptance_is_a_probability(a in -50.0f64..50.0, b in -50.0f64..50.0, f in -5.0f64..5.0, r in -5.0f64..5.0, t in 0.1f64..10.0) {
        let p = acceptance_probability(a, b, f, r, t);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn episodes_start_at_x0_and_respect_the_cap(c in chain(), cfg in strategy()) {
        let d = dedup_chain(&c);
        prop_assert!(d.states.windows(2).all(|w| w[0] != w[1]));
        if let Some(ep) = select_episode(&c, &cfg) {
            prop_assert_eq!(&ep.states[0], &c.states[0]);
            prop_assert!(ep.revisions() <= cfg.max_revisions());
            prop_assert!(ep.validate().is_ok());
            let idx = select_indices(&d, &cfg).unwrap();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            if cfg.kind == StrategyKind::FirstBest {
                prop_assert_eq!(ep.states.len(), 2);
            }
        }
    }

    #[test]
    fn selection_matches_the_reference(c in chain(), cfg in strategy()) {
        let d = dedup_chain(&c);
        let (_, scores) = common::dedup(&c);
        prop_assert_eq!(select_indices(&d, &cfg), common::reference_indices(&scores, &cfg));
    }

    #[test]
    fn encoding_round_trips(
        states in prop::collection::vec(prop::collection::vec(0u32..3, 4), 2..6),
        raw in prop::collection::vec(0.0f64..10.0, 5),
        scored in any::<bool>(),
    ) {
        let n = states.len() - 1;
        let ep = Episode::new("p", states.into_iter().map(TokenSequence::new).collect(), raw[..n].to_vec()).unwrap();
        let mode = if scored { RewardMode::Predicted } else { RewardMode::None };
        let bins = if scored { 5 } else { 0 };
        let vocab = Vocabulary::numeric(3, 6, bins).unwrap();
        let binner = ScoreBinner::from_range(0.0, 10.0, 5).unwrap();
        let enc = encode_episode(&ep, &vocab, &binner, mode).unwrap();
        prop_assert_eq!(enc.tokens.last().copied(), Some(vocab.stop()));
        let back = decode_episode(&enc.tokens, &vocab, &binner).unwrap();
        prop_assert_eq!(&back.states, &ep.states);
        prop_assert!(!back.truncated);
        for (s, b) in ep.scores.iter().zip(&back.scores) {
            match b {
                Some(mid) => prop_assert_eq!(binner.bin(*s).0, binner.bin(*mid).0),
                None => prop_assert!(!scored),
            }
        }
    }

    #[test]
    fn threshold_fractions_shrink_as_thresholds_rise(scores in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let th = [-5.0, 0.0, 5.0];
        let f = threshold_fractions(&scores, &th, Direction::Higher);
        prop_assert!(f.windows(2).all(|w| w[0] >= w[1]));
        let g = threshold_fractions(&scores, &th, Direction::Lower);
        prop_assert!(g.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn identical_outputs_have_full_overlap(tokens in prop::collection::vec(0u32..4, 4..12), n in 2usize..6) {
        let outs = vec![TokenSequence::new(tokens); n];
        let d = diversity(&outs).unwrap();
        prop_assert!((d.unique_fraction - 1.0 / n as f64).abs() < 1e-12);
        prop_assert!((d.overlap - 1.0).abs() < 1e-12);
    }
}
