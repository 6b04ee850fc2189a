//! Expert scorers and their weighted product-of-experts combination.
//!
//! Scores are higher-is-better everywhere. An [`EnergyModel`] defines the
//! unnormalized log-density `ln p(x) = sum_i alpha_i * s_i(x) - ln Z`; the
//! partition term is never computed because it cancels in every acceptance
//! ratio.

mod motif;
mod task;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::vocab::{hamming, TokenSequence};

pub use motif::{MlpGuide, MotifConfig, MotifGenerator, MotifOracle};
pub use task::{make_guide_oracle_task, ExpertSpec, Task, TaskArtifact, TaskConfig};

pub trait Expert: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn score(&self, x: &TokenSequence) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct WeightedExpert {
    pub expert: Arc<dyn Expert>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct EnergyModel {
    experts: Vec<WeightedExpert>,
}

impl EnergyModel {
    pub fn new(experts: Vec<WeightedExpert>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::contract("energy model needs at least one expert"));
        }
        if let Some(e) = experts.iter().find(|e| !(e.weight >= 0.0) || !e.weight.is_finite()) {
            return Err(Error::contract(format!(
                "expert `{}` has invalid weight {}",
                e.expert.name(),
                e.weight
            )));
        }
        Ok(Self { experts })
    }

    pub fn single(expert: Arc<dyn Expert>, weight: f64) -> Result<Self> {
        Self::new(vec![WeightedExpert { expert, weight }])
    }

    pub fn experts(&self) -> &[WeightedExpert] {
        &self.experts
    }

    /// `sum_i alpha_i * s_i(x)`, accumulated in expert order.
    pub fn combined_score(&self, x: &TokenSequence) -> Result<f64> {
        let mut total = 0.0;
        for e in &self.experts {
            let s = e.expert.score(x).map_err(|err| Error::Expert {
                name: e.expert.name().to_string(),
                source: Box::new(err),
            })?;
            total += e.weight * s;
        }
        Ok(total)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.experts
                .iter()
                .map(|e| WeightedExpert {
                    expert: e.expert.clone(),
                    weight: e.weight * c,
                })
                .collect(),
        )
    }
}

fn toy_exponent(x: &TokenSequence, length: usize) -> Result<f64> {
    if length % 2 != 0 || length == 0 {
        return Err(Error::contract(format!("toy length must be even and positive, got {length}")));
    }
    if x.len() != length {
        return Err(Error::contract(format!("toy sequence must have length {length}, got {}", x.len())));
    }
    let l = length as f64;
    let mut sum = 0.0;
    for (i, &t) in x.tokens().iter().enumerate() {
        if t > 1 {
            return Err(Error::contract(format!("toy sequences are binary, found token {t}")));
        }
        let r = i as f64 * f64::from(t) / l;
        // zero-based positions; the second half (i >= L/2) is rewarded
        sum += if i >= length / 2 { r } else { -r };
    }
    Ok(sum)
}

/// Reward of the binary toy problem, `exp(sum_i r_i)`. Maximized by
/// `0^{L/2} 1^{L/2}`.
pub fn toy_score(x: &TokenSequence, length: usize) -> Result<f64> {
    toy_exponent(x, length).map(f64::exp)
}

/// `sum_i r_i`, the log of [`toy_score`]; this is the toy log-density.
pub fn toy_log_score(x: &TokenSequence, length: usize) -> Result<f64> {
    toy_exponent(x, length)
}

#[derive(Debug, Clone)]
pub struct ToyLogReward {
    pub length: usize,
}

impl Expert for ToyLogReward {
    fn name(&self) -> &str {
        "toy-log-reward"
    }

    fn score(&self, x: &TokenSequence) -> Result<f64> {
        toy_log_score(x, self.length)
    }
}

#[derive(Debug, Clone)]
pub struct ToyReward {
    pub length: usize,
}

impl Expert for ToyReward {
    fn name(&self) -> &str {
        "toy-reward"
    }

    fn score(&self, x: &TokenSequence) -> Result<f64> {
        toy_score(x, self.length)
    }
}

/// Negated Hamming distance to a reference state (closer is better).
#[derive(Debug, Clone)]
pub struct HammingToReference {
    pub reference: TokenSequence,
}

impl Expert for HammingToReference {
    fn name(&self) -> &str {
        "hamming-to-start"
    }

    fn score(&self, x: &TokenSequence) -> Result<f64> {
        Ok(-(hamming(&self.reference, x)? as f64))
    }
}

#[derive(Clone)]
pub struct FnExpert<F> {
    name: String,
    f: F,
}

impl<F> fmt::Debug for FnExpert<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnExpert").field("name", &self.name).finish()
    }
}

impl<F> FnExpert<F>
where
    F: Fn(&TokenSequence) -> Result<f64> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Expert for FnExpert<F>
where
    F: Fn(&TokenSequence) -> Result<f64> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, x: &TokenSequence) -> Result<f64> {
        (self.f)(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    fn bits(v: &[u32]) -> TokenSequence {
        TokenSequence::new(v.to_vec())
    }

    #[test]
    fn toy_score_examples() {
        let zeros = TokenSequence::zeros(16);
        assert_eq!(toy_score(&zeros, 16).unwrap(), 1.0);

        let mut opt = vec![0; 8];
        opt.extend([1; 8]);
        let s = toy_score(&bits(&opt), 16).unwrap();
        assert!((s - 5.75f64.exp()).abs() < 1e-12);
        assert!((s - 314.19).abs() < 0.01);

        let ones = toy_score(&bits(&[1; 16]), 16).unwrap();
        assert!((ones - 4.0f64.exp()).abs() < 1e-12);
        assert!((ones - 54.598).abs() < 1e-3);
    }

    #[test]
    fn toy_score_rejects_bad_input() {
        assert!(toy_score(&bits(&[0, 2]), 2).is_err());
        assert!(toy_score(&bits(&[0, 1, 0]), 3).is_err());
        assert!(toy_score(&bits(&[0, 1]), 4).is_err());
    }

    #[test]
    fn toy_optimum_by_enumeration() {
        for l in [2usize, 4, 8, 16] {
            let mut best = (f64::NEG_INFINITY, 0u32, 0usize);
            for code in 0u32..(1 << l) {
                let x = TokenSequence::new((0..l).map(|i| (code >> i) & 1).collect());
                let s = toy_score(&x, l).unwrap();
                if s > best.0 {
                    best = (s, code, 1);
                } else if s == best.0 {
                    best.2 += 1;
                }
            }
            // position 0 carries weight 0, so uniqueness holds only once it is fixed to 0
            let expect: u32 = ((1u32 << (l / 2)) - 1) << (l / 2);
            assert_eq!(best.1, expect, "L = {l}");
            assert_eq!(best.2, 2, "L = {l}");
        }
    }

    #[test]
    fn single_expert_and_zero_hamming_term() {
        let toy = Arc::new(ToyReward { length: 4 });
        let m = EnergyModel::single(toy.clone(), 1.0).unwrap();
        let x = bits(&[0, 1, 0, 1]);
        assert_eq!(m.combined_score(&x).unwrap(), toy_score(&x, 4).unwrap());

        let m = EnergyModel::new(vec![
            WeightedExpert { expert: toy, weight: 1.0 },
            WeightedExpert {
                expert: Arc::new(HammingToReference { reference: x.clone() }),
                weight: 0.5,
            },
        ])
        .unwrap();
        assert_eq!(m.combined_score(&x).unwrap(), toy_score(&x, 4).unwrap() - 0.0);
    }

    #[test]
    fn expert_failure_carries_the_name() {
        let m = EnergyModel::single(Arc::new(ToyReward { length: 4 }), 1.0).unwrap();
        let err = m.combined_score(&bits(&[0, 1])).unwrap_err();
        assert!(matches!(err, Error::Expert { ref name, .. } if name == "toy-reward"));
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(EnergyModel::single(Arc::new(ToyReward { length: 4 }), -1.0).is_err());
        assert!(EnergyModel::new(vec![]).is_err());
    }

    #[test]
    fn scaling_one_weight_scales_its_contribution() {
        let mut rng = RngStream::new(6);
        let a: Arc<dyn Expert> = Arc::new(ToyLogReward { length: 8 });
        let b: Arc<dyn Expert> = Arc::new(HammingToReference {
            reference: TokenSequence::zeros(8),
        });
        for _ in 0..200 {
            let x = TokenSequence::new((0..8).map(|_| rng.gen_range(0..2)).collect());
            let c = rng.gen_range(0.01..100.0);
            let wa = rng.gen_range(0.0..5.0);
            let base = EnergyModel::new(vec![
                WeightedExpert { expert: a.clone(), weight: wa },
                WeightedExpert { expert: b.clone(), weight: 0.0 },
            ])
            .unwrap();
            let scaled = EnergyModel::new(vec![
                WeightedExpert { expert: a.clone(), weight: wa * c },
                WeightedExpert { expert: b.clone(), weight: 0.0 },
            ])
            .unwrap();
            let s0 = base.combined_score(&x).unwrap();
            let s1 = scaled.combined_score(&x).unwrap();
            assert!((s1 - c * s0).abs() <= 1e-12 * (c * s0).abs().max(1e-300));
        }
    }

    #[test]
    fn common_scaling_preserves_ranking() {
        let mut rng = RngStream::new(7);
        let m = EnergyModel::new(vec![
            WeightedExpert {
                expert: Arc::new(ToyLogReward { length: 8 }),
                weight: 1.3,
            },
            WeightedExpert {
                expert: Arc::new(HammingToReference {
                    reference: TokenSequence::zeros(8),
                }),
                weight: 0.2,
            },
        ])
        .unwrap();
        for _ in 0..20 {
            let c = rng.gen_range(0.1..10.0);
            let scaled = m.scaled(c).unwrap();
            let cands: Vec<TokenSequence> = (0..30)
                .map(|_| TokenSequence::new((0..8).map(|_| rng.gen_range(0..2)).collect()))
                .collect();
            let rank = |m: &EnergyModel| {
                let mut idx: Vec<usize> = (0..cands.len()).collect();
                idx.sort_by(|&i, &j| {
                    m.combined_score(&cands[j])
                        .unwrap()
                        .total_cmp(&m.combined_score(&cands[i]).unwrap())
                        .then(i.cmp(&j))
                });
                idx
            };
            assert_eq!(rank(&m), rank(&scaled));
        }
    }
}
