//! The synthetic motif task: an exact positional oracle and a regression
//! guide that only ever sees in-range sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::Expert;
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpHead, MlpShape, MlpTargets, MlpTrainConfig};
use crate::rng::RngStream;
use crate::vocab::{TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotifConfig {
    pub length: usize,
    pub vocab: usize,
    /// Oracle range the guide is trained on.
    pub lo: f64,
    pub hi: f64,
    /// In-range sequences used to fit the guide and the infill counts.
    pub pool_size: usize,
    /// Extra in-range sequences held out to validate the guide.
    pub holdout: usize,
    /// Upper bound of the per-sequence match probability of the generator.
    pub max_match: f64,
    pub guide: MlpTrainConfig,
    /// Admissible held-out mean absolute error, as a fraction of `hi - lo`.
    pub mae_tolerance: f64,
}

impl Default for MotifConfig {
    fn default() -> Self {
        Self {
            length: 24,
            vocab: 4,
            lo: 1.0,
            hi: 5.0,
            pool_size: 3000,
            holdout: 500,
            max_match: 0.6,
            guide: MlpTrainConfig {
                epochs: 40,
                lr: 1e-3,
                batch_size: 64,
                init_scale: 1.0,
            },
            mae_tolerance: 0.05,
        }
    }
}

impl MotifConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.length == 0 {
            errs.push("motif length must be positive".into());
        }
        if self.vocab < 2 {
            errs.push("motif vocabulary needs at least 2 tokens".into());
        }
        if !(self.lo < self.hi) || self.lo < 0.0 {
            errs.push(format!("motif range [{}, {}] is empty or negative", self.lo, self.hi));
        }
        let max = (self.length as f64 + 1.0) / 2.0;
        if self.hi >= max {
            errs.push(format!("motif range upper bound {} must lie below the optimum {max}", self.hi));
        }
        if self.pool_size < 10 || self.holdout < 10 {
            errs.push("motif pool and holdout need at least 10 sequences each".into());
        }
        if !(self.max_match > 0.0 && self.max_match <= 1.0) {
            errs.push(format!("motif max_match must be in (0, 1], got {}", self.max_match));
        }
        if self.guide.epochs == 0 || !(self.guide.lr > 0.0) {
            errs.push("motif guide needs positive epochs and learning rate".into());
        }
        errs
    }
}

/// `sum_i w_i [x_i == target_i]` with `w_i = (i + 1) / L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifOracle {
    pub target: TokenSequence,
}

impl MotifOracle {
    pub fn score(&self, x: &TokenSequence) -> Result<f64> {
        let l = self.target.len();
        if x.len() != l {
            return Err(Error::contract(format!("motif sequence must have length {l}, got {}", x.len())));
        }
        Ok(x.tokens()
            .iter()
            .zip(self.target.tokens())
            .enumerate()
            .filter(|(_, (a, b))| a == b)
            .map(|(i, _)| (i + 1) as f64 / l as f64)
            .sum())
    }

    pub fn optimum(&self) -> f64 {
        (self.target.len() as f64 + 1.0) / 2.0
    }
}

/// Rejection sampler for sequences whose oracle value lies in `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct MotifGenerator {
    pub oracle: MotifOracle,
    pub vocab: usize,
    pub lo: f64,
    pub hi: f64,
    pub max_match: f64,
}

impl MotifGenerator {
    pub fn draw(&self, rng: &mut RngStream) -> Result<TokenSequence> {
        let v = self.vocab as TokenId;
        for _ in 0..100_000 {
            let p = rng.gen_range(0.0..self.max_match);
            let x: Vec<TokenId> = self
                .oracle
                .target
                .tokens()
                .iter()
                .map(|&t| {
                    if rng.gen_bool(p) {
                        t
                    } else {
                        // uniform over the other tokens
                        (t + rng.gen_range(1..v)) % v
                    }
                })
                .collect();
            let x = TokenSequence::new(x);
            let s = self.oracle.score(&x)?;
            if s >= self.lo && s <= self.hi {
                return Ok(x);
            }
        }
        Err(Error::contract(format!(
            "no sequence with oracle value in [{}, {}] after 100000 draws",
            self.lo, self.hi
        )))
    }
}

/// Scalar-head MLP regression guide; outputs are `offset + scale * mlp(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpGuide {
    pub mlp: Mlp,
    pub offset: f64,
    pub scale: f64,
}

impl Expert for MlpGuide {
    fn name(&self) -> &str {
        "guide"
    }

    fn score(&self, x: &TokenSequence) -> Result<f64> {
        Ok(self.offset + self.scale * self.mlp.predict(x)?)
    }
}

/// Result of fitting the guide on in-range data.
#[derive(Debug, Clone)]
pub struct GuideFit {
    pub guide: MlpGuide,
    pub pool: Vec<TokenSequence>,
    pub holdout_mae: f64,
}

pub(crate) fn fit_guide(cfg: &MotifConfig, oracle: &MotifOracle, rng: &mut RngStream) -> Result<GuideFit> {
    let generator = MotifGenerator {
        oracle: oracle.clone(),
        vocab: cfg.vocab,
        lo: cfg.lo,
        hi: cfg.hi,
        max_match: cfg.max_match,
    };
    let draw = |n: usize, rng: &mut RngStream| -> Result<Vec<TokenSequence>> {
        (0..n).map(|_| generator.draw(rng)).collect()
    };
    let pool = draw(cfg.pool_size, rng)?;
    let holdout = draw(cfg.holdout, rng)?;
    let ys: Vec<f64> = pool.iter().map(|x| oracle.score(x)).collect::<Result<_>>()?;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64)
        .sqrt()
        .max(1e-9);
    let standardized: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();

    let shape = MlpShape::new(cfg.length, cfg.vocab, MlpHead::Scalar);
    let mut mlp = Mlp::new(shape, cfg.guide.init_scale, rng);
    mlp.fit(&pool, MlpTargets::Values(&standardized), &cfg.guide, rng)?;
    let guide = MlpGuide {
        mlp,
        offset: mean,
        scale: sd,
    };

    let mut residuals = Vec::with_capacity(holdout.len());
    for x in &holdout {
        residuals.push((guide.score(x)? - oracle.score(x)?).abs());
    }
    let holdout_mae = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let bound = cfg.mae_tolerance * (cfg.hi - cfg.lo);
    if holdout_mae > bound {
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        return Err(Error::Diagnostics(format!(
            "guide held-out MAE {holdout_mae:.4} exceeds {bound:.4} (worst residual {worst:.4}); \
             raise guide epochs or pool size"
        )));
    }
    Ok(GuideFit {
        guide,
        pool,
        holdout_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(target: &[u32]) -> MotifOracle {
        MotifOracle {
            target: TokenSequence::new(target.to_vec()),
        }
    }

    #[test]
    fn oracle_weights_positions() {
        let o = oracle(&[0, 1, 2, 3]);
        assert_eq!(o.score(&TokenSequence::new(vec![0, 1, 2, 3])).unwrap(), 2.5);
        assert_eq!(o.optimum(), 2.5);
        assert_eq!(o.score(&TokenSequence::new(vec![1, 2, 3, 0])).unwrap(), 0.0);
        assert_eq!(o.score(&TokenSequence::new(vec![0, 0, 0, 3])).unwrap(), 0.25 + 1.0);
        assert!(o.score(&TokenSequence::new(vec![0])).is_err());
    }

    #[test]
    fn generator_stays_in_range() {
        let mut rng = RngStream::new(3);
        let target = TokenSequence::new((0..24).map(|_| rng.gen_range(0..4)).collect());
        let g = MotifGenerator {
            oracle: MotifOracle { target },
            vocab: 4,
            lo: 1.0,
            hi: 5.0,
            max_match: 0.6,
        };
        for _ in 0..500 {
            let x = g.draw(&mut rng).unwrap();
            let s = g.oracle.score(&x).unwrap();
            assert!((1.0..=5.0).contains(&s));
        }
    }
}
