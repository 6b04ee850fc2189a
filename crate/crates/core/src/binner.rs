//! Equal-width quantization of scalar scores into a fixed number of bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBinner {
    edges: Vec<f64>,
}

impl ScoreBinner {
    /// Fits `bins` equal-width bins over `[min, max]` of `scores`. A constant
    /// score set gets a unit-width window centred on the value.
    pub fn fit(scores: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::contract("binner needs at least one bin"));
        }
        if scores.is_empty() {
            return Err(Error::contract("binner needs at least one score"));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::contract(format!("non-finite score {s}")));
        }
        let mut lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self::from_range(lo, hi, bins)
    }

    pub fn from_range(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi) || bins == 0 {
            return Err(Error::contract(format!("bad binner range [{lo}, {hi}] x {bins}")));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + width * i as f64).collect();
        edges.push(hi);
        Self::from_edges(edges)
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::contract("bin edges must be strictly increasing"));
        }
        Ok(Self { edges })
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn min(&self) -> f64 {
        self.edges[0]
    }

    pub fn max(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    /// Bin index and whether the score had to be clamped into range.
    pub fn bin(&self, score: f64) -> (usize, bool) {
        let last = self.bins() - 1;
        if score.is_nan() || score < self.min() {
            return (0, true);
        }
        if score > self.max() {
            return (last, true);
        }
        // edges[i] <= score < edges[i+1], with the top edge closed
        let i = self.edges.partition_point(|&e| e <= score);
        (i.saturating_sub(1).min(last), false)
    }

    pub fn midpoint(&self, bin: usize) -> f64 {
        let b = bin.min(self.bins() - 1);
        0.5 * (self.edges[b] + self.edges[b + 1])
    }
}
