//! Oracle metrics over generated outputs.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::energy::Task;
use crate::inference::Rollout;
use crate::vocab::{TokenId, TokenSequence};

/// Which way the oracle improves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Higher,
    Lower,
}

impl Direction {
    fn beyond(self, s: f64, t: f64) -> bool {
        match self {
            Direction::Higher => s >= t,
            Direction::Lower => s <= t,
        }
    }
}

/// Fraction of scores at or beyond each threshold.
pub fn threshold_fractions(scores: &[f64], thresholds: &[f64], direction: Direction) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if scores.is_empty() {
                return 0.0;
            }
            scores.iter().filter(|&&s| direction.beyond(s, t)).count() as f64 / scores.len() as f64
        })
        .collect()
}

/// Fraction strictly beyond the range boundary in the improvement direction.
pub fn extrapolation_rate(scores: &[f64], range: (f64, f64), direction: Direction) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let (lo, hi) = range;
    let n = scores
        .iter()
        .filter(|&&s| match direction {
            Direction::Higher => s > hi,
            Direction::Lower => s < lo,
        })
        .count();
    n as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub unique_fraction: f64,
    /// Mean over ordered pairs of the clipped 4-gram precision of one output
    /// against another.
    pub overlap: f64,
}

const N: usize = 4;

fn grams(x: &[TokenId]) -> Vec<([TokenId; N], usize)> {
    let mut counts: HashMap<[TokenId; N], usize> = HashMap::new();
    for w in x.windows(N) {
        *counts.entry([w[0], w[1], w[2], w[3]]).or_default() += 1;
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_unstable();
    v
}

fn precision(a: &[([TokenId; N], usize)], b: &[([TokenId; N], usize)]) -> f64 {
    let total: usize = a.iter().map(|g| g.1).sum();
    if total == 0 || b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut hit) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                hit += a[i].1.min(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    hit as f64 / total as f64
}

/// Unique fraction and mean pairwise 4-gram overlap; `None` for fewer than
/// two outputs.
pub fn diversity(outputs: &[TokenSequence]) -> Option<Diversity> {
    let n = outputs.len();
    if n < 2 {
        return None;
    }
    let unique = outputs.iter().collect::<HashSet<_>>().len();
    let g: Vec<_> = outputs.iter().map(|x| grams(x.tokens())).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += precision(&g[i], &g[j]);
            }
        }
    }
    Some(Diversity {
        unique_fraction: unique as f64 / n as f64,
        overlap: sum / (n * (n - 1)) as f64,
    })
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub seed: u64,
    /// Outputs evaluated, including invalid ones.
    pub n: usize,
    /// Outputs the oracle could not score (wrong length or tokens), and
    /// inputs whose generation failed.
    pub invalid: usize,
    pub thresholds: Vec<f64>,
    pub threshold_fractions: Vec<f64>,
    /// Fraction of outputs inside the training range.
    pub training_rate: f64,
    pub extrapolation_rate: f64,
    pub mean_oracle: f64,
    pub mean_iterations: f64,
    pub median_iterations: f64,
    pub unique_fraction: f64,
    pub overlap: f64,
}

/// Holds the oracle; the only place outputs are scored against ground truth.
pub struct Evaluator<'a> {
    task: &'a Task,
    pub direction: Direction,
}

impl<'a> Evaluator<'a> {
    pub fn new(task: &'a Task) -> Self {
        Self {
            task,
            direction: Direction::Higher,
        }
    }

    /// Oracle value, or `None` for outputs outside the task's state space.
    pub fn oracle(&self, x: &TokenSequence) -> Option<f64> {
        self.task.check_state(x).ok()?;
        self.task.oracle(x).ok()
    }

    pub fn optimum(&self) -> f64 {
        self.task.oracle_optimum()
    }

    /// Metrics of final outputs. Invalid outputs count against every rate.
    pub fn report(
        &self,
        label: &str,
        seed: u64,
        outputs: &[TokenSequence],
        iterations: &[usize],
        failed: usize,
        thresholds: &[f64],
    ) -> MetricsReport {
        let n = outputs.len() + failed;
        let scores: Vec<f64> = outputs.iter().filter_map(|x| self.oracle(x)).collect();
        let invalid = n - scores.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let range = self.task.training_range();
        let beyond = range.map_or(0, |(lo, hi)| {
            scores
                .iter()
                .filter(|&&s| match self.direction {
                    Direction::Higher => s > hi,
                    Direction::Lower => s < lo,
                })
                .count()
        });
        let inside = range.map_or(0, |(lo, hi)| scores.iter().filter(|&&s| s >= lo && s <= hi).count());
        let fractions = thresholds
            .iter()
            .map(|&t| frac(scores.iter().filter(|&&s| self.direction.beyond(s, t)).count()))
            .collect();
        let div = diversity(outputs);
        let mut its: Vec<f64> = iterations.iter().map(|&i| i as f64).collect();
        MetricsReport {
            label: label.into(),
            seed,
            n,
            invalid,
            thresholds: thresholds.to_vec(),
            threshold_fractions: fractions,
            training_rate: frac(inside),
            extrapolation_rate: frac(beyond),
            mean_oracle: if scores.is_empty() {
                f64::NAN
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            },
            mean_iterations: if its.is_empty() {
                0.0
            } else {
                its.iter().sum::<f64>() / its.len() as f64
            },
            median_iterations: median(&mut its),
            unique_fraction: div.map_or(1.0, |d| d.unique_fraction),
            overlap: div.map_or(0.0, |d| d.overlap),
        }
    }

    /// Metrics of rollouts; failed generations are counted as invalid.
    pub fn report_rollouts(
        &self,
        label: &str,
        seed: u64,
        rollouts: &[crate::error::Result<Rollout>],
        thresholds: &[f64],
    ) -> MetricsReport {
        let ok: Vec<&Rollout> = rollouts.iter().filter_map(|r| r.as_ref().ok()).collect();
        let outputs: Vec<TokenSequence> = ok.iter().map(|r| r.output().clone()).collect();
        let its: Vec<usize> = ok.iter().map(|r| r.iterations).collect();
        self.report(label, seed, &outputs, &its, rollouts.len() - ok.len(), thresholds)
    }
}

pub const CSV_HEADER: &str = "label,seed,n,invalid,training_rate,extrapolation_rate,mean_oracle,\
mean_iterations,median_iterations,unique_fraction,overlap,thresholds";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let th: Vec<String> = self
            .thresholds
            .iter()
            .zip(&self.threshold_fractions)
            .map(|(t, f)| format!("{t}:{f:.4}"))
            .collect();
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.3},{:.1},{:.4},{:.4},{}",
            self.label,
            self.seed,
            self.n,
            self.invalid,
            self.training_rate,
            self.extrapolation_rate,
            self.mean_oracle,
            self.mean_iterations,
            self.median_iterations,
            self.unique_fraction,
            self.overlap,
            th.join(";")
        )
    }
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn to_text(reports: &[MetricsReport]) -> String {
    let mut s = format!(
        "{:<20} {:>6} {:>6} {:>8} {:>8} {:>9} {:>7} {:>7} {:>7}\n",
        "label", "seed", "n", "in-range", "extrap", "oracle", "iters", "unique", "4gram"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>6} {:>8.3} {:>8.3} {:>9.3} {:>7.1} {:>7.3} {:>7.3}",
            r.label,
            r.seed,
            r.n,
            r.training_rate,
            r.extrapolation_rate,
            r.mean_oracle,
            r.median_iterations,
            r.unique_fraction,
            r.overlap
        );
    }
    s
}
