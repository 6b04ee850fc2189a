//! Chain and episode records and their line-delimited JSON stores.
//!
//! Every store starts with one header line carrying the schema version and
//! the hash of the configuration that produced it; each following line is one
//! record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::KernelConfig;
use crate::vocab::TokenSequence;

pub const SCHEMA_VERSION: u32 = 1;

/// One Markov chain with cached guide scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub v: u32,
    pub task: String,
    pub seed: u64,
    pub states: Vec<TokenSequence>,
    pub scores: Vec<f64>,
    pub accepted: Vec<bool>,
    pub proposal: KernelConfig,
}

impl ChainRecord {
    pub fn validate(&self) -> Result<()> {
        if self.v != SCHEMA_VERSION {
            return Err(Error::contract(format!("unsupported chain schema v{}", self.v)));
        }
        if self.states.is_empty() {
            return Err(Error::contract("chain has no states"));
        }
        if self.scores.len() != self.states.len() {
            return Err(Error::contract(format!(
                "chain has {} states but {} scores",
                self.states.len(),
                self.scores.len()
            )));
        }
        if self.accepted.len() + 1 != self.states.len() {
            return Err(Error::contract(format!(
                "chain has {} states but {} acceptance flags",
                self.states.len(),
                self.accepted.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len() as f64
    }

    pub fn best_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Keeps the first `keep` states (at least one).
    pub fn truncated(&self, keep: usize) -> ChainRecord {
        let keep = keep.clamp(1, self.states.len());
        ChainRecord {
            states: self.states[..keep].to_vec(),
            scores: self.scores[..keep].to_vec(),
            accepted: self.accepted[..keep - 1].to_vec(),
            ..self.clone()
        }
    }
}

/// A short training sequence of chain states; `scores[i]` belongs to `states[i + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub v: u32,
    pub strategy: String,
    pub states: Vec<TokenSequence>,
    pub scores: Vec<f64>,
}

impl Episode {
    pub fn new(strategy: impl Into<String>, states: Vec<TokenSequence>, scores: Vec<f64>) -> Result<Self> {
        let ep = Self {
            v: SCHEMA_VERSION,
            strategy: strategy.into(),
            states,
            scores,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() < 2 {
            return Err(Error::contract("episode needs x0 and at least one revised state"));
        }
        if self.scores.len() + 1 != self.states.len() {
            return Err(Error::contract(format!(
                "episode has {} states but {} scores",
                self.states.len(),
                self.scores.len()
            )));
        }
        Ok(())
    }

    /// Number of revised states (excludes x0).
    pub fn revisions(&self) -> usize {
        self.states.len() - 1
    }

    pub fn initial(&self) -> &TokenSequence {
        &self.states[0]
    }

    pub fn last(&self) -> &TokenSequence {
        self.states.last().expect("validated episode")
    }
}

/// First line of every artifact store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub v: u32,
    pub artifact: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ArtifactHeader,
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &ArtifactHeader, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &HeaderLine {
            header: header.clone(),
        },
    )?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a store written by [`write_jsonl`]. Blank lines are skipped; a
/// missing header is tolerated so hand-written files can be fed in.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<ArtifactHeader>, Vec<T>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                header = Some(h.header);
                continue;
            }
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok((header, records))
}
