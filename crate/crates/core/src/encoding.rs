//! Token serialization of training episodes.
//!
//! An episode `x0, x1, ..., xn` with scores `s1..sn` is laid out as
//!
//! ```text
//! x0 <seq0> x1 <seq1> s1 x2 <seq2> s2 ... xn sn <stop>
//! ```
//!
//! where each `si` is a single score-bin token. With [`RewardMode::None`] the
//! score tokens are omitted but separators and `<stop>` stay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binner::ScoreBinner;
use crate::error::{Error, Result};
use crate::records::Episode;
use crate::vocab::{TokenId, TokenKind, TokenSequence, Vocabulary};

/// How intermediate scores enter the episode stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// No score tokens.
    None,
    /// Score tokens come from the guide at inference time.
    Real,
    /// Score tokens are generated by the model itself.
    Predicted,
}

impl RewardMode {
    pub fn scored(self) -> bool {
        self != RewardMode::None
    }

    pub const ALL: [RewardMode; 3] = [RewardMode::None, RewardMode::Real, RewardMode::Predicted];
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMode::None => "none",
            RewardMode::Real => "real",
            RewardMode::Predicted => "predicted",
        })
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RewardMode::None),
            "real" => Ok(RewardMode::Real),
            "predicted" => Ok(RewardMode::Predicted),
            other => Err(Error::Config(vec![format!(
                "unknown reward mode `{other}` (expected none, real or predicted)"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEpisode {
    pub tokens: Vec<TokenId>,
    /// Scores that fell outside the binner range and were clamped.
    pub clamped: usize,
}

pub fn encode_episode(
    ep: &Episode,
    vocab: &Vocabulary,
    binner: &ScoreBinner,
    mode: RewardMode,
) -> Result<EncodedEpisode> {
    ep.validate()?;
    let n = ep.revisions();
    if n > vocab.separators() {
        return Err(Error::contract(format!(
            "episode with {n} revised states needs more than the {} separators in the vocabulary",
            vocab.separators()
        )));
    }
    if mode.scored() && binner.bins() != vocab.bins() {
        return Err(Error::contract("binner and vocabulary disagree on bin count"));
    }
    let mut tokens = Vec::with_capacity((n + 1) * (ep.states[0].len() + 2) + 1);
    let mut clamped = 0;
    let push_state = |tokens: &mut Vec<TokenId>, x: &TokenSequence| -> Result<()> {
        if x.is_empty() {
            return Err(Error::contract("episode state is empty"));
        }
        if let Some(&t) = x.tokens().iter().find(|&&t| !vocab.is_content(t)) {
            return Err(Error::contract(format!("state token {t} is not a content token")));
        }
        tokens.extend_from_slice(x.tokens());
        Ok(())
    };
    let mut score_token = |s: f64| -> TokenId {
        let (b, c) = binner.bin(s);
        clamped += usize::from(c);
        vocab.score_bin(b).expect("bin count checked")
    };

    push_state(&mut tokens, &ep.states[0])?;
    tokens.push(vocab.separator(0).expect("vocabulary has separators"));
    for i in 1..=n {
        push_state(&mut tokens, &ep.states[i])?;
        if i < n {
            tokens.push(vocab.separator(i).expect("separator count checked"));
        }
        if mode.scored() {
            tokens.push(score_token(ep.scores[i - 1]));
        }
    }
    tokens.push(vocab.stop());
    Ok(EncodedEpisode { tokens, clamped })
}

/// Result of parsing a (possibly partial) episode token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedEpisode {
    pub states: Vec<TokenSequence>,
    /// Bin midpoint per revised state, `None` where no score token was present.
    pub scores: Vec<Option<f64>>,
    /// `<stop>` was never reached.
    pub truncated: bool,
    /// Tokens discarded after the last complete state.
    pub dropped: usize,
}

impl DecodedEpisode {
    pub fn revisions(&self) -> usize {
        self.states.len() - 1
    }

    /// Converts to an [`Episode`] when every revised state carries a score.
    pub fn into_episode(self, strategy: &str) -> Option<Episode> {
        let scores: Option<Vec<f64>> = self.scores.into_iter().collect();
        Episode::new(strategy, self.states, scores?).ok()
    }
}

pub fn decode_episode(tokens: &[TokenId], vocab: &Vocabulary, binner: &ScoreBinner) -> Result<DecodedEpisode> {
    let content_run = |from: usize| -> usize {
        tokens[from..]
            .iter()
            .take_while(|&&t| vocab.is_content(t))
            .count()
    };
    let x0_len = content_run(0);
    if x0_len == 0 {
        return Err(Error::Structure {
            position: 0,
            reason: if tokens.is_empty() {
                "empty token list".into()
            } else {
                "episode must start with the tokens of x0".into()
            },
        });
    }
    match tokens.get(x0_len).and_then(|&t| vocab.kind(t)) {
        Some(TokenKind::Separator(0)) => {}
        None if x0_len == tokens.len() => {
            return Err(Error::Structure {
                position: x0_len,
                reason: "x0 is not terminated by <seq0>".into(),
            })
        }
        _ => {
            return Err(Error::Structure {
                position: x0_len,
                reason: "expected <seq0> after x0".into(),
            })
        }
    }

    let mut out = DecodedEpisode {
        states: vec![TokenSequence::new(tokens[..x0_len].to_vec())],
        scores: Vec::new(),
        truncated: true,
        dropped: 0,
    };
    let mut pos = x0_len + 1;
    let score_of = |t: TokenId| match vocab.kind(t) {
        Some(TokenKind::ScoreBin(b)) => Some(binner.midpoint(b)),
        _ => None,
    };
    loop {
        if pos >= tokens.len() {
            break;
        }
        let run = content_run(pos);
        if run == 0 {
            // <stop> straight after a separator/score: no further revisions
            if tokens[pos] == vocab.stop() {
                out.truncated = false;
                pos += 1;
            }
            break;
        }
        let index = out.states.len();
        let state = TokenSequence::new(tokens[pos..pos + run].to_vec());
        let boundary = pos + run;
        let Some(&b) = tokens.get(boundary) else {
            break;
        };
        match vocab.kind(b) {
            Some(TokenKind::Separator(j)) if j == index => {
                out.states.push(state);
                pos = boundary + 1;
                let score = tokens.get(pos).and_then(|&t| score_of(t));
                if score.is_some() {
                    pos += 1;
                }
                out.scores.push(score);
            }
            Some(TokenKind::ScoreBin(_)) => {
                out.states.push(state);
                out.scores.push(score_of(b));
                pos = boundary + 1;
                if tokens.get(pos) == Some(&vocab.stop()) {
                    out.truncated = false;
                    pos += 1;
                }
                break;
            }
            Some(TokenKind::Stop) => {
                out.states.push(state);
                out.scores.push(None);
                out.truncated = false;
                pos = boundary + 1;
                break;
            }
            _ => break,
        }
    }
    out.dropped = tokens.len() - pos.min(tokens.len());
    Ok(out)
}

/// Role of each position in an encoded episode, used to build loss masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    /// Tokens of x0: context only.
    Initial,
    /// The `<seq0>` separator closing x0; part of the prompt.
    Prompt,
    /// Tokens of a revised state.
    State,
    /// `<seq_i>` for i >= 1, and `<stop>`.
    Boundary,
    Score,
}

pub fn token_roles(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<TokenRole> {
    let mut in_x0 = true;
    tokens
        .iter()
        .map(|&t| match vocab.kind(t) {
            Some(TokenKind::Content(_)) if in_x0 => TokenRole::Initial,
            Some(TokenKind::Content(_)) => TokenRole::State,
            Some(TokenKind::Separator(0)) if in_x0 => {
                in_x0 = false;
                TokenRole::Prompt
            }
            Some(TokenKind::ScoreBin(_)) => TokenRole::Score,
            _ => TokenRole::Boundary,
        })
        .collect()
}
