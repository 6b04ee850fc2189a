//! Trainable extrapolators, their optimizer and checkpoints.
//!
//! Two model families share one checkpoint format:
//!
//! * [`Mlp`] — fixed-length, decodes every position of the next state in
//!   parallel (the binary toy task);
//! * [`ArModel`] — causal attention over the serialized episode, generating
//!   the next state token by token.

pub mod adam;
pub mod ar;
pub mod gradcheck;
pub mod mlp;

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::binner::ScoreBinner;
use crate::encoding::{token_roles, RewardMode, TokenRole};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::{TokenId, TokenKind, TokenSequence, Vocabulary};
pub use adam::{Adam, AdamConfig, Parameters};
pub use ar::{ArModel, ArSession, ArShape, ArTrainConfig, MaskedSequence};
pub use mlp::{Mlp, MlpHead, MlpShape, MlpTargets, MlpTrainConfig};

pub const CHECKPOINT_FORMAT: &str = "chainex-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "kebab-case")]
pub enum ModelParams {
    Mlp(Mlp),
    Ar(ArModel),
}

/// Trained parameters plus everything needed to encode inputs for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolatorCheckpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelParams,
    pub vocab: Vocabulary,
    pub binner: Option<ScoreBinner>,
    pub reward_mode: RewardMode,
    pub config_hash: String,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Longest training episode, in tokens (AR models only).
    pub longest_episode: usize,
}

impl ExtrapolatorCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(s)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    pub fn mlp(&self) -> Result<&Mlp> {
        match &self.model {
            ModelParams::Mlp(m) => Ok(m),
            ModelParams::Ar(_) => Err(Error::contract("checkpoint holds an autoregressive model, not an MLP")),
        }
    }

    pub fn ar(&self) -> Result<&ArModel> {
        match &self.model {
            ModelParams::Ar(m) => Ok(m),
            ModelParams::Mlp(_) => Err(Error::contract("checkpoint holds an MLP, not an autoregressive model")),
        }
    }
}

/// Fits the one-step binary extrapolator on `(previous, next)` state pairs.
pub fn train_mlp(
    pairs: &[(TokenSequence, TokenSequence)],
    cfg: &MlpTrainConfig,
    config_hash: &str,
    rng: &mut RngStream,
) -> Result<ExtrapolatorCheckpoint> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::EmptyTrainingSet { discarded: 0 });
    };
    let length = first.len();
    if pairs.iter().any(|(a, b)| a.len() != length || b.len() != length) {
        return Err(Error::contract("all training pairs must share one length"));
    }
    let (inputs, targets): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let mut mlp = Mlp::new(MlpShape::new(length, 2, MlpHead::Binary), cfg.init_scale, rng);
    let history = mlp.fit(&inputs, MlpTargets::Tokens(&targets), cfg, rng)?;
    Ok(ExtrapolatorCheckpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: ModelParams::Mlp(mlp),
        vocab: Vocabulary::numeric(2, 1, 0)?,
        binner: None,
        reward_mode: RewardMode::None,
        config_hash: config_hash.into(),
        loss_history: history,
        longest_episode: 0,
    })
}

/// One parallel decoding step of an MLP checkpoint.
pub fn mlp_step(ckpt: &ExtrapolatorCheckpoint, x: &TokenSequence) -> Result<TokenSequence> {
    ckpt.mlp()?.step(x)
}

/// Loss mask of an encoded episode: revised-state tokens, separators after
/// x0 and `<stop>` always; score tokens only when scores are predicted.
pub fn loss_mask(tokens: &[TokenId], vocab: &Vocabulary, mode: RewardMode) -> Vec<bool> {
    token_roles(tokens, vocab)
        .into_iter()
        .map(|r| match r {
            TokenRole::Initial | TokenRole::Prompt => false,
            TokenRole::State | TokenRole::Boundary => true,
            TokenRole::Score => mode == RewardMode::Predicted,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArSettings {
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
    /// Context window beyond the longest training episode.
    pub context_slack: usize,
    pub train: ArTrainConfig,
}

impl Default for ArSettings {
    fn default() -> Self {
        Self {
            d_model: 48,
            heads: 4,
            ff: 96,
            layers: 2,
            context_slack: 64,
            train: ArTrainConfig::default(),
        }
    }
}

/// Fits the autoregressive extrapolator with teacher forcing.
pub fn train_ar(
    encoded: &[Vec<TokenId>],
    vocab: &Vocabulary,
    binner: &ScoreBinner,
    mode: RewardMode,
    settings: &ArSettings,
    config_hash: &str,
    rng: &mut RngStream,
) -> Result<ExtrapolatorCheckpoint> {
    if encoded.is_empty() {
        return Err(Error::EmptyTrainingSet { discarded: 0 });
    }
    let longest = encoded.iter().map(Vec::len).max().unwrap_or(0);
    let shape = ArShape {
        vocab: vocab.len(),
        context: longest + settings.context_slack,
        d_model: settings.d_model,
        heads: settings.heads,
        ff: settings.ff,
        layers: settings.layers,
    };
    let data: Vec<MaskedSequence> = encoded
        .iter()
        .map(|t| MaskedSequence {
            tokens: t.clone(),
            loss_mask: loss_mask(t, vocab, mode),
        })
        .collect();
    let mut model = ArModel::new(shape, settings.train.init_scale, rng)?;
    let history = model.fit(&data, &settings.train, rng)?;
    Ok(ExtrapolatorCheckpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: ModelParams::Ar(model),
        vocab: vocab.clone(),
        binner: Some(binner.clone()),
        reward_mode: mode,
        config_hash: config_hash.into(),
        loss_history: history,
        longest_episode: longest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub temperature: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
        }
    }
}

/// Samples a token id from `logits` restricted to `allowed` (all when `None`).
pub fn sample_token(
    logits: &Array1<f64>,
    allowed: Option<std::ops::Range<usize>>,
    cfg: &DecodeConfig,
    rng: &mut RngStream,
) -> TokenId {
    let range = allowed.unwrap_or(0..logits.len());
    let mut cand: Vec<(usize, f64)> = range.map(|i| (i, logits[i])).collect();
    // stable order: higher logit first, ties by id
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if cfg.top_k > 0 {
        cand.truncate(cfg.top_k);
    }
    if cand.len() == 1 || cfg.temperature <= 0.0 {
        return cand[0].0 as TokenId;
    }
    let m = cand[0].1;
    let weights: Vec<f64> = cand.iter().map(|&(_, z)| ((z - m) / cfg.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&(i, _), w) in cand.iter().zip(&weights) {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    cand.last().expect("non-empty candidates").0 as TokenId
}

/// How a generated state ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Separator(usize),
    ScoreBin(usize),
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextState {
    /// Content tokens of the generated state (empty if the model stopped).
    pub tokens: Vec<TokenId>,
    pub boundary: Boundary,
}

impl NextState {
    pub fn is_stop(&self) -> bool {
        self.tokens.is_empty() && self.boundary == Boundary::Stop
    }
}

/// Samples content tokens until the next separator, score or `<stop>` and
/// feeds everything (boundary included) into the session. Fails with a
/// runaway error when no boundary appears within `budget` tokens or the
/// context runs out.
pub fn ar_next_state(
    session: &mut ArSession<'_>,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    budget: usize,
    rng: &mut RngStream,
) -> Result<NextState> {
    let mut tokens = Vec::new();
    loop {
        if tokens.len() >= budget || session.remaining() == 0 {
            return Err(Error::Runaway { tokens: tokens.len() });
        }
        let logits = session
            .logits()
            .ok_or_else(|| Error::contract("next-state sampling needs a non-empty prefix"))?
            .clone();
        let t = sample_token(&logits, None, cfg, rng);
        session.push(t)?;
        let boundary = match vocab.kind(t) {
            Some(TokenKind::Content(_)) => {
                tokens.push(t);
                continue;
            }
            Some(TokenKind::Separator(i)) => Boundary::Separator(i),
            Some(TokenKind::ScoreBin(b)) => Boundary::ScoreBin(b),
            Some(TokenKind::Stop) => Boundary::Stop,
            None => return Err(Error::contract(format!("sampled token {t} outside vocabulary"))),
        };
        return Ok(NextState { tokens, boundary });
    }
}
