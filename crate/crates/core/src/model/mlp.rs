//! Fixed-length multilayer perceptron over token sequences.
//!
//! Each of the `L` input tokens is embedded, the embeddings are concatenated
//! into one `L * embed` vector, and two ReLU layers feed an output head. The
//! same core serves as the one-step extrapolator of the binary toy task
//! (per-position sigmoid head) and as the scalar regression guide.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::adam::{standard, Adam, AdamConfig, Parameters};
use crate::rng::RngStream;
use crate::vocab::{TokenId, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpHead {
    /// One sigmoid logit per position (binary vocabularies).
    Binary,
    /// `vocab` logits per position.
    Categorical,
    /// A single regression output.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpShape {
    pub length: usize,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: [usize; 2],
    pub head: MlpHead,
}

impl MlpShape {
    pub fn new(length: usize, vocab: usize, head: MlpHead) -> Self {
        Self {
            length,
            vocab,
            embed: 16,
            hidden: [128, 128],
            head,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            MlpHead::Binary => self.length,
            MlpHead::Categorical => self.length * self.vocab,
            MlpHead::Scalar => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub emb: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl MlpParams {
    fn zeros(shape: &MlpShape) -> Self {
        let [h1, h2] = shape.hidden;
        Self {
            emb: Array2::zeros((shape.vocab, shape.embed)),
            w1: Array2::zeros((shape.length * shape.embed, h1)),
            b1: Array1::zeros(h1),
            w2: Array2::zeros((h1, h2)),
            b2: Array1::zeros(h2),
            w3: Array2::zeros((h2, shape.outputs())),
            b3: Array1::zeros(shape.outputs()),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            emb: Array2::zeros(self.emb.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.raw_dim()),
        }
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.emb.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.emb.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }
}

/// What the network is fit to.
#[derive(Debug, Clone, Copy)]
pub enum MlpTargets<'a> {
    /// Next-state tokens, for the binary and categorical heads.
    Tokens(&'a [TokenSequence]),
    /// Regression values, for the scalar head.
    Values(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    /// Uniform init bound is `init_scale / sqrt(fan_in)`.
    pub init_scale: f64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch_size: 0,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub shape: MlpShape,
    pub params: MlpParams,
}

struct Cache {
    z0: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn uniform_fill(rng: &mut RngStream, a: &mut [f64], bound: f64) {
    for v in a {
        *v = rng.gen_range(-bound..=bound);
    }
}

impl Mlp {
    pub fn new(shape: MlpShape, init_scale: f64, rng: &mut RngStream) -> Self {
        let mut params = MlpParams::zeros(&shape);
        let fan_ins = [
            1,
            shape.length * shape.embed,
            shape.length * shape.embed,
            shape.hidden[0],
            shape.hidden[0],
            shape.hidden[1],
            shape.hidden[1],
        ];
        for (t, fan_in) in params.tensors_mut().into_iter().zip(fan_ins) {
            uniform_fill(rng, t, init_scale / (fan_in as f64).sqrt());
        }
        Self { shape, params }
    }

    fn check_input(&self, x: &TokenSequence) -> Result<()> {
        if x.len() != self.shape.length {
            return Err(Error::contract(format!(
                "MLP expects length {}, got {}",
                self.shape.length,
                x.len()
            )));
        }
        if let Some(&t) = x.tokens().iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(Error::contract(format!("token {t} outside MLP vocabulary")));
        }
        Ok(())
    }

    fn embed(&self, xs: &[&TokenSequence]) -> Array2<f64> {
        let e = self.shape.embed;
        let mut z0 = Array2::zeros((xs.len(), self.shape.length * e));
        for (b, x) in xs.iter().enumerate() {
            for (l, &t) in x.tokens().iter().enumerate() {
                z0.slice_mut(s![b, l * e..(l + 1) * e])
                    .assign(&self.params.emb.row(t as usize));
            }
        }
        z0
    }

    fn forward_cached(&self, xs: &[&TokenSequence]) -> (Array2<f64>, Cache) {
        let p = &self.params;
        let z0 = self.embed(xs);
        let a1 = z0.dot(&p.w1) + &p.b1;
        let h1 = relu(&a1);
        let a2 = h1.dot(&p.w2) + &p.b2;
        let h2 = relu(&a2);
        let out = h2.dot(&p.w3) + &p.b3;
        (out, Cache { z0, a1, h1, a2, h2 })
    }

    /// Raw head outputs (logits or regression values), one row per input.
    pub fn forward(&self, xs: &[&TokenSequence]) -> Result<Array2<f64>> {
        for x in xs {
            self.check_input(x)?;
        }
        Ok(self.forward_cached(xs).0)
    }

    /// Loss value and its gradient at `d_out`.
    fn loss_terms(&self, out: &Array2<f64>, targets: MlpTargets<'_>, rows: &[usize]) -> Result<(f64, Array2<f64>)> {
        let b = out.nrows();
        let mut d = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        match (self.shape.head, targets) {
            (MlpHead::Binary, MlpTargets::Tokens(ys)) => {
                let n = (b * self.shape.length) as f64;
                for (r, &i) in rows.iter().enumerate() {
                    for (l, &y) in ys[i].tokens().iter().enumerate() {
                        let z = out[[r, l]];
                        let y = f64::from(y);
                        // softplus(z) - y z, computed stably
                        loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                        d[[r, l]] = (sigmoid(z) - y) / n;
                    }
                }
                loss /= n;
            }
            (MlpHead::Categorical, MlpTargets::Tokens(ys)) => {
                let v = self.shape.vocab;
                let n = (b * self.shape.length) as f64;
                for (r, &i) in rows.iter().enumerate() {
                    for (l, &y) in ys[i].tokens().iter().enumerate() {
                        let logits = out.slice(s![r, l * v..(l + 1) * v]);
                        let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let z: f64 = logits.iter().map(|&x| (x - m).exp()).sum();
                        loss += m + z.ln() - logits[y as usize];
                        for k in 0..v {
                            let p = (logits[k] - m).exp() / z;
                            d[[r, l * v + k]] = (p - f64::from(u8::from(k == y as usize))) / n;
                        }
                    }
                }
                loss /= n;
            }
            (MlpHead::Scalar, MlpTargets::Values(ys)) => {
                let n = b as f64;
                for (r, &i) in rows.iter().enumerate() {
                    let e = out[[r, 0]] - ys[i];
                    loss += e * e;
                    d[[r, 0]] = 2.0 * e / n;
                }
                loss /= n;
            }
            _ => return Err(Error::contract("MLP head and target kind do not match")),
        }
        Ok((loss, d))
    }

    fn target_len(targets: MlpTargets<'_>) -> usize {
        match targets {
            MlpTargets::Tokens(t) => t.len(),
            MlpTargets::Values(v) => v.len(),
        }
    }

    /// Mean loss over the selected rows and the gradient w.r.t. all parameters.
    pub fn loss_and_grad(
        &self,
        inputs: &[TokenSequence],
        targets: MlpTargets<'_>,
        rows: &[usize],
    ) -> Result<(f64, MlpParams)> {
        let xs: Vec<&TokenSequence> = rows.iter().map(|&i| &inputs[i]).collect();
        let (out, c) = self.forward_cached(&xs);
        let (loss, d_out) = self.loss_terms(&out, targets, rows)?;
        let p = &self.params;
        let mut g = p.zeros_like();

        g.w3 = standard(c.h2.t().dot(&d_out));
        g.b3 = d_out.sum_axis(Axis(0));
        let mut d_a2 = d_out.dot(&p.w3.t());
        d_a2.zip_mut_with(&c.a2, |d, &a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        g.w2 = standard(c.h1.t().dot(&d_a2));
        g.b2 = d_a2.sum_axis(Axis(0));
        let mut d_a1 = d_a2.dot(&p.w2.t());
        d_a1.zip_mut_with(&c.a1, |d, &a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        g.w1 = standard(c.z0.t().dot(&d_a1));
        g.b1 = d_a1.sum_axis(Axis(0));
        let d_z0 = d_a1.dot(&p.w1.t());
        let e = self.shape.embed;
        for (r, x) in xs.iter().enumerate() {
            for (l, &t) in x.tokens().iter().enumerate() {
                let mut row = g.emb.row_mut(t as usize);
                row += &d_z0.slice(s![r, l * e..(l + 1) * e]);
            }
        }
        Ok((loss, g))
    }

    pub fn loss(&self, inputs: &[TokenSequence], targets: MlpTargets<'_>) -> Result<f64> {
        let rows: Vec<usize> = (0..inputs.len()).collect();
        let xs: Vec<&TokenSequence> = inputs.iter().collect();
        let (out, _) = self.forward_cached(&xs);
        Ok(self.loss_terms(&out, targets, &rows)?.0)
    }

    /// Fits the network; returns the mean training loss of every epoch.
    pub fn fit(
        &mut self,
        inputs: &[TokenSequence],
        targets: MlpTargets<'_>,
        cfg: &MlpTrainConfig,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        if inputs.is_empty() || Self::target_len(targets) != inputs.len() {
            return Err(Error::contract("MLP training needs one target per non-empty input"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        if let MlpTargets::Tokens(ys) = targets {
            for y in ys {
                self.check_input(y)?;
            }
        }
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &self.params);
        let n = inputs.len();
        let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            if batch < n {
                shuffle(&mut order, rng);
            }
            let mut total = 0.0;
            for rows in order.chunks(batch) {
                let (loss, grad) = self.loss_and_grad(inputs, targets, rows)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        step: opt.steps() as usize,
                        loss,
                    });
                }
                total += loss * rows.len() as f64;
                opt.update(&mut self.params, &grad);
            }
            history.push(total / n as f64);
        }
        Ok(history)
    }

    /// Decodes every position in parallel: sigmoid >= 0.5 for the binary head,
    /// argmax for the categorical head.
    pub fn step(&self, x: &TokenSequence) -> Result<TokenSequence> {
        self.check_input(x)?;
        let out = self.forward_cached(&[x]).0;
        let row = out.row(0);
        let tokens: Vec<TokenId> = match self.shape.head {
            MlpHead::Binary => row.iter().map(|&z| TokenId::from(z >= 0.0)).collect(),
            MlpHead::Categorical => {
                let v = self.shape.vocab;
                (0..self.shape.length)
                    .map(|l| argmax(row.slice(s![l * v..(l + 1) * v]).iter().copied()) as TokenId)
                    .collect()
            }
            MlpHead::Scalar => return Err(Error::contract("a scalar MLP cannot produce a next state")),
        };
        Ok(TokenSequence::new(tokens))
    }

    /// Scalar head prediction.
    pub fn predict(&self, x: &TokenSequence) -> Result<f64> {
        if self.shape.head != MlpHead::Scalar {
            return Err(Error::contract("predict needs a scalar head"));
        }
        self.check_input(x)?;
        Ok(self.forward_cached(&[x]).0[[0, 0]])
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Fisher-Yates over the crate's stream (kept local so the draw sequence is
/// pinned by this code rather than by a library version).
pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut RngStream) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}
