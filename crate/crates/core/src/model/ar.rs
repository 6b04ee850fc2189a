//! Small causal self-attention network over episode token streams.
//!
//! Token and learned absolute position embeddings feed a stack of
//! pre-residual blocks (multi-head causal attention, then a ReLU feed-forward
//! layer) and a linear read-out over the full vocabulary. Training uses
//! teacher forcing with a per-token loss mask; generation goes through
//! [`ArSession`], which caches keys and values so each new token costs one
//! row of work.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::adam::{standard, Adam, AdamConfig, Parameters};
use crate::model::mlp::shuffle;
use crate::rng::RngStream;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArShape {
    pub vocab: usize,
    pub context: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
}

impl ArShape {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            errs.push(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ff == 0 || self.context < 2 || self.vocab < 2 {
            errs.push("layers, ff, context and vocab must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl BlockParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl ArParams {
    fn zeros(shape: &ArShape) -> Self {
        Self {
            tok: Array2::zeros((shape.vocab, shape.d_model)),
            pos: Array2::zeros((shape.context, shape.d_model)),
            blocks: (0..shape.layers)
                .map(|_| BlockParams::zeros(shape.d_model, shape.ff))
                .collect(),
            w_out: Array2::zeros((shape.d_model, shape.vocab)),
            b_out: Array1::zeros(shape.vocab),
        }
    }

    fn add_assign(&mut self, other: &ArParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Parameters for ArParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.tok.as_slice().unwrap(), self.pos.as_slice().unwrap()];
        for b in &self.blocks {
            v.extend([
                b.wq.as_slice().unwrap(),
                b.wk.as_slice().unwrap(),
                b.wv.as_slice().unwrap(),
                b.wo.as_slice().unwrap(),
                b.w1.as_slice().unwrap(),
                b.b1.as_slice().unwrap(),
                b.w2.as_slice().unwrap(),
                b.b2.as_slice().unwrap(),
            ]);
        }
        v.push(self.w_out.as_slice().unwrap());
        v.push(self.b_out.as_slice().unwrap());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.tok.as_slice_mut().unwrap(), self.pos.as_slice_mut().unwrap()];
        for b in &mut self.blocks {
            v.extend([
                b.wq.as_slice_mut().unwrap(),
                b.wk.as_slice_mut().unwrap(),
                b.wv.as_slice_mut().unwrap(),
                b.wo.as_slice_mut().unwrap(),
                b.w1.as_slice_mut().unwrap(),
                b.b1.as_slice_mut().unwrap(),
                b.w2.as_slice_mut().unwrap(),
                b.b2.as_slice_mut().unwrap(),
            ]);
        }
        v.push(self.w_out.as_slice_mut().unwrap());
        v.push(self.b_out.as_slice_mut().unwrap());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub init_scale: f64,
}

impl Default for ArTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            init_scale: 1.0,
        }
    }
}

/// One training sequence: token ids and, per token, whether predicting it
/// contributes to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl MaskedSequence {
    pub fn targets(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    mid: Array2<f64>,
    z1: Array2<f64>,
    r: Array2<f64>,
}

/// Chunks per minibatch for the parallel gradient reduction. Fixed so the
/// floating-point summation order does not depend on the thread count.
const GRAD_CHUNKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub shape: ArShape,
    pub params: ArParams,
}

impl ArModel {
    pub fn new(shape: ArShape, init_scale: f64, rng: &mut RngStream) -> Result<Self> {
        shape.validate()?;
        let mut params = ArParams::zeros(&shape);
        let d = shape.d_model as f64;
        let emb_bound = 0.1 * init_scale;
        let fill = |a: &mut [f64], bound: f64, rng: &mut RngStream| {
            for x in a {
                *x = rng.gen_range(-bound..=bound);
            }
        };
        fill(params.tok.as_slice_mut().unwrap(), emb_bound, rng);
        fill(params.pos.as_slice_mut().unwrap(), emb_bound, rng);
        for b in &mut params.blocks {
            let lin = init_scale / d.sqrt();
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1] {
                fill(w.as_slice_mut().unwrap(), lin, rng);
            }
            fill(b.w2.as_slice_mut().unwrap(), init_scale / (shape.ff as f64).sqrt(), rng);
        }
        fill(params.w_out.as_slice_mut().unwrap(), init_scale / d.sqrt(), rng);
        Ok(Self { shape, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.shape.context {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds context window {}",
                tokens.len(),
                self.shape.context
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(Error::contract(format!("token {t} outside model vocabulary")));
        }
        Ok(())
    }

    fn block_forward(&self, b: &BlockParams, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let t = x.nrows();
        let d = self.shape.d_model;
        let dh = d / self.shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = x.dot(&b.wq);
        let k = x.dot(&b.wk);
        let v = x.dot(&b.wv);
        let mut o = Array2::zeros((t, d));
        let mut att = Vec::with_capacity(self.shape.heads);
        for h in 0..self.shape.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut row) in a.outer_iter_mut().enumerate() {
                let m = row
                    .slice(s![..=i])
                    .iter()
                    .fold(f64::NEG_INFINITY, |acc, &z| acc.max(z * scale));
                let mut sum = 0.0;
                for (j, z) in row.iter_mut().enumerate() {
                    if j <= i {
                        *z = (*z * scale - m).exp();
                        sum += *z;
                    } else {
                        *z = 0.0;
                    }
                }
                row.mapv_inplace(|z| z / sum);
            }
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            att.push(a);
        }
        let mid = &x + &o.dot(&b.wo);
        let z1 = mid.dot(&b.w1) + &b.b1;
        let r = z1.mapv(|z| z.max(0.0));
        let out = &mid + &(r.dot(&b.w2) + &b.b2);
        (
            out,
            BlockCache {
                x,
                q,
                k,
                v,
                att,
                o,
                mid,
                z1,
                r,
            },
        )
    }

    fn block_backward(&self, b: &BlockParams, c: &BlockCache, d_out: Array2<f64>, g: &mut BlockParams) -> Array2<f64> {
        let dh = self.shape.d_model / self.shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        g.w2 += &c.r.t().dot(&d_out);
        g.b2 += &d_out.sum_axis(Axis(0));
        let mut d_z1 = d_out.dot(&b.w2.t());
        d_z1.zip_mut_with(&c.z1, |d, &z| {
            if z <= 0.0 {
                *d = 0.0
            }
        });
        g.w1 += &c.mid.t().dot(&d_z1);
        g.b1 += &d_z1.sum_axis(Axis(0));
        let d_mid = d_out + d_z1.dot(&b.w1.t());

        // attention branch
        g.wo += &c.o.t().dot(&d_mid);
        let d_o = d_mid.dot(&b.wo.t());
        let mut d_q = Array2::zeros(c.q.raw_dim());
        let mut d_k = Array2::zeros(c.k.raw_dim());
        let mut d_v = Array2::zeros(c.v.raw_dim());
        for h in 0..self.shape.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &c.att[h];
            let d_oh = d_o.slice(cols);
            let d_a = d_oh.dot(&c.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&a.t().dot(&d_oh));
            // softmax backward, row by row
            let mut d_s = &d_a * a;
            let row_dot = d_s.sum_axis(Axis(1));
            for (i, mut row) in d_s.outer_iter_mut().enumerate() {
                let ai = a.row(i);
                for (j, z) in row.iter_mut().enumerate() {
                    *z -= ai[j] * row_dot[i];
                    *z *= scale;
                }
            }
            d_q.slice_mut(cols).assign(&d_s.dot(&c.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&c.q.slice(cols)));
        }
        g.wq += &c.x.t().dot(&d_q);
        g.wk += &c.x.t().dot(&d_k);
        g.wv += &c.x.t().dot(&d_v);
        d_mid + d_q.dot(&b.wq.t()) + d_k.dot(&b.wk.t()) + d_v.dot(&b.wv.t())
    }

    fn embed(&self, tokens: &[TokenId]) -> Array2<f64> {
        let mut x = Array2::zeros((tokens.len(), self.shape.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.params.tok.row(t as usize));
            row += &self.params.pos.row(i);
        }
        x
    }

    /// Next-token logits at every position (row `i` predicts token `i + 1`).
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for b in &self.params.blocks {
            x = self.block_forward(b, x).0;
        }
        Ok(x.dot(&self.params.w_out) + &self.params.b_out)
    }

    /// Summed masked cross-entropy of one sequence, its target count, and the
    /// gradient of `sum / norm`.
    fn sequence_grad(&self, seq: &MaskedSequence, norm: f64) -> (f64, ArParams) {
        let tokens = &seq.tokens;
        let mut grads = ArParams::zeros(&self.shape);
        if tokens.len() < 2 {
            return (0.0, grads);
        }
        let input = &tokens[..tokens.len() - 1];
        let mut x = self.embed(input);
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for b in &self.params.blocks {
            let (y, c) = self.block_forward(b, x);
            caches.push(c);
            x = y;
        }
        let logits = x.dot(&self.params.w_out) + &self.params.b_out;
        let mut d_logits = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for (i, row) in logits.outer_iter().enumerate() {
            if !seq.loss_mask[i + 1] {
                continue;
            }
            let target = tokens[i + 1] as usize;
            let (lse, probs) = log_softmax_parts(row);
            loss += lse - row[target];
            let mut d = d_logits.row_mut(i);
            d.assign(&probs);
            d[target] -= 1.0;
            d.mapv_inplace(|z| z / norm);
        }
        grads.w_out = standard(x.t().dot(&d_logits));
        grads.b_out = d_logits.sum_axis(Axis(0));
        let mut d_x = d_logits.dot(&self.params.w_out.t());
        for (bi, b) in self.params.blocks.iter().enumerate().rev() {
            d_x = self.block_backward(b, &caches[bi], d_x, &mut grads.blocks[bi]);
        }
        for (i, &t) in input.iter().enumerate() {
            let r = d_x.row(i);
            let mut tr = grads.tok.row_mut(t as usize);
            tr += &r;
            let mut pr = grads.pos.row_mut(i);
            pr += &r;
        }
        (loss, grads)
    }

    /// Mean masked cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[&MaskedSequence]) -> (f64, ArParams) {
        let norm = batch.iter().map(|s| s.targets()).sum::<usize>().max(1) as f64;
        let chunk = batch.len().div_ceil(GRAD_CHUNKS).max(1);
        let partials: Vec<(f64, ArParams)> = batch
            .par_chunks(chunk)
            .map(|seqs| {
                let mut total = 0.0;
                let mut acc = ArParams::zeros(&self.shape);
                for s in seqs {
                    let (l, g) = self.sequence_grad(s, norm);
                    total += l;
                    acc.add_assign(&g);
                }
                (total, acc)
            })
            .collect();
        let mut loss = 0.0;
        let mut grads = ArParams::zeros(&self.shape);
        for (l, g) in partials {
            loss += l;
            grads.add_assign(&g);
        }
        (loss / norm, grads)
    }

    pub fn loss(&self, batch: &[&MaskedSequence]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for seq in batch {
            let logits = self.logits(&seq.tokens[..seq.tokens.len().saturating_sub(1)])?;
            for (i, row) in logits.outer_iter().enumerate() {
                if seq.loss_mask[i + 1] {
                    let (lse, _) = log_softmax_parts(row);
                    total += lse - row[seq.tokens[i + 1] as usize];
                    count += 1;
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// Teacher-forced training; returns the mean loss of every epoch.
    pub fn fit(&mut self, data: &[MaskedSequence], cfg: &ArTrainConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::contract("no training sequences"));
        }
        for (index, seq) in data.iter().enumerate() {
            if seq.tokens.len() > self.shape.context {
                return Err(Error::ContextOverflow {
                    index,
                    len: seq.tokens.len(),
                    window: self.shape.context,
                });
            }
            if seq.loss_mask.len() != seq.tokens.len() {
                return Err(Error::contract(format!("sequence {index}: mask length differs from token count")));
            }
            self.check_tokens(&seq.tokens)?;
        }
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &self.params);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = cfg.batch_size.clamp(1, data.len());
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            shuffle(&mut order, rng);
            let mut total = 0.0;
            let mut weight = 0.0;
            for rows in order.chunks(batch) {
                let seqs: Vec<&MaskedSequence> = rows.iter().map(|&i| &data[i]).collect();
                let (loss, grad) = self.loss_and_grad(&seqs);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        step: opt.steps() as usize,
                        loss,
                    });
                }
                let w = seqs.iter().map(|s| s.targets()).sum::<usize>() as f64;
                total += loss * w;
                weight += w;
                opt.update(&mut self.params, &grad);
            }
            history.push(total / weight.max(1.0));
        }
        Ok(history)
    }

    pub fn session(&self) -> ArSession<'_> {
        ArSession {
            model: self,
            keys: vec![Vec::new(); self.shape.layers],
            values: vec![Vec::new(); self.shape.layers],
            len: 0,
            last: None,
        }
    }
}

fn log_softmax_parts(row: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = row.mapv(|z| (z - m).exp());
    let sum = p.sum();
    p /= sum;
    (m + sum.ln(), p)
}

/// Normalized next-token distribution from logits.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    log_softmax_parts(logits).1
}

/// Incremental decoding state with cached keys and values.
pub struct ArSession<'a> {
    model: &'a ArModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    last: Option<Array1<f64>>,
}

impl ArSession<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Room left in the context window.
    pub fn remaining(&self) -> usize {
        self.model.shape.context - self.len
    }

    /// Appends a token; the logits for the following token become available
    /// through [`ArSession::logits`].
    pub fn push(&mut self, token: TokenId) -> Result<()> {
        let shape = &self.model.shape;
        if self.len >= shape.context {
            return Err(Error::contract("context window exhausted"));
        }
        if token as usize >= shape.vocab {
            return Err(Error::contract(format!("token {token} outside model vocabulary")));
        }
        let p = &self.model.params;
        let d = shape.d_model;
        let dh = d / shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = &p.tok.row(token as usize) + &p.pos.row(self.len);
        let n = self.len + 1;
        for (li, b) in p.blocks.iter().enumerate() {
            let q = h.dot(&b.wq);
            self.keys[li].extend(h.dot(&b.wk).iter());
            self.values[li].extend(h.dot(&b.wv).iter());
            let keys = ndarray::ArrayView2::from_shape((n, d), &self.keys[li]).unwrap();
            let vals = ndarray::ArrayView2::from_shape((n, d), &self.values[li]).unwrap();
            let mut o = Array1::zeros(d);
            for hd in 0..shape.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores = keys.slice(s![.., cols.clone()]).dot(&q.slice(s![cols.clone()])) * scale;
                let a = softmax(scores.view());
                o.slice_mut(s![cols.clone()]).assign(&vals.slice(s![.., cols]).t().dot(&a));
            }
            let mid = &h + &o.dot(&b.wo);
            let r = (mid.dot(&b.w1) + &b.b1).mapv(|z| z.max(0.0));
            h = &mid + &(r.dot(&b.w2) + &b.b2);
        }
        self.last = Some(h.dot(&p.w_out) + &p.b_out);
        self.len = n;
        Ok(())
    }

    pub fn push_all(&mut self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.push(t))
    }

    pub fn logits(&self) -> Option<&Array1<f64>> {
        self.last.as_ref()
    }
}
