//! A small conditional sequence model with hand-written gradients.
//!
//! Encoder: the condition tokens (ignoring `<pad>`) are embedded and pooled
//! twice, once uniformly and once with recency weights `gamma^(n-1-i)`, then
//! `c = tanh(Wu·mean + Wd·recent + bc)`.
//!
//! Decoder: an Elman recurrence started at `h = c`,
//! `h_t = tanh(Wx·emb(y_{t-1}) + Wh·h_{t-1} + Wc·c + bh)`, `p_t = softmax(Wo·h_t + bo)`.
//! The first input is `<bos>` and every target ends with `<eos>`.
//!
//! Loss is the mean negative log-likelihood per target token. Parameters live
//! in one flat `Vec<f64>` so the optimizer and the finite-difference checker
//! can treat them uniformly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{non_empty, Backend, BackendError, GenRequest};
use crate::text::Tokenizer;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

const PAD_ID: usize = 0;
const UNK_ID: usize = 1;
const BOS_ID: usize = 2;
const EOS_ID: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in [PAD, UNK, BOS, EOS] {
            v.add(t);
        }
        v
    }

    pub fn from_sequences<'a, I, S>(seqs: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Vocab::new();
        for seq in seqs {
            for t in seq {
                v.add(t.as_ref());
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Condition side: unknown tokens map to `<unk>`.
    pub fn encode_condition<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID)).collect()
    }

    /// Target side: unknown tokens are an error naming the token.
    pub fn encode_target<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, BackendError> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).ok_or_else(|| BackendError::VocabularyOverflow { token: t.as_ref().to_string() })
            })
            .collect()
    }

    fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub recency: f64,
    pub init_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { embed_dim: 32, hidden_dim: 96, recency: 0.9, init_scale: 0.1 }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    e: usize,
    h: usize,
    enc_emb: usize,
    wu: usize,
    wd: usize,
    bc: usize,
    dec_emb: usize,
    wx: usize,
    wh: usize,
    wc: usize,
    bh: usize,
    wo: usize,
    bo: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, e: usize, h: usize) -> Self {
        let enc_emb = 0;
        let wu = enc_emb + v * e;
        let wd = wu + h * e;
        let bc = wd + h * e;
        let dec_emb = bc + h;
        let wx = dec_emb + v * e;
        let wh = wx + h * e;
        let wc = wh + h * h;
        let bh = wc + h * h;
        let wo = bh + h;
        let bo = wo + v * h;
        let total = bo + v;
        Layout { v, e, h, enc_emb, wu, wd, bc, dec_emb, wx, wh, wc, bh, wo, bo, total }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub vocab: Vocab,
    params: Vec<f64>,
}

/// y = W x for a row-major `rows x cols` block starting at `w`.
fn matvec(p: &[f64], w: usize, rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    for (r, out) in y.iter_mut().enumerate().take(rows) {
        let row = &p[w + r * cols..w + (r + 1) * cols];
        *out += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// y += W^T x.
fn matvec_t(p: &[f64], w: usize, rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    for (r, &xr) in x.iter().enumerate().take(rows) {
        if xr == 0.0 {
            continue;
        }
        let row = &p[w + r * cols..w + (r + 1) * cols];
        for (yc, a) in y.iter_mut().zip(row) {
            *yc += a * xr;
        }
    }
}

/// G += x ⊗ y for the block at `w`.
fn outer_acc(g: &mut [f64], w: usize, x: &[f64], y: &[f64]) {
    let cols = y.len();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        let row = &mut g[w + r * cols..w + (r + 1) * cols];
        for (gc, yc) in row.iter_mut().zip(y) {
            *gc += xr * yc;
        }
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

struct Encoded {
    ids: Vec<usize>,
    weights_u: Vec<f64>,
    weights_d: Vec<f64>,
    mu: Vec<f64>,
    md: Vec<f64>,
    c: Vec<f64>,
}

/// A training pair of token ids. `target` excludes the trailing `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdPair {
    pub condition: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop once the epoch loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            target_loss: None,
        }
    }
}

/// `epoch_losses[0]` is the loss before any update; entry `e` is the mean
/// training loss after epoch `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.epoch_losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.epoch_losses.last().expect("report has the initial loss")
    }
}

/// Decoding strategy for generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl ToyModel {
    pub fn new(vocab: Vocab, config: ToyConfig, seed: u64) -> Self {
        let l = Layout::new(vocab.len(), config.embed_dim, config.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; l.total];
        let mut fill = |start: usize, len: usize, scale: f64| {
            for p in &mut params[start..start + len] {
                *p = rng.gen_range(-scale..scale);
            }
        };
        let s = config.init_scale;
        fill(l.enc_emb, l.v * l.e, s);
        fill(l.dec_emb, l.v * l.e, s);
        fill(l.wu, l.h * l.e, 1.0 / (l.e as f64).sqrt());
        fill(l.wd, l.h * l.e, 1.0 / (l.e as f64).sqrt());
        fill(l.wx, l.h * l.e, 1.0 / (l.e as f64).sqrt());
        fill(l.wh, l.h * l.h, 1.0 / (l.h as f64).sqrt());
        fill(l.wc, l.h * l.h, 1.0 / (l.h as f64).sqrt());
        fill(l.wo, l.v * l.h, 1.0 / (l.h as f64).sqrt());
        ToyModel { config, vocab, params }
    }

    /// All output weights zero: every next-token distribution is uniform.
    pub fn uniform(vocab: Vocab, config: ToyConfig, seed: u64) -> Self {
        let mut m = Self::new(vocab, config, seed);
        let l = m.layout();
        for p in &mut m.params[l.wo..l.total] {
            *p = 0.0;
        }
        m
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab.len(), self.config.embed_dim, self.config.hidden_dim)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn encode(&self, condition: &[usize]) -> Encoded {
        let l = self.layout();
        let p = &self.params;
        let ids: Vec<usize> = condition.iter().copied().filter(|&i| i != PAD_ID).collect();
        let n = ids.len();
        let (weights_u, weights_d) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            let wu = vec![1.0 / n as f64; n];
            let raw: Vec<f64> = (0..n).map(|i| self.config.recency.powi((n - 1 - i) as i32)).collect();
            let z: f64 = raw.iter().sum();
            (wu, raw.into_iter().map(|w| w / z).collect())
        };
        let mut mu = vec![0.0; l.e];
        let mut md = vec![0.0; l.e];
        for (k, &id) in ids.iter().enumerate() {
            let emb = &p[l.enc_emb + id * l.e..l.enc_emb + (id + 1) * l.e];
            for j in 0..l.e {
                mu[j] += weights_u[k] * emb[j];
                md[j] += weights_d[k] * emb[j];
            }
        }
        let mut a = p[l.bc..l.bc + l.h].to_vec();
        matvec(p, l.wu, l.h, l.e, &mu, &mut a);
        matvec(p, l.wd, l.h, l.e, &md, &mut a);
        let c = a.into_iter().map(f64::tanh).collect();
        Encoded { ids, weights_u, weights_d, mu, md, c }
    }

    /// One decoder step: returns (h_t, next-token probabilities).
    fn step(&self, wc_c: &[f64], h_prev: &[f64], input: usize) -> (Vec<f64>, Vec<f64>) {
        let l = self.layout();
        let p = &self.params;
        let mut z = wc_c.to_vec();
        let d = &p[l.dec_emb + input * l.e..l.dec_emb + (input + 1) * l.e];
        matvec(p, l.wx, l.h, l.e, d, &mut z);
        matvec(p, l.wh, l.h, l.h, h_prev, &mut z);
        let h: Vec<f64> = z.into_iter().map(f64::tanh).collect();
        let mut o = p[l.bo..l.bo + l.v].to_vec();
        matvec(p, l.wo, l.v, l.h, &h, &mut o);
        softmax_in_place(&mut o);
        (h, o)
    }

    fn wc_c(&self, c: &[f64]) -> Vec<f64> {
        let l = self.layout();
        let mut out = self.params[l.bh..l.bh + l.h].to_vec();
        matvec(&self.params, l.wc, l.h, l.h, c, &mut out);
        out
    }

    /// Mean NLL per target token (including `<eos>`), no gradient.
    pub fn loss_ids(&self, condition: &[usize], target: &[usize]) -> f64 {
        let enc = self.encode(condition);
        let wcc = self.wc_c(&enc.c);
        let mut h = enc.c.clone();
        let mut input = BOS_ID;
        let mut nll = 0.0;
        let steps: Vec<usize> = target.iter().copied().chain(std::iter::once(EOS_ID)).collect();
        for &y in &steps {
            let (h_next, probs) = self.step(&wcc, &h, input);
            nll += neg_ln(probs[y]);
            h = h_next;
            input = y;
        }
        nll / steps.len() as f64
    }

    /// Mean NLL and its gradient w.r.t. all parameters, scaled by `scale`
    /// and accumulated into `grad`.
    pub fn loss_and_grad_ids(&self, condition: &[usize], target: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
        let l = self.layout();
        let p = &self.params;
        let enc = self.encode(condition);
        let wcc = self.wc_c(&enc.c);
        let steps: Vec<usize> = target.iter().copied().chain(std::iter::once(EOS_ID)).collect();
        let t_len = steps.len();
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(t_len + 1);
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut inputs = Vec::with_capacity(t_len);
        hs.push(enc.c.clone());
        let mut input = BOS_ID;
        let mut nll = 0.0;
        for &y in &steps {
            let (h, pr) = self.step(&wcc, hs.last().expect("h"), input);
            nll += neg_ln(pr[y]);
            inputs.push(input);
            hs.push(h);
            probs.push(pr);
            input = y;
        }
        let norm = scale / t_len as f64;
        let mut dh_next = vec![0.0; l.h];
        let mut dc = vec![0.0; l.h];
        for t in (0..t_len).rev() {
            let h = &hs[t + 1];
            let h_prev = &hs[t];
            let mut d_o = probs[t].clone();
            d_o[steps[t]] -= 1.0;
            for v in d_o.iter_mut() {
                *v *= norm;
            }
            outer_acc(grad, l.wo, &d_o, h);
            for (g, v) in grad[l.bo..l.bo + l.v].iter_mut().zip(&d_o) {
                *g += v;
            }
            let mut dh = std::mem::take(&mut dh_next);
            matvec_t(p, l.wo, l.v, l.h, &d_o, &mut dh);
            let dz: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
            let d_in = &p[l.dec_emb + inputs[t] * l.e..l.dec_emb + (inputs[t] + 1) * l.e];
            outer_acc(grad, l.wx, &dz, d_in);
            outer_acc(grad, l.wh, &dz, h_prev);
            outer_acc(grad, l.wc, &dz, &enc.c);
            for (g, v) in grad[l.bh..l.bh + l.h].iter_mut().zip(&dz) {
                *g += v;
            }
            let mut d_emb = vec![0.0; l.e];
            matvec_t(p, l.wx, l.h, l.e, &dz, &mut d_emb);
            let base = l.dec_emb + inputs[t] * l.e;
            for (g, v) in grad[base..base + l.e].iter_mut().zip(&d_emb) {
                *g += v;
            }
            matvec_t(p, l.wc, l.h, l.h, &dz, &mut dc);
            let mut dprev = vec![0.0; l.h];
            matvec_t(p, l.wh, l.h, l.h, &dz, &mut dprev);
            dh_next = dprev;
        }
        // h_{-1} is c itself.
        for (a, b) in dc.iter_mut().zip(&dh_next) {
            *a += b;
        }
        let da: Vec<f64> = dc.iter().zip(&enc.c).map(|(d, c)| d * (1.0 - c * c)).collect();
        outer_acc(grad, l.wu, &da, &enc.mu);
        outer_acc(grad, l.wd, &da, &enc.md);
        for (g, v) in grad[l.bc..l.bc + l.h].iter_mut().zip(&da) {
            *g += v;
        }
        if !enc.ids.is_empty() {
            let mut dmu = vec![0.0; l.e];
            let mut dmd = vec![0.0; l.e];
            matvec_t(p, l.wu, l.h, l.e, &da, &mut dmu);
            matvec_t(p, l.wd, l.h, l.e, &da, &mut dmd);
            for (k, &id) in enc.ids.iter().enumerate() {
                let base = l.enc_emb + id * l.e;
                for j in 0..l.e {
                    grad[base + j] += enc.weights_u[k] * dmu[j] + enc.weights_d[k] * dmd[j];
                }
            }
        }
        nll / t_len as f64
    }

    /// Next-token distribution after `prefix` (computed without the training path).
    pub fn next_token_distribution(&self, condition: &[usize], prefix: &[usize]) -> Vec<f64> {
        let enc = self.encode(condition);
        let wcc = self.wc_c(&enc.c);
        let mut h = enc.c.clone();
        let mut input = BOS_ID;
        for &tok in prefix {
            h = self.step(&wcc, &h, input).0;
            input = tok;
        }
        self.step(&wcc, &h, input).1
    }

    /// Decodes until `<eos>` or `max_len` tokens. Special tokens are never emitted.
    pub fn generate_ids(&self, condition: &[usize], max_len: usize, decoding: Decoding) -> Vec<usize> {
        let enc = self.encode(condition);
        let wcc = self.wc_c(&enc.c);
        let mut h = enc.c.clone();
        let mut input = BOS_ID;
        let mut out = Vec::new();
        let mut rng = match decoding {
            Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        for _ in 0..max_len {
            let (h_next, mut probs) = self.step(&wcc, &h, input);
            h = h_next;
            for special in [PAD_ID, UNK_ID, BOS_ID] {
                probs[special] = 0.0;
            }
            let next = match (&mut rng, decoding) {
                (Some(rng), Decoding::Sample { temperature, .. }) if temperature > 0.0 => {
                    let weights: Vec<f64> = probs.iter().map(|p| p.powf(1.0 / temperature)).collect();
                    let total: f64 = weights.iter().sum();
                    let mut r = rng.gen::<f64>() * total;
                    let mut pick = EOS_ID;
                    for (i, w) in weights.iter().enumerate() {
                        if r < *w {
                            pick = i;
                            break;
                        }
                        r -= w;
                    }
                    pick
                }
                _ => argmax(&probs),
            };
            if next == EOS_ID {
                break;
            }
            out.push(next);
            input = next;
        }
        out
    }

    /// String-level conditional NLL.
    pub fn conditional_nll<S: AsRef<str>, T: AsRef<str>>(
        &self,
        condition: &[S],
        target: &[T],
    ) -> Result<f64, BackendError> {
        if target.is_empty() {
            return Err(BackendError::InvalidRequest("target is empty".into()));
        }
        let c = self.vocab.encode_condition(condition);
        let t = self.vocab.encode_target(target)?;
        Ok(self.loss_ids(&c, &t))
    }

    pub fn generate_tokens<S: AsRef<str>>(&self, condition: &[S], max_len: usize, decoding: Decoding) -> Vec<String> {
        let c = self.vocab.encode_condition(condition);
        self.generate_ids(&c, max_len, decoding).into_iter().map(|i| self.vocab.token(i).to_string()).collect()
    }

    /// Converts string pairs to ids, failing on target tokens outside the vocabulary.
    pub fn encode_pairs<S: AsRef<str>>(&self, pairs: &[(Vec<S>, Vec<S>)]) -> Result<Vec<IdPair>, BackendError> {
        pairs
            .iter()
            .map(|(c, t)| {
                if t.is_empty() {
                    return Err(BackendError::InvalidRequest("target is empty".into()));
                }
                Ok(IdPair { condition: self.vocab.encode_condition(c), target: self.vocab.encode_target(t)? })
            })
            .collect()
    }

    /// Trains on independent pairs.
    pub fn fit(&mut self, pairs: &[IdPair], config: &TrainConfig) -> Result<TrainReport, BackendError> {
        let groups: Vec<Vec<IdPair>> = pairs.iter().map(|p| vec![p.clone()]).collect();
        self.fit_groups(&groups, config)
    }

    /// Mean over groups of the summed member losses.
    pub fn group_loss(&self, groups: &[Vec<IdPair>]) -> f64 {
        let total: f64 = groups
            .par_iter()
            .map(|g| g.iter().map(|p| self.loss_ids(&p.condition, &p.target)).sum::<f64>())
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        total / groups.len() as f64
    }

    /// AdamW over groups of pairs; a group's loss is the sum of its members'
    /// losses and a minibatch gradient is the mean over its groups. Batch
    /// gradients are reduced in a fixed order, so results do not depend on
    /// the thread count.
    pub fn fit_groups(&mut self, groups: &[Vec<IdPair>], config: &TrainConfig) -> Result<TrainReport, BackendError> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(BackendError::InvalidRequest("training needs at least one example".into()));
        }
        let n = self.params.len();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut step = 0i32;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        let initial = self.group_loss(groups);
        if !initial.is_finite() {
            return Err(BackendError::Divergence { epoch: 0 });
        }
        let mut report = TrainReport { epoch_losses: vec![initial] };
        let batch = config.batch_size.max(1);
        for epoch in 1..=config.epochs {
            shuffle(&mut order, &mut rng);
            for chunk in order.chunks(batch) {
                let scale = 1.0 / chunk.len() as f64;
                let grads: Vec<Vec<f64>> = chunk
                    .par_iter()
                    .map(|&gi| {
                        let mut g = vec![0.0; n];
                        for p in &groups[gi] {
                            self.loss_and_grad_ids(&p.condition, &p.target, scale, &mut g);
                        }
                        g
                    })
                    .collect();
                let mut grad = vec![0.0; n];
                for g in &grads {
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                step += 1;
                let bc1 = 1.0 - config.beta1.powi(step);
                let bc2 = 1.0 - config.beta2.powi(step);
                let lr = config.learning_rate;
                for i in 0..n {
                    let g = grad[i];
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                    self.params[i] -= lr * config.weight_decay * self.params[i];
                    self.params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + config.eps);
                }
            }
            let loss = self.group_loss(groups);
            if !loss.is_finite() {
                return Err(BackendError::Divergence { epoch });
            }
            report.epoch_losses.push(loss);
            if config.target_loss.is_some_and(|t| loss < t) {
                break;
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let json = serde_json::to_string(self).map_err(|e| BackendError::Io(e.to_string()))?;
        fs::write(path, json).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        let mut model: ToyModel = serde_json::from_str(&raw).map_err(|e| BackendError::Io(e.to_string()))?;
        model.vocab.rebuild_index();
        if model.params.len() != model.layout().total {
            return Err(BackendError::Io("parameter count does not match vocabulary and dimensions".into()));
        }
        Ok(model)
    }
}

/// `-ln p`, clamped away from infinity; NaN propagates.
fn neg_ln(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        -p.max(f64::MIN_POSITIVE).ln()
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Serves a [`ToyModel`] through the [`Backend`] interface. Segments become
/// `<tag> tokens...`; temperature 0 decodes greedily, otherwise sampling is
/// seeded from the request.
pub struct LocalToyBackend {
    name: String,
    model: ToyModel,
    temperature: f64,
    tokenizer: Tokenizer,
}

impl LocalToyBackend {
    pub fn new(name: &str, model: ToyModel, temperature: f64) -> Self {
        LocalToyBackend { name: name.to_string(), model, temperature, tokenizer: Tokenizer::new() }
    }

    pub fn condition_tokens(&self, request: &GenRequest) -> Vec<String> {
        request_tokens(&self.tokenizer, request)
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

/// Token layout used by token-level backends.
pub fn request_tokens(tokenizer: &Tokenizer, request: &GenRequest) -> Vec<String> {
    let mut out = Vec::new();
    for seg in &request.segments {
        out.push(seg.tag.marker().to_string());
        out.extend(tokenizer.tokenize(&seg.text));
    }
    out
}

impl Backend for LocalToyBackend {
    fn generate(&self, request: &GenRequest) -> Result<String, BackendError> {
        request.validate()?;
        let decoding = if self.temperature > 0.0 {
            Decoding::Sample { temperature: self.temperature, seed: request.seed }
        } else {
            Decoding::Greedy
        };
        let tokens = self.model.generate_tokens(&self.condition_tokens(request), request.max_tokens, decoding);
        non_empty(self.tokenizer.detokenize(&tokens))
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::SegmentTag;
    use proptest::prelude::*;

    fn tiny_vocab() -> Vocab {
        let mut v = Vocab::new();
        for t in ["a", "b", "c", "d", "e", "norwich", "train"] {
            v.add(t);
        }
        v
    }

    fn small() -> ToyConfig {
        ToyConfig { embed_dim: 4, hidden_dim: 5, recency: 0.8, init_scale: 0.5 }
    }

    #[test]
    fn uniform_model_loss_is_ln_v() {
        let v = tiny_vocab();
        let n = v.len() as f64;
        let m = ToyModel::uniform(v, small(), 1);
        let loss = m.conditional_nll(&["a", "b"], &["c", "d"]).unwrap();
        assert!((loss - n.ln()).abs() / n.ln() < 0.01, "{loss}");
        let unconditional = m.conditional_nll::<&str, &str>(&[], &["c"]).unwrap();
        assert!(unconditional.is_finite());
    }

    #[test]
    fn unknown_target_token_is_named() {
        let m = ToyModel::new(tiny_vocab(), small(), 1);
        match m.conditional_nll(&["a"], &["zebra"]) {
            Err(BackendError::VocabularyOverflow { token }) => assert_eq!(token, "zebra"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(m.conditional_nll(&["zebra"], &["a"]).is_ok());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = ToyModel::new(tiny_vocab(), small(), 7);
        let cond = m.vocab.encode_condition(&["a", "b", "<pad>", "norwich"]);
        let target = m.vocab.encode_target(&["train", "c", "d", "norwich"]).unwrap();
        let mut grad = vec![0.0; m.param_count()];
        m.loss_and_grad_ids(&cond, &target, 1.0, &mut grad);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, &analytic) in grad.iter().enumerate() {
            let orig = m.params[i];
            m.params[i] = orig + eps;
            let up = m.loss_ids(&cond, &target);
            m.params[i] = orig - eps;
            let down = m.loss_ids(&cond, &target);
            m.params[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(analytic.abs()).max(1e-7);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn fit_reduces_loss_and_is_deterministic() {
        let v = tiny_vocab();
        let base = ToyModel::new(v, small(), 3);
        let pairs: Vec<IdPair> =
            (0..10).map(|i| IdPair { condition: vec![4 + i % 5], target: vec![4 + (i + 1) % 7, 5] }).collect();
        let cfg = TrainConfig { epochs: 50, learning_rate: 1e-2, seed: 9, ..TrainConfig::default() };
        let mut a = base.clone();
        let mut b = base.clone();
        let ra = a.fit(&pairs, &cfg).unwrap();
        let rb = b.fit(&pairs, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.last() < ra.initial());
        let zero = base.clone().fit(&pairs, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(zero.epoch_losses.len(), 1);
    }

    #[test]
    fn memorizes_single_pair() {
        let mut m = ToyModel::new(tiny_vocab(), ToyConfig { embed_dim: 8, hidden_dim: 16, ..ToyConfig::default() }, 5);
        let pair = m.encode_pairs(&[(vec!["a", "b"], vec!["train", "norwich", "c"])]).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            learning_rate: 1e-2,
            seed: 1,
            target_loss: Some(0.05),
            ..TrainConfig::default()
        };
        let report = m.fit(&pair, &cfg).unwrap();
        assert!(report.last() < 0.1, "{report:?}");
        assert_eq!(m.generate_tokens(&["a", "b"], 10, Decoding::Greedy), vec!["train", "norwich", "c"]);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = ToyModel::new(tiny_vocab(), small(), 2);
        let last = m.params.len() - 1;
        m.params[last] = f64::NAN;
        let pairs = vec![IdPair { condition: vec![4], target: vec![5] }];
        assert!(matches!(m.fit(&pairs, &TrainConfig::default()), Err(BackendError::Divergence { epoch: 0 })));
    }

    #[test]
    fn save_load_round_trip() {
        let m = ToyModel::new(tiny_vocab(), small(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded = ToyModel::load(&path).unwrap();
        assert_eq!(loaded.params(), m.params());
        assert_eq!(loaded.vocab.id("norwich"), m.vocab.id("norwich"));
    }

    #[test]
    fn backend_is_deterministic_per_seed() {
        let b = LocalToyBackend::new("toy", ToyModel::new(tiny_vocab(), small(), 4), 1.0);
        let req = GenRequest { max_tokens: 6, ..GenRequest::new(11).segment(SegmentTag::Context, "a b") };
        let first = b.generate(&req);
        let second = b.generate(&req);
        assert_eq!(format!("{first:?}"), format!("{second:?}"));
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(cond in proptest::collection::vec(0usize..11, 0..6), prefix in proptest::collection::vec(4usize..11, 0..4), seed in 0u64..50) {
            let m = ToyModel::new(tiny_vocab(), small(), seed);
            let p = m.next_token_distribution(&cond, &prefix);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }
    }
}
