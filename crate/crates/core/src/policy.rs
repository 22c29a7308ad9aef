//! Single-block causal attention policy over token prefixes, with hand-written
//! reverse-mode gradients and an Adam optimizer.
//!
//! Per position `j` (pre-norm residual block, final norm, linear head):
//!
//! ```text
//! x   = tok[s_j] + pos[j]
//! x2  = x  + attn(ln1(x))          causal, `heads` heads
//! x3  = x2 + w2 gelu(w1 ln2(x2))
//! out = softmax(head(lnf(x3)))     distribution over the next token
//! ```
//!
//! The full forward pass is the incremental one run position by position, so a
//! cache built while sampling an episode can be handed straight to
//! [`PolicyParams::backward`].

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab: crate::token_repeat::VOCAB_SIZE,
            max_len: crate::token_repeat::SEQUENCE_LENGTH,
            d_model: 32,
            d_ff: 64,
            heads: 2,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.max_len == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(invalid("policy dimensions must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Weight matrices and embeddings, as opposed to biases and norm gains.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Offsets {
    tok: usize,
    pos: usize,
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    lnf_g: usize,
    lnf_b: usize,
    wh: usize,
    bh: usize,
}

fn layout(c: &PolicyConfig) -> (Vec<ParamGroup>, Offsets) {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab);
    let spec: [(&'static str, Vec<usize>); 22] = [
        ("tok_emb", vec![v, d]),
        ("pos_emb", vec![c.max_len, d]),
        ("ln1_gain", vec![d]),
        ("ln1_bias", vec![d]),
        ("attn_wq", vec![d, d]),
        ("attn_bq", vec![d]),
        ("attn_wk", vec![d, d]),
        ("attn_bk", vec![d]),
        ("attn_wv", vec![d, d]),
        ("attn_bv", vec![d]),
        ("attn_wo", vec![d, d]),
        ("attn_bo", vec![d]),
        ("ln2_gain", vec![d]),
        ("ln2_bias", vec![d]),
        ("ff_w1", vec![d, f]),
        ("ff_b1", vec![f]),
        ("ff_w2", vec![f, d]),
        ("ff_b2", vec![d]),
        ("lnf_gain", vec![d]),
        ("lnf_bias", vec![d]),
        ("head_w", vec![d, v]),
        ("head_b", vec![v]),
    ];
    let mut groups = Vec::with_capacity(spec.len());
    let mut offset = 0;
    for (name, shape) in spec {
        let len: usize = shape.iter().product();
        groups.push(ParamGroup { name, shape, offset });
        offset += len;
    }
    let o = |k: usize| groups[k].offset;
    let offsets = Offsets {
        tok: o(0),
        pos: o(1),
        ln1_g: o(2),
        ln1_b: o(3),
        wq: o(4),
        bq: o(5),
        wk: o(6),
        bk: o(7),
        wv: o(8),
        bv: o(9),
        wo: o(10),
        bo: o(11),
        ln2_g: o(12),
        ln2_b: o(13),
        w1: o(14),
        b1: o(15),
        w2: o(16),
        b2: o(17),
        lnf_g: o(18),
        lnf_b: o(19),
        wh: o(20),
        bh: o(21),
    };
    (groups, offsets)
}

/// Activations recorded for one position.
#[derive(Debug, Clone)]
struct PositionCache {
    token: usize,
    xhat1: Vec<f64>,
    rstd1: f64,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][i]` for `i <= j`, flattened head-major.
    attn: Vec<f64>,
    a: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: f64,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    xhatf: Vec<f64>,
    rstdf: f64,
    hf: Vec<f64>,
    probs: Vec<f64>,
}

/// Per-position activations of a prefix, extended one token at a time.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    positions: Vec<PositionCache>,
}

impl ForwardCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Next-token distribution at position `j`.
    pub fn probs(&self, j: usize) -> &[f64] {
        &self.positions[j].probs
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().map(|p| p.token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    groups: Vec<ParamGroup>,
    off: Offsets,
    pub values: Vec<f64>,
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

fn affine_back(x: &[f64], w: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let n = dout.len();
    for (b, d) in db.iter_mut().zip(dout) {
        *b += d;
    }
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        let drow = &mut dw[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for ((dwv, wv), d) in drow.iter_mut().zip(row).zip(dout) {
            *dwv += xi * d;
            acc += wv * d;
        }
        dx[i] += acc;
    }
}

/// Returns `(xhat, rstd)` and writes `gain * xhat + bias` into `out`.
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    for (((o, xh), g), b) in out.iter_mut().zip(&xhat).zip(gain).zip(bias) {
        *o = g * xh + b;
    }
    (xhat, rstd)
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_back(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    for k in 0..dy.len() {
        dgain[k] += dy[k] * xhat[k];
        dbias[k] += dy[k];
        mean_d += dxhat[k];
        mean_dx += dxhat[k] * xhat[k];
    }
    mean_d /= n;
    mean_dx /= n;
    for k in 0..dy.len() {
        dx[k] += rstd * (dxhat[k] - mean_d - xhat[k] * mean_dx);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl PolicyParams {
    /// All-zero parameters; the policy is exactly uniform.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let (groups, off) = layout(&config);
        let total = groups.last().map(|g| g.offset + g.len()).unwrap_or(0);
        Ok(Self {
            config,
            groups,
            off,
            values: vec![0.0; total],
        })
    }

    /// Matrices and embeddings drawn from `N(0, std^2)`, biases zero, norm
    /// gains one.
    pub fn init(config: PolicyConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        for g in p.groups.clone() {
            let slice = &mut p.values[g.range()];
            if g.is_matrix() {
                slice.iter_mut().for_each(|v| *v = normal.sample(rng));
            } else if g.name.ends_with("_gain") {
                slice.fill(1.0);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .map(|g| &self.values[g.range()])
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.values[offset..offset + len]
    }

    /// Appends `token` to the cached prefix and returns the next-token
    /// distribution at its position.
    pub fn step<'c>(&self, cache: &'c mut ForwardCache, token: usize) -> Result<&'c [f64]> {
        let c = &self.config;
        let j = cache.positions.len();
        if j >= c.max_len {
            return Err(Error::PrefixLength(j + 1, c.max_len));
        }
        if token >= c.vocab {
            return Err(Error::TokenOutOfVocab(token.min(u8::MAX as usize) as u8));
        }
        let (d, f, v, nh, dh) = (c.d_model, c.d_ff, c.vocab, c.heads, c.head_dim());
        let o = &self.off;

        let x: Vec<f64> = self
            .slice(o.tok + token * d, d)
            .iter()
            .zip(self.slice(o.pos + j * d, d))
            .map(|(a, b)| a + b)
            .collect();
        let mut h1 = vec![0.0; d];
        let (xhat1, rstd1) = layer_norm(&x, self.slice(o.ln1_g, d), self.slice(o.ln1_b, d), &mut h1);
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut vv = vec![0.0; d];
        affine(&h1, self.slice(o.wq, d * d), self.slice(o.bq, d), &mut q);
        affine(&h1, self.slice(o.wk, d * d), self.slice(o.bk, d), &mut k);
        affine(&h1, self.slice(o.wv, d * d), self.slice(o.bv, d), &mut vv);

        let scale = 1.0 / (dh as f64).sqrt();
        let n = j + 1;
        let mut attn = vec![0.0; nh * n];
        let mut a = vec![0.0; d];
        for h in 0..nh {
            let hs = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..n)
                .map(|i| {
                    let ki = if i == j { &k } else { &cache.positions[i].k };
                    q[hs.clone()].iter().zip(&ki[hs.clone()]).map(|(x, y)| x * y).sum::<f64>() * scale
                })
                .collect();
            let p = softmax(&scores);
            for (i, pi) in p.iter().enumerate() {
                let vi = if i == j { &vv } else { &cache.positions[i].v };
                for (ak, vk) in a[hs.clone()].iter_mut().zip(&vi[hs.clone()]) {
                    *ak += pi * vk;
                }
            }
            attn[h * n..(h + 1) * n].copy_from_slice(&p);
        }
        let mut proj = vec![0.0; d];
        affine(&a, self.slice(o.wo, d * d), self.slice(o.bo, d), &mut proj);
        let x2: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let mut h2 = vec![0.0; d];
        let (xhat2, rstd2) = layer_norm(&x2, self.slice(o.ln2_g, d), self.slice(o.ln2_b, d), &mut h2);
        let mut u = vec![0.0; f];
        affine(&h2, self.slice(o.w1, d * f), self.slice(o.b1, f), &mut u);
        let g: Vec<f64> = u.iter().map(|x| gelu(*x)).collect();
        let mut ff = vec![0.0; d];
        affine(&g, self.slice(o.w2, f * d), self.slice(o.b2, d), &mut ff);
        let x3: Vec<f64> = x2.iter().zip(&ff).map(|(a, b)| a + b).collect();

        let mut hf = vec![0.0; d];
        let (xhatf, rstdf) = layer_norm(&x3, self.slice(o.lnf_g, d), self.slice(o.lnf_b, d), &mut hf);
        let mut logits = vec![0.0; v];
        affine(&hf, self.slice(o.wh, d * v), self.slice(o.bh, v), &mut logits);
        let probs = softmax(&logits);

        cache.positions.push(PositionCache {
            token,
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v: vv,
            attn,
            a,
            xhat2,
            rstd2,
            h2,
            u,
            g,
            xhatf,
            rstdf,
            hf,
            probs,
        });
        Ok(&cache.positions[j].probs)
    }

    /// Runs the whole prefix and returns its cache.
    pub fn forward_cache(&self, prefix: &[usize]) -> Result<ForwardCache> {
        if prefix.is_empty() {
            return Err(invalid("prefix must contain at least the prompt token"));
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::PrefixLength(prefix.len(), self.config.max_len));
        }
        let mut cache = ForwardCache::new();
        for t in prefix {
            self.step(&mut cache, *t)?;
        }
        Ok(cache)
    }

    /// Next-token distribution after `prefix`.
    pub fn forward(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let cache = self.forward_cache(prefix)?;
        Ok(cache.probs(cache.len() - 1).to_vec())
    }

    /// Adds to `grad` the gradient of `sum_j dlogits[j] . logits_j`, where
    /// `dlogits` is `cache.len() * vocab` long.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) -> Result<()> {
        let c = &self.config;
        let (d, f, v, nh, dh) = (c.d_model, c.d_ff, c.vocab, c.heads, c.head_dim());
        let n = cache.len();
        if dlogits.len() != n * v {
            return Err(Error::LengthMismatch {
                what: "logit gradients",
                expected: n * v,
                got: dlogits.len(),
            });
        }
        if grad.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                what: "gradient buffer",
                expected: self.values.len(),
                got: grad.len(),
            });
        }
        let o = self.off;
        let w = &self.values;

        // Split the gradient buffer so groups can be borrowed independently.
        macro_rules! g {
            ($off:expr, $len:expr) => {
                $off..$off + $len
            };
        }

        // Head, final norm, feed-forward and second norm: position-local.
        let mut dx2_all = vec![vec![0.0; d]; n];
        for (j, pc) in cache.positions.iter().enumerate() {
            let dl = &dlogits[j * v..(j + 1) * v];
            let mut dhf = vec![0.0; d];
            {
                let (head_w, rest) = grad[o.wh..].split_at_mut(d * v);
                affine_back(&pc.hf, &w[g!(o.wh, d * v)], dl, head_w, &mut rest[..v], &mut dhf);
            }
            let mut dx3 = vec![0.0; d];
            {
                let (gain, bias) = grad[o.lnf_g..].split_at_mut(d);
                layer_norm_back(&dhf, &pc.xhatf, pc.rstdf, &w[g!(o.lnf_g, d)], gain, &mut bias[..d], &mut dx3);
            }
            let dx2 = &mut dx2_all[j];
            dx2.copy_from_slice(&dx3);
            let mut dg = vec![0.0; f];
            {
                let (w2, rest) = grad[o.w2..].split_at_mut(f * d);
                affine_back(&pc.g, &w[g!(o.w2, f * d)], &dx3, w2, &mut rest[..d], &mut dg);
            }
            let du: Vec<f64> = dg.iter().zip(&pc.u).map(|(x, u)| x * gelu_grad(*u)).collect();
            let mut dh2 = vec![0.0; d];
            {
                let (w1, rest) = grad[o.w1..].split_at_mut(d * f);
                affine_back(&pc.h2, &w[g!(o.w1, d * f)], &du, w1, &mut rest[..f], &mut dh2);
            }
            {
                let (gain, bias) = grad[o.ln2_g..].split_at_mut(d);
                layer_norm_back(&dh2, &pc.xhat2, pc.rstd2, &w[g!(o.ln2_g, d)], gain, &mut bias[..d], dx2);
            }
        }

        // Attention: queries at j see keys and values at i <= j.
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for (j, pc) in cache.positions.iter().enumerate() {
            let mut da = vec![0.0; d];
            {
                let (wo, rest) = grad[o.wo..].split_at_mut(d * d);
                affine_back(&pc.a, &w[g!(o.wo, d * d)], &dx2_all[j], wo, &mut rest[..d], &mut da);
            }
            let len = j + 1;
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let p = &pc.attn[h * len..(h + 1) * len];
                let dp: Vec<f64> = (0..len)
                    .map(|i| {
                        da[hs.clone()]
                            .iter()
                            .zip(&cache.positions[i].v[hs.clone()])
                            .map(|(x, y)| x * y)
                            .sum()
                    })
                    .collect();
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for i in 0..len {
                    for (dvk, dak) in dv[i][hs.clone()].iter_mut().zip(&da[hs.clone()]) {
                        *dvk += p[i] * dak;
                    }
                    let ds = p[i] * (dp[i] - dot) * scale;
                    let ki = &cache.positions[i].k;
                    for (qq, kk) in dq[j][hs.clone()].iter_mut().zip(&ki[hs.clone()]) {
                        *qq += ds * kk;
                    }
                    for (kk, qq) in dk[i][hs.clone()].iter_mut().zip(&pc.q[hs.clone()]) {
                        *kk += ds * qq;
                    }
                }
            }
        }

        // Projections, first norm, embeddings.
        for (j, pc) in cache.positions.iter().enumerate() {
            let mut dh1 = vec![0.0; d];
            for (wo_, dvec) in [(o.wq, &dq[j]), (o.wk, &dk[j]), (o.wv, &dv[j])] {
                let (wm, rest) = grad[wo_..].split_at_mut(d * d);
                affine_back(&pc.h1, &w[g!(wo_, d * d)], dvec, wm, &mut rest[..d], &mut dh1);
            }
            let mut dx = dx2_all[j].clone();
            {
                let (gain, bias) = grad[o.ln1_g..].split_at_mut(d);
                layer_norm_back(&dh1, &pc.xhat1, pc.rstd1, &w[g!(o.ln1_g, d)], gain, &mut bias[..d], &mut dx);
            }
            for (gv, x) in grad[g!(o.tok + pc.token * d, d)].iter_mut().zip(&dx) {
                *gv += x;
            }
            for (gv, x) in grad[g!(o.pos + j * d, d)].iter_mut().zip(&dx) {
                *gv += x;
            }
        }
        Ok(())
    }

    /// Gradient of `log pi(action | prefix)` with respect to every parameter.
    pub fn log_prob_grad(&self, prefix: &[usize], action: usize) -> Result<Vec<f64>> {
        let v = self.config.vocab;
        if action >= v {
            return Err(Error::TokenOutOfVocab(action.min(u8::MAX as usize) as u8));
        }
        let cache = self.forward_cache(prefix)?;
        let n = cache.len();
        let mut dl = vec![0.0; n * v];
        let probs = cache.probs(n - 1);
        for k in 0..v {
            dl[(n - 1) * v + k] = f64::from(u8::from(k == action)) - probs[k];
        }
        let mut grad = vec![0.0; self.values.len()];
        self.backward(&cache, &dl, &mut grad)?;
        Ok(grad)
    }

    pub fn log_prob(&self, prefix: &[usize], action: usize) -> Result<f64> {
        let probs = self.forward(prefix)?;
        probs
            .get(action)
            .map(|p| p.ln())
            .ok_or(Error::TokenOutOfVocab(action.min(u8::MAX as usize) as u8))
    }

    /// Adds `sum_t q[t] * grad log pi(actions[t] | s_0..s_t)` to `grad`, where
    /// `cache` holds `s_0..s_{T-1}` and `actions` is `a_0..a_{T-1}`.
    pub fn accumulate_episode(
        &self,
        cache: &ForwardCache,
        actions: &[usize],
        q: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let v = self.config.vocab;
        let n = cache.len();
        if actions.len() != n || q.len() != n {
            return Err(Error::LengthMismatch {
                what: "episode actions and values",
                expected: n,
                got: actions.len().min(q.len()),
            });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("step values"));
        }
        if q.iter().all(|x| *x == 0.0) {
            return Ok(());
        }
        let mut dl = vec![0.0; n * v];
        for t in 0..n {
            let probs = cache.probs(t);
            for k in 0..v {
                let onehot = f64::from(u8::from(k == actions[t]));
                dl[t * v + k] = q[t] * (onehot - probs[k]);
            }
        }
        self.backward(cache, &dl, grad)
    }
}

/// Draws an index from `probs` by inverting the cumulative distribution.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the final partial sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam in the ascent direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moves `params` along `grad`. A gradient with any non-finite entry is
    /// dropped and `false` is returned.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<bool> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                what: "optimizer state",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            log::warn!("skipping update after {} steps: non-finite gradient", self.steps);
            return Ok(false);
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for k in 0..params.len() {
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * grad[k];
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * grad[k] * grad[k];
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            params[k] += learning_rate * mhat / (vhat.sqrt() + eps);
        }
        Ok(true)
    }
}

/// One recorded episode for a batch update.
#[derive(Debug, Clone)]
pub struct EpisodeSample {
    pub cache: ForwardCache,
    pub actions: Vec<usize>,
    pub q: Vec<f64>,
}

/// Batch mean of `sum_t q_t grad log pi(a_t | s_t)`.
pub fn batch_gradient(params: &PolicyParams, batch: &[EpisodeSample]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(invalid("batch must be non-empty"));
    }
    let mut grad = vec![0.0; params.num_params()];
    for ep in batch {
        params.accumulate_episode(&ep.cache, &ep.actions, &ep.q, &mut grad)?;
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(grad)
}

/// Batch-mean policy-gradient step. Returns whether the update was applied.
pub fn policy_gradient_update(
    params: &mut PolicyParams,
    optimizer: &mut Adam,
    batch: &[EpisodeSample],
) -> Result<bool> {
    let grad = batch_gradient(params, batch)?;
    optimizer.step(&mut params.values, &grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serialized parameters plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: PolicyConfig,
    pub seed: u64,
    pub iteration: usize,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_params(params: &PolicyParams, seed: u64, iteration: usize) -> Self {
        let arrays = params
            .groups
            .iter()
            .map(|g| NamedArray {
                name: g.name.to_string(),
                shape: g.shape.clone(),
                values: params.values[g.range()].to_vec(),
            })
            .collect();
        Self {
            config: params.config,
            seed,
            iteration,
            arrays,
        }
    }

    pub fn to_params(&self) -> Result<PolicyParams> {
        let mut params = PolicyParams::zeros(self.config)?;
        if self.arrays.len() != params.groups.len() {
            return Err(Error::LengthMismatch {
                what: "checkpoint arrays",
                expected: params.groups.len(),
                got: self.arrays.len(),
            });
        }
        for (g, a) in params.groups.clone().iter().zip(&self.arrays) {
            if a.name != g.name || a.shape != g.shape || a.values.len() != g.len() {
                return Err(invalid(format!(
                    "checkpoint array {} {:?} does not match {} {:?}",
                    a.name, a.shape, g.name, g.shape
                )));
            }
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("checkpoint values"));
            }
            params.values[g.range()].copy_from_slice(&a.values);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Denominator floor for finite-difference comparisons. Entries whose true
/// gradient is zero (the key bias cancels inside the softmax) would otherwise
/// measure pure rounding noise.
pub const FD_FLOOR: f64 = 1e-5;

/// Largest relative error per parameter group between `analytic` and a
/// central finite difference of `f`, using `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_errors(
    params: &PolicyParams,
    analytic: &[f64],
    step: f64,
    floor: f64,
    coords: Option<&dyn Fn(&ParamGroup) -> Vec<usize>>,
    f: &dyn Fn(&PolicyParams) -> Result<f64>,
) -> Result<Vec<(&'static str, f64)>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.groups.len());
    for g in &params.groups {
        let idx: Vec<usize> = match coords {
            Some(pick) => pick(g),
            None => (0..g.len()).collect(),
        };
        let mut worst: f64 = 0.0;
        for k in idx {
            let at = g.offset + k;
            let orig = probe.values[at];
            probe.values[at] = orig + step;
            let up = f(&probe)?;
            probe.values[at] = orig - step;
            let down = f(&probe)?;
            probe.values[at] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[at];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push((g.name, worst));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> PolicyParams {
        let mut p = PolicyParams::init(PolicyConfig::default(), 0.4, rng).unwrap();
        // perturb biases and gains too so every group is exercised
        for v in p.values.iter_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
        p
    }

    fn random_prefix(rng: &mut ChaCha8Rng, max: usize) -> Vec<usize> {
        let len = rng.random_range(1..=max);
        (0..len).map(|_| rng.random_range(0..3)).collect()
    }

    #[test]
    fn parameter_count() {
        let p = PolicyParams::zeros(PolicyConfig::default()).unwrap();
        let expected = 3 * 32 + 29 * 32 + 2 * 32 + 4 * (32 * 32 + 32) + 2 * 32 + (32 * 64 + 64) + (64 * 32 + 32) + 2 * 32 + (32 * 3 + 3);
        assert_eq!(p.num_params(), expected);
        assert_eq!(p.groups().len(), 22);
        assert!(PolicyConfig { heads: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(PolicyConfig::default()).unwrap();
        for prefix in [vec![0], vec![2, 1, 0, 0], vec![1; 29]] {
            assert_eq!(p.forward(&prefix).unwrap(), vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn prefix_bounds() {
        let p = PolicyParams::zeros(PolicyConfig::default()).unwrap();
        assert!(matches!(p.forward(&[0; 30]), Err(Error::PrefixLength(30, 29))));
        assert!(p.forward(&[]).is_err());
        assert!(matches!(p.forward(&[0, 3]), Err(Error::TokenOutOfVocab(3))));
    }

    #[test]
    fn distributions_normalize_and_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_params(&mut rng);
            let prefix = random_prefix(&mut rng, 29);
            let a = p.forward(&prefix).unwrap();
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let b = p.forward(&prefix).unwrap();
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn incremental_matches_fresh_prefixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng);
        let seq = random_prefix(&mut rng, 29);
        let mut cache = ForwardCache::new();
        for (j, t) in seq.iter().enumerate() {
            let inc = p.step(&mut cache, *t).unwrap().to_vec();
            assert_eq!(inc, p.forward(&seq[..=j]).unwrap());
        }
    }

    #[test]
    fn causal_positions_ignore_later_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(&mut rng);
        let a = p.forward_cache(&[0, 1, 2, 0]).unwrap();
        let b = p.forward_cache(&[0, 1, 2, 1, 1]).unwrap();
        for j in 0..3 {
            assert_eq!(a.probs(j), b.probs(j));
        }
    }

    fn some_coords(g: &ParamGroup) -> Vec<usize> {
        // every coordinate of small groups, a strided sample of large ones
        let stride = (g.len() / 48).max(1);
        (0..g.len()).step_by(stride).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let p = random_params(&mut rng);
            let prefix = random_prefix(&mut rng, 12);
            let action = rng.random_range(0..3);
            let analytic = p.log_prob_grad(&prefix, action).unwrap();
            let errs = finite_difference_errors(
                &p,
                &analytic,
                1e-5,
                FD_FLOOR,
                Some(&some_coords),
                &|q: &PolicyParams| q.log_prob(&prefix, action),
            )
            .unwrap();
            for (name, e) in errs {
                assert!(e <= 1e-4, "{name}: {e}");
            }
        }
    }

    #[test]
    fn score_function_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let p = random_params(&mut rng);
            let prefix = random_prefix(&mut rng, 29);
            let probs = p.forward(&prefix).unwrap();
            let mut total = vec![0.0; p.num_params()];
            for (a, pa) in probs.iter().enumerate() {
                let g = p.log_prob_grad(&prefix, a).unwrap();
                for (t, x) in total.iter_mut().zip(g) {
                    *t += pa * x;
                }
            }
            assert!(total.iter().all(|x| x.abs() < 1e-10));
        }
    }

    #[test]
    fn gradient_ignores_logit_shift() {
        // shifting every head bias by a constant leaves log-probs unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_params(&mut rng);
        let prefix = random_prefix(&mut rng, 20);
        let mut shifted = p.clone();
        let bh = shifted.groups().iter().find(|g| g.name == "head_b").unwrap().range();
        shifted.values[bh].iter_mut().for_each(|b| *b += 3.7);
        let g0 = p.log_prob_grad(&prefix, 1).unwrap();
        let g1 = shifted.log_prob_grad(&prefix, 1).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn zero_values_leave_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut p = random_params(&mut rng);
        let before = p.clone();
        let cache = p.forward_cache(&[0, 1, 1]).unwrap();
        let batch = vec![EpisodeSample {
            cache,
            actions: vec![1, 1, 0],
            q: vec![0.0; 3],
        }];
        let mut opt = Adam::new(AdamConfig::default(), p.num_params());
        assert!(policy_gradient_update(&mut p, &mut opt, &batch).unwrap());
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn rewarded_action_gains_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut p = PolicyParams::init(PolicyConfig::default(), 0.02, &mut rng).unwrap();
        let prefix = vec![2, 0, 1];
        let before = p.log_prob(&prefix, 2).unwrap();
        let cache = p.forward_cache(&prefix).unwrap();
        let batch = vec![EpisodeSample {
            cache,
            actions: vec![0, 1, 2],
            q: vec![0.0, 0.0, 1.0],
        }];
        let mut opt = Adam::new(AdamConfig { learning_rate: 1e-4, ..Default::default() }, p.num_params());
        policy_gradient_update(&mut p, &mut opt, &batch).unwrap();
        assert!(p.log_prob(&prefix, 2).unwrap() > before);
    }

    #[test]
    fn swapping_values_swaps_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = random_params(&mut rng);
        let cache = p.forward_cache(&[1, 1, 2, 2]).unwrap();
        let actions = vec![1, 2, 2, 2];
        let qa = vec![1.0; 4];
        let qb = vec![0.0, 0.0, 0.0, 1.0];
        let run = |q: &Vec<f64>| {
            let mut params = p.clone();
            let mut opt = Adam::new(AdamConfig::default(), params.num_params());
            let batch = vec![EpisodeSample { cache: cache.clone(), actions: actions.clone(), q: q.clone() }];
            policy_gradient_update(&mut params, &mut opt, &batch).unwrap();
            params
        };
        let (a1, b1) = (run(&qa), run(&qb));
        let (b2, a2) = (run(&qb), run(&qa));
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut opt = Adam::new(AdamConfig::default(), 2);
        let mut params = vec![1.0, 2.0];
        assert!(!opt.step(&mut params, &[f64::NAN, 0.0]).unwrap());
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_params(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_params(&p, 42, 7).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.iteration, 7);
        assert_eq!(loaded.to_params().unwrap(), p);
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let probs = [0.2, 0.0, 0.8];
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.015);
    }
}
