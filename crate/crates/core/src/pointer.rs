//! The trainable biasing module.
//!
//! At each step the decoder state is projected to a query, the query attends
//! over the embeddings of the valid tokens M_i to give the copy distribution
//! `p_ptr`, and a sigmoid gate over `[h_dec ; context]` gives `p_gen`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

pub const GATE_BIAS_INIT: f64 = -2.0;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameters of the biasing module. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct PgParams {
    /// V x d token embeddings.
    pub token_embed: Matrix,
    /// d x d_h query projection.
    pub w_q: Matrix,
    /// Gate weights over `[h_dec ; context]`, length d_h + d.
    pub w_g: Vec<f64>,
    pub b_g: f64,
}

impl PgParams {
    /// Seeded uniform init on `[-s, s]` with `s = 1/sqrt(fan_in)`; the gate bias
    /// starts at [`GATE_BIAS_INIT`].
    pub fn init(seed: u64, vocab_size: usize, d: usize, d_h: usize) -> Result<Self> {
        if vocab_size == 0 || d == 0 || d_h == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (V={vocab_size}, d={d}, d_h={d_h})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-s..=s)).collect()
        };
        let token_embed = Matrix {
            rows: vocab_size,
            cols: d,
            data: fill(vocab_size * d, d),
        };
        let w_q = Matrix {
            rows: d,
            cols: d_h,
            data: fill(d * d_h, d_h),
        };
        let w_g = fill(d_h + d, d_h + d);
        Ok(Self {
            token_embed,
            w_q,
            w_g,
            b_g: GATE_BIAS_INIT,
        })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            token_embed: Matrix::zeros(other.token_embed.rows, other.token_embed.cols),
            w_q: Matrix::zeros(other.w_q.rows, other.w_q.cols),
            w_g: vec![0.0; other.w_g.len()],
            b_g: 0.0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.token_embed.cols
    }

    pub fn state_dim(&self) -> usize {
        self.w_q.cols
    }

    /// Parameter blocks in checkpoint order: token_embed, w_q, w_g, b_g.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            &self.token_embed.data,
            &self.w_q.data,
            &self.w_g,
            std::slice::from_ref(&self.b_g),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.token_embed.data,
            &mut self.w_q.data,
            &mut self.w_g,
            std::slice::from_mut(&mut self.b_g),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn get(&self, mut i: usize) -> f64 {
        for b in self.blocks() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for b in self.blocks_mut() {
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Length-V copy distribution, zero outside `m_i`.
    pub p_ptr: Vec<f64>,
    pub p_gen: f64,
    /// Sorted valid set used for this step.
    pub m_i: Vec<TokenId>,
    /// Attention context `sum_c p_ptr(c) * embed(c)`.
    pub context: Vec<f64>,
    pub query: Vec<f64>,
}

impl StepOutput {
    pub fn is_active(&self) -> bool {
        !self.m_i.is_empty()
    }
}

pub fn forward_step(
    params: &PgParams,
    h_dec: &[f64],
    m_i: &BTreeSet<TokenId>,
) -> Result<StepOutput> {
    if h_dec.len() != params.state_dim() {
        return Err(Error::LengthMismatch {
            expected: params.state_dim(),
            got: h_dec.len(),
        });
    }
    if h_dec.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let v = params.vocab_size();
    let d = params.embed_dim();
    let query = params.w_q.matvec(h_dec);
    let m_i: Vec<TokenId> = m_i.iter().copied().collect();
    if m_i.is_empty() {
        return Ok(StepOutput {
            p_ptr: vec![0.0; v],
            p_gen: 0.0,
            m_i,
            context: vec![0.0; d],
            query,
        });
    }

    let temp = (d as f64).sqrt();
    let logits: Vec<f64> = m_i
        .iter()
        .map(|&c| dot(&query, params.token_embed.row(c.index())) / temp)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();

    let mut p_ptr = vec![0.0; v];
    let mut context = vec![0.0; d];
    for (&c, e) in m_i.iter().zip(&exps) {
        let p = e / total;
        p_ptr[c.index()] = p;
        for (ctx, emb) in context.iter_mut().zip(params.token_embed.row(c.index())) {
            *ctx += p * emb;
        }
    }

    let d_h = params.state_dim();
    let gate = dot(&params.w_g[..d_h], h_dec) + dot(&params.w_g[d_h..], &context) + params.b_g;
    Ok(StepOutput {
        p_ptr,
        p_gen: sigmoid(gate),
        m_i,
        context,
        query,
    })
}

/// Accumulates into `grads` the gradient of a loss whose partial derivatives
/// with respect to this step's outputs are `d_p_ptr` (one entry per element of
/// `step.m_i`) and `d_p_gen`.
pub fn backward_step(
    params: &PgParams,
    h_dec: &[f64],
    step: &StepOutput,
    d_p_ptr: &[f64],
    d_p_gen: f64,
    grads: &mut PgParams,
) {
    if step.m_i.is_empty() {
        return;
    }
    debug_assert_eq!(d_p_ptr.len(), step.m_i.len());
    let d = params.embed_dim();
    let d_h = params.state_dim();
    let temp = (d as f64).sqrt();

    // gate
    let d_gate = d_p_gen * step.p_gen * (1.0 - step.p_gen);
    for (g, x) in grads.w_g[..d_h].iter_mut().zip(h_dec) {
        *g += d_gate * x;
    }
    for (g, x) in grads.w_g[d_h..].iter_mut().zip(&step.context) {
        *g += d_gate * x;
    }
    grads.b_g += d_gate;
    let d_ctx: Vec<f64> = params.w_g[d_h..].iter().map(|w| d_gate * w).collect();

    // total derivative w.r.t. each p_ptr(c), c in M_i
    let probs: Vec<f64> = step.m_i.iter().map(|c| step.p_ptr[c.index()]).collect();
    let d_p: Vec<f64> = step
        .m_i
        .iter()
        .zip(d_p_ptr)
        .map(|(c, g)| g + dot(&d_ctx, params.token_embed.row(c.index())))
        .collect();
    let mean: f64 = probs.iter().zip(&d_p).map(|(p, g)| p * g).sum();

    let mut d_query = vec![0.0; d];
    for ((c, p), g) in step.m_i.iter().zip(&probs).zip(&d_p) {
        let d_logit = p * (g - mean);
        let emb = params.token_embed.row(c.index());
        for (dq, e) in d_query.iter_mut().zip(emb) {
            *dq += d_logit * e / temp;
        }
        let g_row = grads.token_embed.row_mut(c.index());
        for ((ge, q), dc) in g_row.iter_mut().zip(&step.query).zip(&d_ctx) {
            *ge += d_logit * q / temp + p * dc;
        }
    }
    for (r, dq) in d_query.iter().enumerate() {
        for (g, x) in grads.w_q.row_mut(r).iter_mut().zip(h_dec) {
            *g += dq * x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    /// `p_mdl * (1 - p_gen) + p_ptr * p_gen` for every token.
    Scaled,
    /// As `Scaled` inside M_i; tokens outside M_i keep their raw `p_mdl`.
    /// The result is an unnormalized score vector for argmax decoding.
    Unscaled,
}

impl FromStr for InterpolationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled" => Ok(Self::Scaled),
            "unscaled" => Ok(Self::Unscaled),
            other => Err(Error::Config(format!(
                "unknown interpolation mode {other:?}"
            ))),
        }
    }
}

impl fmt::Display for InterpolationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scaled => "scaled",
            Self::Unscaled => "unscaled",
        })
    }
}

pub fn interpolate(p_mdl: &[f64], step: &StepOutput, mode: InterpolationMode) -> Result<Vec<f64>> {
    if p_mdl.len() != step.p_ptr.len() {
        return Err(Error::LengthMismatch {
            expected: step.p_ptr.len(),
            got: p_mdl.len(),
        });
    }
    let g = step.p_gen;
    let mut out: Vec<f64> = match mode {
        InterpolationMode::Scaled => p_mdl
            .iter()
            .zip(&step.p_ptr)
            .map(|(m, p)| m * (1.0 - g) + p * g)
            .collect(),
        InterpolationMode::Unscaled => p_mdl.to_vec(),
    };
    if mode == InterpolationMode::Unscaled {
        for c in &step.m_i {
            let i = c.index();
            out[i] = p_mdl[i] * (1.0 - g) + step.p_ptr[i] * g;
        }
    }
    Ok(out)
}
