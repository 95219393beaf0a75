//! A tiny autoregressive categorical policy with exact gradients.
//!
//! The next-token distribution conditions on the last `order` tokens of
//! `prompt ++ response_so_far`. Their embeddings are concatenated and fed to
//! a single linear layer followed by a softmax:
//!
//! ```text
//! h      = [E[c_1]; …; E[c_order]]          (order·d)
//! logits = W h + b                          (V)
//! p      = softmax(logits)
//! ```
//!
//! Positions before the start of the prompt use a dedicated padding row
//! `E[V]`. All parameters live in one flat buffer, laid out as
//! `E ((V+1)×d) | W (V×order·d) | b (V)`, row-major.

use crate::rng::{Domain, RngStream};
use crate::types::{TokenSeq, TypeError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Token(#[from] TypeError),
    #[error("upstream has {got} entries but the response has {expected} tokens")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_EMBED_DIM: usize = 16;
const EMBED_INIT_SCALE: f64 = 0.5;
const OUT_INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub order: usize,
    pub embed_dim: usize,
}

impl ModelShape {
    pub fn new(vocab_size: usize, order: usize, embed_dim: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(ModelError::InvalidShape(format!(
                "vocab_size must be at least 2, got {vocab_size}"
            )));
        }
        if order == 0 || embed_dim == 0 {
            return Err(ModelError::InvalidShape(
                "order and embed_dim must be positive".into(),
            ));
        }
        Ok(Self {
            vocab_size,
            order,
            embed_dim,
        })
    }

    fn hidden(&self) -> usize {
        self.order * self.embed_dim
    }

    fn embed_len(&self) -> usize {
        (self.vocab_size + 1) * self.embed_dim
    }

    fn w_offset(&self) -> usize {
        self.embed_len()
    }

    fn b_offset(&self) -> usize {
        self.w_offset() + self.vocab_size * self.hidden()
    }

    pub fn param_count(&self) -> usize {
        self.b_offset() + self.vocab_size
    }

    /// By convention the last vocabulary id terminates a response.
    pub fn default_stop_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: ModelShape,
    values: Vec<f64>,
}

/// Gradient buffer congruent with a [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    shape: ModelShape,
    values: Vec<f64>,
}

/// `init_params(vocab_size, order, seed)` with the default embedding width.
pub fn init_params(vocab_size: usize, order: usize, seed: u64) -> Result<PolicyParams> {
    PolicyParams::init(ModelShape::new(vocab_size, order, DEFAULT_EMBED_DIM)?, seed)
}

impl PolicyParams {
    /// Small uniform weights; deterministic under `seed`.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(Domain::Init, seed, 0, 0);
        let mut values = vec![0.0; shape.param_count()];
        for v in &mut values[..shape.w_offset()] {
            *v = rng.uniform(-EMBED_INIT_SCALE, EMBED_INIT_SCALE);
        }
        for v in &mut values[shape.w_offset()..shape.b_offset()] {
            *v = rng.uniform(-OUT_INIT_SCALE, OUT_INIT_SCALE);
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.param_count()],
        }
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(ModelError::InvalidShape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidShape("non-finite parameter".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn embedding(&self, token: usize) -> &[f64] {
        let d = self.shape.embed_dim;
        &self.values[token * d..(token + 1) * d]
    }

    /// Concatenated context embeddings; `context` holds `order` slots where
    /// `None` is padding.
    fn hidden(&self, context: &[Option<u32>], h: &mut Vec<f64>) {
        h.clear();
        for slot in context {
            let row = slot.map_or(self.shape.vocab_size, |t| t as usize);
            h.extend_from_slice(self.embedding(row));
        }
    }

    /// Log-softmax of the next-token distribution given a full context
    /// window.
    fn log_softmax_into(&self, h: &[f64], out: &mut Vec<f64>) {
        let v = self.shape.vocab_size;
        let hd = self.shape.hidden();
        let w = &self.values[self.shape.w_offset()..self.shape.b_offset()];
        let b = &self.values[self.shape.b_offset()..];
        out.clear();
        out.extend((0..v).map(|i| {
            let row = &w[i * hd..(i + 1) * hd];
            b[i] + row.iter().zip(h).map(|(a, x)| a * x).sum::<f64>()
        }));
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        for l in out.iter_mut() {
            *l -= lse;
        }
    }

    /// Full log-distribution over the vocabulary after `history` (most
    /// recent token last).
    pub fn next_token_logprobs(&self, history: &[u32]) -> Vec<f64> {
        let ctx = context_window(history, history.len(), self.shape.order);
        let mut h = Vec::with_capacity(self.shape.hidden());
        let mut out = Vec::with_capacity(self.shape.vocab_size);
        self.hidden(&ctx, &mut h);
        self.log_softmax_into(&h, &mut out);
        out
    }
}

/// The `order` tokens preceding position `pos` of `seq`, padded on the left.
fn context_window(seq: &[u32], pos: usize, order: usize) -> Vec<Option<u32>> {
    (0..order)
        .map(|j| {
            let back = order - j;
            if pos >= back {
                Some(seq[pos - back])
            } else {
                None
            }
        })
        .collect()
}

fn joined(prompt: &TokenSeq, response: &TokenSeq) -> Vec<u32> {
    let mut s = Vec::with_capacity(prompt.len() + response.len());
    s.extend_from_slice(prompt.ids());
    s.extend_from_slice(response.ids());
    s
}

/// One log-probability per response token, each conditioned on the prompt
/// and the preceding response tokens.
pub fn forward_logprobs(
    params: &PolicyParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Vec<f64>> {
    let v = params.vocab_size();
    prompt.check_vocab(v)?;
    response.check_vocab(v)?;
    let seq = joined(prompt, response);
    let start = prompt.len();
    let mut h = Vec::with_capacity(params.shape.hidden());
    let mut lp = Vec::with_capacity(v);
    Ok((start..seq.len())
        .map(|pos| {
            let ctx = context_window(&seq, pos, params.shape.order);
            params.hidden(&ctx, &mut h);
            params.log_softmax_into(&h, &mut lp);
            lp[seq[pos] as usize]
        })
        .collect())
}

/// Exact gradient of `Σ_t upstream[t] · log π(y_t|·)` with respect to every
/// parameter.
pub fn backward(
    params: &PolicyParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
    upstream: &[f64],
) -> Result<ParamGrad> {
    let mut grad = ParamGrad::zeros(params.shape);
    accumulate_backward(params, prompt, response, upstream, &mut grad)?;
    Ok(grad)
}

/// [`backward`] that adds into an existing buffer.
pub fn accumulate_backward(
    params: &PolicyParams,
    prompt: &TokenSeq,
    response: &TokenSeq,
    upstream: &[f64],
    grad: &mut ParamGrad,
) -> Result<()> {
    if upstream.len() != response.len() {
        return Err(ModelError::ShapeMismatch {
            expected: response.len(),
            got: upstream.len(),
        });
    }
    if grad.shape != params.shape {
        return Err(ModelError::InvalidShape("gradient buffer shape differs".into()));
    }
    let shape = params.shape;
    let (v, d, hd) = (shape.vocab_size, shape.embed_dim, shape.hidden());
    prompt.check_vocab(v)?;
    response.check_vocab(v)?;
    let seq = joined(prompt, response);
    let start = prompt.len();
    let w = &params.values[shape.w_offset()..shape.b_offset()];
    let mut h = Vec::with_capacity(hd);
    let mut lp = Vec::with_capacity(v);
    let mut dh = vec![0.0; hd];

    for (t, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        let pos = start + t;
        let target = seq[pos] as usize;
        let ctx = context_window(&seq, pos, shape.order);
        params.hidden(&ctx, &mut h);
        params.log_softmax_into(&h, &mut lp);
        dh.iter_mut().for_each(|x| *x = 0.0);

        let (emb_g, rest) = grad.values.split_at_mut(shape.w_offset());
        let (w_g, b_g) = rest.split_at_mut(v * hd);
        // d(u·log p_target)/d logit_i = u·(1[i = target] − p_i)
        for i in 0..v {
            let dlogit = u * (f64::from(u8::from(i == target)) - lp[i].exp());
            b_g[i] += dlogit;
            let w_row = &w[i * hd..(i + 1) * hd];
            let g_row = &mut w_g[i * hd..(i + 1) * hd];
            for k in 0..hd {
                g_row[k] += dlogit * h[k];
                dh[k] += dlogit * w_row[k];
            }
        }
        for (j, slot) in ctx.iter().enumerate() {
            let row = slot.map_or(v, |tok| tok as usize);
            let g = &mut emb_g[row * d..(row + 1) * d];
            for k in 0..d {
                g[k] += dh[j * d + k];
            }
        }
    }
    Ok(())
}

/// Argmax decoding (ties to the lowest id) until `stop_id` is emitted or
/// `max_len` tokens have been produced. The stop token, when emitted, is
/// part of the returned sequence.
pub fn greedy_decode(
    params: &PolicyParams,
    prompt: &TokenSeq,
    max_len: usize,
    stop_id: u32,
) -> Result<TokenSeq> {
    prompt.check_vocab(params.vocab_size())?;
    let max_len = max_len.max(1);
    let mut history = prompt.ids().to_vec();
    let mut out = Vec::with_capacity(max_len);
    let mut h = Vec::with_capacity(params.shape.hidden());
    let mut lp = Vec::with_capacity(params.vocab_size());
    while out.len() < max_len {
        let ctx = context_window(&history, history.len(), params.shape.order);
        params.hidden(&ctx, &mut h);
        params.log_softmax_into(&h, &mut lp);
        let mut best = 0;
        for (i, &l) in lp.iter().enumerate().skip(1) {
            if l > lp[best] {
                best = i;
            }
        }
        let tok = best as u32;
        out.push(tok);
        history.push(tok);
        if tok == stop_id {
            break;
        }
    }
    Ok(TokenSeq::new(out)?)
}

impl ParamGrad {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.param_count()],
        }
    }

    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self::zeros(params.shape)
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        assert_eq!(self.shape, other.shape, "gradient shapes differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

const CHECKPOINT_MAGIC: &str = "# sampo policy checkpoint v1";

/// Writes a textual checkpoint.
///
/// ```text
/// # sampo policy checkpoint v1
/// shape <vocab_size> <order> <embed_dim>
/// embed <rows> <cols>
/// <one line per row, space-separated values>
/// out_w <rows> <cols>
/// …
/// out_b 1 <vocab_size>
/// …
/// ```
///
/// Values use Rust's shortest round-trip decimal form, so reading a
/// checkpoint back yields bit-identical parameters and writing the same
/// parameters twice yields identical bytes.
pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    let s = params.shape;
    let mut text = String::new();
    writeln!(text, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(text, "shape {} {} {}", s.vocab_size, s.order, s.embed_dim).unwrap();
    let blocks = [
        ("embed", s.vocab_size + 1, s.embed_dim, 0),
        ("out_w", s.vocab_size, s.hidden(), s.w_offset()),
        ("out_b", 1, s.vocab_size, s.b_offset()),
    ];
    for (name, rows, cols, offset) in blocks {
        writeln!(text, "{name} {rows} {cols}").unwrap();
        for r in 0..rows {
            let row = &params.values[offset + r * cols..offset + (r + 1) * cols];
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(text, "{}", line.join(" ")).unwrap();
        }
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<PolicyParams> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file"))?
            .map_err(ModelError::from)
    };
    if next()?.trim() != CHECKPOINT_MAGIC {
        return Err(bad("missing header"));
    }
    let header = next()?;
    let dims: Vec<usize> = header
        .strip_prefix("shape ")
        .ok_or_else(|| bad("missing shape line"))?
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| bad("bad shape value")))
        .collect::<Result<_>>()?;
    let [vocab, order, dim] = dims[..] else {
        return Err(bad("shape needs three values"));
    };
    let shape = ModelShape::new(vocab, order, dim)?;
    let mut values = Vec::with_capacity(shape.param_count());
    for (name, rows, cols) in [
        ("embed", vocab + 1, dim),
        ("out_w", vocab, shape.hidden()),
        ("out_b", 1, vocab),
    ] {
        let h = next()?;
        let expect = format!("{name} {rows} {cols}");
        if h.trim() != expect {
            return Err(ModelError::Checkpoint(format!("expected `{expect}`, found `{h}`")));
        }
        for _ in 0..rows {
            let line = next()?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(bad("row has the wrong number of values"));
            }
            values.extend(row);
        }
    }
    PolicyParams::from_values(shape, values)
}
