//! Temporal transformer aggregation.
//!
//! The current chunk feature is the query; the earlier chunks in the window are
//! the memory. A single multi-head attention layer summarizes the memory into
//! `A_t`, and the output is `S_t = A_t + f_t` where `f_t` is the
//! position-encoded query row.
//!
//! Two details deliberately differ from the textbook Transformer:
//! - the positional exponent is `i / d_model`, not `2⌊i/2⌋ / d_model`;
//! - every head scales its logits by `sqrt(d_model)` rather than `sqrt(d_head)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamSet, Tensor, Var};

/// Sinusoidal positions, `pe[pos][i] = sin(pos / 10000^(i/d))` for even `i`,
/// `cos(..)` for odd `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    pe: Tensor,
}

impl PositionalTable {
    pub fn new(max_len: usize, d_model: usize) -> Result<Self> {
        if max_len < 1 || d_model < 2 {
            return Err(Error::Config(format!(
                "positional table needs T ≥ 1 and d_model ≥ 2, got {max_len}×{d_model}"
            )));
        }
        let mut pe = Tensor::zeros(max_len, d_model);
        for pos in 0..max_len {
            for i in 0..d_model {
                let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
                pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
        Ok(PositionalTable { pe })
    }

    /// A table of zeros; aggregation then sees no order information at all.
    pub fn zeros(max_len: usize, d_model: usize) -> Self {
        PositionalTable {
            pe: Tensor::zeros(max_len, d_model),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.pe
    }

    pub fn max_len(&self) -> usize {
        self.pe.rows()
    }

    /// The first `len` rows.
    pub fn head(&self, len: usize) -> Result<Tensor> {
        if len == 0 || len > self.pe.rows() {
            return Err(Error::SequenceTooShort {
                needed: len,
                got: self.pe.rows(),
            });
        }
        Tensor::matrix(len, self.pe.cols(), self.pe.data()[..len * self.pe.cols()].to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
}

/// Per-head `d_model × d_model/n` projections and the `d_model × d_model` output map.
#[derive(Debug, Clone)]
pub struct TtmParams {
    pub heads: Vec<HeadParams>,
    pub w_out: ParamId,
    pub d_model: usize,
}

impl TtmParams {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "n_heads = {n_heads} must divide d_model = {d_model}"
            )));
        }
        let d_head = d_model / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            heads.push(HeadParams {
                w_query: params.add_weight(format!("{prefix}.head{i}.w_query"), d_model, d_head, rng)?,
                w_key: params.add_weight(format!("{prefix}.head{i}.w_key"), d_model, d_head, rng)?,
                w_value: params.add_weight(format!("{prefix}.head{i}.w_value"), d_model, d_head, rng)?,
            });
        }
        let w_out = params.add_weight(format!("{prefix}.w_out"), n_heads * d_head, d_model, rng)?;
        Ok(TtmParams { heads, w_out, d_model })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.len()
    }

    /// `3·n·d·(d/n) + d·d = 4d²`.
    pub fn count(d_model: usize) -> usize {
        4 * d_model * d_model
    }
}

/// Attention output plus its `L_q × L_k` weight matrix.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with `d` the column count of `Q`.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Attended> {
    let d = g.value(q).cols();
    scaled_attention(g, q, k, v, d)
}

/// As [`attention`] with an explicit divisor `sqrt(scale_dim)`.
pub fn scaled_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, scale_dim: usize) -> Result<Attended> {
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::dim("attention", g.shape(k), g.shape(v)));
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (scale_dim as f64).sqrt());
    let weights = g.softmax(logits);
    let output = g.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

#[derive(Debug, Clone)]
pub struct MultiHeadOut {
    pub output: Var,
    /// One `L_q × L_k` weight matrix per head.
    pub head_weights: Vec<Var>,
}

/// `Concat(h_1..h_n) W_o` with `h_i = attention(Q W_q_i, M W_k_i, M W_v_i)`.
///
/// `memory` is a list of row blocks that are stacked in order; an empty list
/// is an [`Error::EmptyMemory`].
pub fn multi_head(g: &mut Graph<'_>, query: Var, memory: &[Var], params: &TtmParams) -> Result<MultiHeadOut> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mem = if memory.len() == 1 {
        memory[0]
    } else {
        g.concat_rows(memory)?
    };
    if g.value(query).cols() != params.d_model || g.value(mem).cols() != params.d_model {
        return Err(Error::dim("multi_head", g.shape(query), g.shape(mem)));
    }
    let mut outs = Vec::with_capacity(params.n_heads());
    let mut head_weights = Vec::with_capacity(params.n_heads());
    for head in &params.heads {
        let (wq, wk, wv) = (g.param(head.w_query), g.param(head.w_key), g.param(head.w_value));
        let q = g.matmul(query, wq)?;
        let k = g.matmul(mem, wk)?;
        let v = g.matmul(mem, wv)?;
        let att = scaled_attention(g, q, k, v, params.d_model)?;
        outs.push(att.output);
        head_weights.push(att.weights);
    }
    let cat = g.concat_cols(&outs)?;
    let wo = g.param(params.w_out);
    let output = g.matmul(cat, wo)?;
    Ok(MultiHeadOut { output, head_weights })
}

#[derive(Debug, Clone)]
pub struct Aggregated {
    /// `S_t`, `1 × d_model`.
    pub summary: Var,
    /// `A_t` before the shortcut.
    pub attended: Var,
    /// The position-encoded query row `f_t`.
    pub query: Var,
    /// Per head, `1 × (T−1)` weights over the memory slots.
    pub head_weights: Vec<Var>,
}

/// Adds positions to all `T` rows of `f_seq`, then aggregates with the last
/// row as query and the first `T−1` rows as memory.
pub fn aggregate(
    g: &mut Graph<'_>,
    f_seq: Var,
    params: &TtmParams,
    pe: &PositionalTable,
    shortcut: bool,
) -> Result<Aggregated> {
    let t = g.value(f_seq).rows();
    if t < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: t });
    }
    if pe.table().cols() != g.value(f_seq).cols() {
        return Err(Error::dim("aggregate", g.shape(f_seq), pe.table().shape()));
    }
    let pos = g.input(pe.head(t)?);
    let encoded = g.add(f_seq, pos)?;
    aggregate_encoded(g, encoded, params, shortcut)
}

/// Aggregation over rows that already carry their positional encoding.
pub fn aggregate_encoded(g: &mut Graph<'_>, encoded: Var, params: &TtmParams, shortcut: bool) -> Result<Aggregated> {
    let t = g.value(encoded).rows();
    if t < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: t });
    }
    let query = g.slice_rows(encoded, t - 1, 1)?;
    let memory = g.slice_rows(encoded, 0, t - 1)?;
    let mh = multi_head(g, query, &[memory], params)?;
    let summary = if shortcut { g.add(mh.output, query)? } else { mh.output };
    Ok(Aggregated {
        summary,
        attended: mh.output,
        query,
        head_weights: mh.head_weights,
    })
}
