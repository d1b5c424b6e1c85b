//! Alternative aggregators (temporal convolution, LSTM encoder) and
//! predictors (LSTM decoder, single-shot), wired to the same shapes as the
//! transformer aggregator and the progressive predictor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::ppm::{classify, prediction_block, BlockParams, RolloutVars};

pub const CONV_LAYERS: usize = 3;
pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PADDING: usize = 1;

/// Output length of one kernel-3, stride-2, pad-1 layer.
pub fn conv_output_len(len: usize) -> usize {
    (len + 2 * CONV_PADDING - CONV_KERNEL) / CONV_STRIDE + 1
}

/// Largest input length that three layers reduce to a single step (8 → 4 → 2 → 1).
pub fn conv_max_input_len() -> usize {
    (1..)
        .take_while(|&len| (0..CONV_LAYERS).fold(len, |l, _| conv_output_len(l)) == 1)
        .last()
        .unwrap()
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `(3·d) × d`, kernel-offset major: rows `[k·d, (k+1)·d)` act on offset `k`.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Conv1dStack {
    pub layers: Vec<ConvLayer>,
    pub d_model: usize,
}

impl Conv1dStack {
    pub fn new(params: &mut ParamSet, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..CONV_LAYERS)
            .map(|i| {
                Ok(ConvLayer {
                    weight: params.add_weight(
                        format!("{prefix}.conv{i}.weight"),
                        CONV_KERNEL * d_model,
                        d_model,
                        rng,
                    )?,
                    bias: params.add_filled(format!("{prefix}.conv{i}.bias"), d_model, 0.0)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Conv1dStack { layers, d_model })
    }

    pub fn count(d_model: usize) -> usize {
        CONV_LAYERS * (CONV_KERNEL * d_model * d_model + d_model)
    }
}

fn conv_layer(g: &mut Graph<'_>, x: Var, layer: &ConvLayer) -> Result<Var> {
    let (len, d) = (g.value(x).rows(), g.value(x).cols());
    let out_len = conv_output_len(len);
    let zero = g.input(Tensor::zeros(1, d));
    let mut windows = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let mut taps = Vec::with_capacity(CONV_KERNEL);
        for k in 0..CONV_KERNEL {
            let pos = (o * CONV_STRIDE + k) as isize - CONV_PADDING as isize;
            if pos < 0 || pos as usize >= len {
                taps.push(zero);
            } else {
                taps.push(g.slice_rows(x, pos as usize, 1)?);
            }
        }
        windows.push(g.concat_cols(&taps)?);
    }
    let cols = g.concat_rows(&windows)?;
    let w = g.param(layer.weight);
    let b = g.param(layer.bias);
    let y = g.matmul(cols, w)?;
    g.add_row(y, b)
}

/// Three strided convolutions with ReLU between them, `T → 1` for `2 ≤ T ≤ 8`;
/// with `shortcut` the last raw input row is added to the result.
pub fn conv1d_aggregate(g: &mut Graph<'_>, f_seq: Var, stack: &Conv1dStack, shortcut: bool) -> Result<Var> {
    let t = g.value(f_seq).rows();
    let max = conv_max_input_len();
    if t > max {
        return Err(Error::Config(format!(
            "Conv1D aggregation reduces at most {max} steps to one, got T = {t}"
        )));
    }
    if g.value(f_seq).cols() != stack.d_model {
        return Err(Error::dim("conv1d_aggregate", g.shape(f_seq), &[t, stack.d_model]));
    }
    let mut x = f_seq;
    for (i, layer) in stack.layers.iter().enumerate() {
        x = conv_layer(g, x, layer)?;
        if i + 1 < stack.layers.len() {
            x = g.relu(x);
        }
    }
    debug_assert_eq!(g.value(x).rows(), 1);
    if shortcut {
        let last = g.slice_rows(f_seq, t - 1, 1)?;
        x = g.add(x, last)?;
    }
    Ok(x)
}

/// Single-layer LSTM; gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `input_dim × 4h`
    pub w_input: ParamId,
    /// `h × 4h`
    pub w_hidden: ParamId,
    /// `1 × 4h`
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(LstmParams {
            w_input: params.add_weight(format!("{prefix}.w_input"), input_dim, 4 * hidden, rng)?,
            w_hidden: params.add_weight(format!("{prefix}.w_hidden"), hidden, 4 * hidden, rng)?,
            bias: params.add_filled(format!("{prefix}.bias"), 4 * hidden, 0.0)?,
            input_dim,
            hidden,
        })
    }

    pub fn count(input_dim: usize, hidden: usize) -> usize {
        4 * hidden * (input_dim + hidden + 1)
    }
}

/// One LSTM step on a batch: returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph<'_>, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    if g.value(x).cols() != p.input_dim {
        return Err(Error::dim("lstm_cell", g.shape(x), &[p.input_dim]));
    }
    let wi = g.param(p.w_input);
    let wh = g.param(p.w_hidden);
    let b = g.param(p.bias);
    let zx = g.matmul(x, wi)?;
    let zh = g.matmul(h, wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add_row(z, b)?;
    let hd = p.hidden;
    let zi = g.slice_cols(z, 0, hd)?;
    let zf = g.slice_cols(z, hd, hd)?;
    let zg = g.slice_cols(z, 2 * hd, hd)?;
    let zo = g.slice_cols(z, 3 * hd, hd)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs the encoder over time steps, each a `B × input_dim` block, from a zero
/// state; returns the final hidden state.
pub fn lstm_encode_steps(g: &mut Graph<'_>, steps: &[Var], p: &LstmParams) -> Result<Var> {
    let first = *steps
        .first()
        .ok_or_else(|| Error::Contract("LSTM encoder needs at least one step".into()))?;
    let b = g.value(first).rows();
    let mut h = g.input(Tensor::zeros(b, p.hidden));
    let mut c = g.input(Tensor::zeros(b, p.hidden));
    for &x in steps {
        (h, c) = lstm_cell(g, x, h, c, p)?;
    }
    Ok(h)
}

/// Encodes a single `T × d` sequence; `shortcut` adds the last raw row.
pub fn lstm_encode(g: &mut Graph<'_>, f_seq: Var, p: &LstmParams, shortcut: bool) -> Result<Var> {
    let t = g.value(f_seq).rows();
    if shortcut && p.hidden != g.value(f_seq).cols() {
        return Err(Error::Config(format!(
            "LSTM shortcut needs hidden size {} to equal feature width {}",
            p.hidden,
            g.value(f_seq).cols()
        )));
    }
    let steps = (0..t).map(|i| g.slice_rows(f_seq, i, 1)).collect::<Result<Vec<_>>>()?;
    let h = lstm_encode_steps(g, &steps, p)?;
    if shortcut {
        let last = steps[t - 1];
        g.add(h, last)
    } else {
        Ok(h)
    }
}

/// Decoder from `h₀ = S_t`, `c₀ = 0`. Step inputs are `feature ⊕ probability`,
/// starting from `f_t ⊕ p_t`; each hidden state is the predicted feature.
pub fn lstm_decode(
    g: &mut Graph<'_>,
    summary: Var,
    current: Var,
    classifier: ParamId,
    p: &LstmParams,
    horizon: usize,
) -> Result<RolloutVars> {
    if horizon < 1 {
        return Err(Error::Contract("decoder horizon must be at least 1".into()));
    }
    if g.value(summary).cols() != p.hidden {
        return Err(Error::dim("lstm_decode", g.shape(summary), &[p.hidden]));
    }
    let b = g.value(summary).rows();
    let mut h = summary;
    let mut c = g.input(Tensor::zeros(b, p.hidden));
    let mut feature = current;
    let mut prob = classify(g, current, classifier)?;
    let mut out = RolloutVars::default();
    for _ in 0..horizon {
        let x = g.concat_cols(&[feature, prob])?;
        (h, c) = lstm_cell(g, x, h, c, p)?;
        feature = h;
        prob = classify(g, feature, classifier)?;
        out.features.push(feature);
        out.probs.push(prob);
    }
    Ok(out)
}

/// One shared block for all horizons, conditioned by a one-hot horizon slot.
#[derive(Debug, Clone)]
pub struct SspParams {
    pub block: BlockParams,
    pub classifier: ParamId,
    pub horizon: usize,
    pub dropout: f64,
}

impl SspParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        num_classes: usize,
        horizon: usize,
        classifier: ParamId,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = 2 * d_model + num_classes + horizon;
        Ok(SspParams {
            block: BlockParams::new(params, &format!("{prefix}.block"), input, d_model, rng)?,
            classifier,
            horizon,
            dropout,
        })
    }

    pub fn count(d_model: usize, num_classes: usize, horizon: usize) -> usize {
        BlockParams::count(2 * d_model + num_classes + horizon, d_model)
    }
}

/// Predicts the feature and distribution `tau` steps ahead (`1 ≤ tau ≤ l`)
/// from `S_t ⊕ f_t ⊕ p_t ⊕ onehot(tau)`, with no chaining.
pub fn ssp_predict(
    g: &mut Graph<'_>,
    summary: Var,
    current: Var,
    p_now: Var,
    params: &SspParams,
    tau: usize,
) -> Result<(Var, Var)> {
    if tau < 1 || tau > params.horizon {
        return Err(Error::Contract(format!(
            "horizon index {tau} outside 1..={}",
            params.horizon
        )));
    }
    let b = g.value(summary).rows();
    let mut onehot = Tensor::zeros(b, params.horizon);
    for r in 0..b {
        onehot.set(r, tau - 1, 1.0);
    }
    let slot = g.input(onehot);
    let x = g.concat_cols(&[summary, current, p_now, slot])?;
    let feature = prediction_block(g, x, &params.block, params.dropout)?;
    let prob = classify(g, feature, params.classifier)?;
    Ok((feature, prob))
}

/// All horizons `1..=l`, each predicted independently.
pub fn ssp_rollout(g: &mut Graph<'_>, summary: Var, current: Var, params: &SspParams) -> Result<RolloutVars> {
    let p_now = classify(g, current, params.classifier)?;
    let mut out = RolloutVars::default();
    for tau in 1..=params.horizon {
        let (f, p) = ssp_predict(g, summary, current, p_now, params, tau)?;
        out.features.push(f);
        out.probs.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_lengths() {
        assert_eq!(conv_output_len(8), 4);
        assert_eq!(conv_output_len(4), 2);
        assert_eq!(conv_output_len(2), 1);
        assert_eq!(conv_output_len(1), 1);
        assert_eq!(conv_max_input_len(), 8);
    }

    #[test]
    fn lstm_count_formula() {
        assert_eq!(LstmParams::count(3, 2), 4 * 2 * (3 + 2 + 1));
    }
}
