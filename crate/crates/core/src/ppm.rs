//! Progressive prediction.
//!
//! An initial block maps `S_t ⊕ f_t ⊕ p_t` to the first predicted feature.
//! A second block, one parameter set reused at every later step, maps
//! `S_t ⊕ f'_{t+i−1} ⊕ p'_{t+i−1}` to the next. Every predicted feature is
//! classified by the same bias-free classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamSet, Tensor, Var, LAYER_NORM_EPS};

/// `FC(in → d/2) → ReLU → FC(d/2 → d) → LayerNorm → Dropout`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub input_dim: usize,
    pub d_model: usize,
}

impl BlockParams {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_model < 2 || !d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even and ≥ 2, got {d_model}")));
        }
        let hidden = d_model / 2;
        Ok(BlockParams {
            fc1_w: params.add_weight(format!("{prefix}.fc1.weight"), input_dim, hidden, rng)?,
            fc1_b: params.add_filled(format!("{prefix}.fc1.bias"), hidden, 0.0)?,
            fc2_w: params.add_weight(format!("{prefix}.fc2.weight"), hidden, d_model, rng)?,
            fc2_b: params.add_filled(format!("{prefix}.fc2.bias"), d_model, 0.0)?,
            ln_gain: params.add_filled(format!("{prefix}.ln.gain"), d_model, 1.0)?,
            ln_bias: params.add_filled(format!("{prefix}.ln.bias"), d_model, 0.0)?,
            input_dim,
            d_model,
        })
    }

    pub fn count(input_dim: usize, d_model: usize) -> usize {
        let h = d_model / 2;
        input_dim * h + h + h * d_model + d_model + 2 * d_model
    }
}

/// One block application on a batch of rows.
pub fn prediction_block(g: &mut Graph<'_>, x: Var, block: &BlockParams, dropout: f64) -> Result<Var> {
    if g.value(x).cols() != block.input_dim {
        return Err(Error::dim("prediction_block", g.shape(x), &[block.input_dim]));
    }
    let w1 = g.param(block.fc1_w);
    let b1 = g.param(block.fc1_b);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let w2 = g.param(block.fc2_w);
    let b2 = g.param(block.fc2_b);
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    let gain = g.param(block.ln_gain);
    let bias = g.param(block.ln_bias);
    let o = g.layer_norm(o, gain, bias, LAYER_NORM_EPS)?;
    g.dropout(o, dropout)
}

/// `softmax(f W_c)`; `W_c` is `d_model × C` with no bias.
pub fn classify(g: &mut Graph<'_>, f: Var, classifier: ParamId) -> Result<Var> {
    let w = g.param(classifier);
    let logits = g.matmul(f, w)?;
    Ok(g.softmax(logits))
}

#[derive(Debug, Clone)]
pub struct PpmParams {
    pub initial: BlockParams,
    pub progressive: BlockParams,
    pub classifier: ParamId,
    pub dropout: f64,
}

impl PpmParams {
    /// Builds both blocks against an existing classifier parameter.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        num_classes: usize,
        classifier: ParamId,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = 2 * d_model + num_classes;
        Ok(PpmParams {
            initial: BlockParams::new(params, &format!("{prefix}.initial"), input, d_model, rng)?,
            progressive: BlockParams::new(params, &format!("{prefix}.progressive"), input, d_model, rng)?,
            classifier,
            dropout,
        })
    }

    /// Both blocks, excluding the shared classifier.
    pub fn count(d_model: usize, num_classes: usize) -> usize {
        2 * BlockParams::count(2 * d_model + num_classes, d_model)
    }
}

/// Per-step predicted features (`B × d`) and distributions (`B × C`) on a graph.
#[derive(Debug, Clone, Default)]
pub struct RolloutVars {
    pub features: Vec<Var>,
    pub probs: Vec<Var>,
}

impl RolloutVars {
    pub fn horizon(&self) -> usize {
        self.probs.len()
    }

    /// Extracts batch row `row` as an `l × d` / `l × C` value pair.
    pub fn extract(&self, g: &Graph<'_>, row: usize) -> Rollout {
        let gather = |vars: &[Var]| {
            let rows: Vec<Vec<f64>> = vars.iter().map(|&v| g.value(v).row(row).to_vec()).collect();
            Tensor::from_rows(&rows).expect("rollout rows share a width")
        };
        Rollout {
            features: gather(&self.features),
            probs: gather(&self.probs),
        }
    }
}

/// Predicted futures for one anchor: `l × d_model` features and `l × C` distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub features: Tensor,
    pub probs: Tensor,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.probs.rows()
    }
}

/// What the progressive block sees in its feature slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFeedback {
    /// The previous predicted feature.
    Full,
    /// Zeros; only `S_t` and the previous distribution carry information.
    NoFeature,
}

/// Full progressive rollout over `horizon` steps.
pub fn rollout(
    g: &mut Graph<'_>,
    summary: Var,
    current: Var,
    params: &PpmParams,
    horizon: usize,
) -> Result<RolloutVars> {
    rollout_with(g, summary, current, params, horizon, FeatureFeedback::Full)
}

/// Rollout where steps `i ≥ 2` get zeros in place of the previous feature.
pub fn rollout_without_features(
    g: &mut Graph<'_>,
    summary: Var,
    current: Var,
    params: &PpmParams,
    horizon: usize,
) -> Result<RolloutVars> {
    rollout_with(g, summary, current, params, horizon, FeatureFeedback::NoFeature)
}

pub fn rollout_with(
    g: &mut Graph<'_>,
    summary: Var,
    current: Var,
    params: &PpmParams,
    horizon: usize,
    feedback: FeatureFeedback,
) -> Result<RolloutVars> {
    if horizon < 1 {
        return Err(Error::Contract("rollout horizon must be at least 1".into()));
    }
    if g.value(summary).rows() != g.value(current).rows() {
        return Err(Error::dim("rollout", g.shape(summary), g.shape(current)));
    }
    let p_now = classify(g, current, params.classifier)?;
    let x = g.concat_cols(&[summary, current, p_now])?;
    let mut feature = prediction_block(g, x, &params.initial, params.dropout)?;
    let mut prob = classify(g, feature, params.classifier)?;
    let mut out = RolloutVars {
        features: vec![feature],
        probs: vec![prob],
    };
    let zeros = match feedback {
        FeatureFeedback::Full => None,
        FeatureFeedback::NoFeature => {
            let (b, d) = (g.value(summary).rows(), g.value(feature).cols());
            Some(g.input(Tensor::zeros(b, d)))
        }
    };
    for _ in 1..horizon {
        let slot = zeros.unwrap_or(feature);
        let x = g.concat_cols(&[summary, slot, prob])?;
        feature = prediction_block(g, x, &params.progressive, params.dropout)?;
        prob = classify(g, feature, params.classifier)?;
        out.features.push(feature);
        out.probs.push(prob);
    }
    Ok(out)
}
