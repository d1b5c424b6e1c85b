//! Aggregator × predictor composition.
//!
//! Every aggregator maps a `T × d` window to a `1 × d` summary and every
//! predictor maps `(summary, current feature)` to a rollout, so any pairing in
//! {TTM, Conv1D, LSTM} × {PPM, SSP, LSTM} is a plain [`ModelConfig`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Conv1dStack, LstmParams, SspParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::ppm::{self, FeatureFeedback, PpmParams, Rollout, RolloutVars};
use crate::ttm::{self, PositionalTable, TtmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Ttm,
    Conv1d,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Ppm,
    Ssp,
    Lstm,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 3] = [AggregatorKind::Conv1d, AggregatorKind::Lstm, AggregatorKind::Ttm];

    pub fn label(self) -> &'static str {
        match self {
            AggregatorKind::Ttm => "TTM",
            AggregatorKind::Conv1d => "Conv1D",
            AggregatorKind::Lstm => "LSTM",
        }
    }
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [PredictorKind::Lstm, PredictorKind::Ssp, PredictorKind::Ppm];

    pub fn label(self) -> &'static str {
        match self {
            PredictorKind::Ppm => "PPM",
            PredictorKind::Ssp => "SSP",
            PredictorKind::Lstm => "LSTM",
        }
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ttm" => Ok(AggregatorKind::Ttm),
            "conv1d" => Ok(AggregatorKind::Conv1d),
            "lstm" => Ok(AggregatorKind::Lstm),
            _ => Err(Error::Config(format!("unknown aggregator {s:?} (ttm|conv1d|lstm)"))),
        }
    }
}

impl FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ppm" => Ok(PredictorKind::Ppm),
            "ssp" => Ok(PredictorKind::Ssp),
            "lstm" => Ok(PredictorKind::Lstm),
            _ => Err(Error::Config(format!("unknown predictor {s:?} (ppm|ssp|lstm)"))),
        }
    }
}

impl FromStr for FeatureFeedback {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(FeatureFeedback::Full),
            "no_feature" => Ok(FeatureFeedback::NoFeature),
            _ => Err(Error::Config(format!("unknown ppm variant {s:?} (full|no_feature)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Class count including background (class 0).
    pub num_classes: usize,
    /// Observed window length `T`.
    pub seq_len: usize,
    /// Predicted steps `l`.
    pub horizon: usize,
    pub dropout: f64,
    pub aggregator: AggregatorKind,
    pub predictor: PredictorKind,
    pub ppm_variant: FeatureFeedback,
    /// Add the current feature to the aggregated summary.
    pub shortcut: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            num_classes: 5,
            seq_len: 8,
            horizon: 8,
            dropout: 0.1,
            aggregator: AggregatorKind::Ttm,
            predictor: PredictorKind::Ppm,
            ppm_variant: FeatureFeedback::Full,
            shortcut: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even and ≥ 2, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "n_heads = {} must divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.seq_len < 2 {
            return fail(format!("seq_len must be ≥ 2, got {}", self.seq_len));
        }
        if self.horizon < 1 {
            return fail("horizon must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.aggregator == AggregatorKind::Conv1d && self.seq_len > baselines::conv_max_input_len() {
            return fail(format!(
                "Conv1D aggregation supports seq_len ≤ {}, got {}",
                baselines::conv_max_input_len(),
                self.seq_len
            ));
        }
        if self.ppm_variant == FeatureFeedback::NoFeature && self.predictor != PredictorKind::Ppm {
            return fail("ppm_variant = no_feature only applies to the PPM predictor".into());
        }
        Ok(())
    }

    /// Row label such as `TTM-PPM` or `TTM-PPM (w/o FP)`.
    pub fn method_name(&self) -> String {
        let mut name = format!("{}-{}", self.aggregator.label(), self.predictor.label());
        if !self.shortcut {
            name.push_str(" (no shortcut)");
        }
        if self.ppm_variant == FeatureFeedback::NoFeature {
            name.push_str(" (w/o FP)");
        }
        name
    }

    pub fn with_pair(&self, aggregator: AggregatorKind, predictor: PredictorKind) -> ModelConfig {
        ModelConfig {
            aggregator,
            predictor,
            ppm_variant: FeatureFeedback::Full,
            ..self.clone()
        }
    }
}

/// Closed-form scalar count of the model `cfg` would build.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, c, l) = (cfg.d_model, cfg.num_classes, cfg.horizon);
    let aggregator = match cfg.aggregator {
        AggregatorKind::Ttm => TtmParams::count(d),
        AggregatorKind::Conv1d => Conv1dStack::count(d),
        AggregatorKind::Lstm => LstmParams::count(d, d),
    };
    let predictor = match cfg.predictor {
        PredictorKind::Ppm => PpmParams::count(d, c),
        PredictorKind::Ssp => SspParams::count(d, c, l),
        PredictorKind::Lstm => LstmParams::count(d + c, d),
    };
    aggregator + predictor + d * c
}

#[derive(Debug, Clone)]
enum Aggregator {
    Ttm(TtmParams),
    Conv1d(Conv1dStack),
    Lstm(LstmParams),
}

#[derive(Debug, Clone)]
enum Predictor {
    Ppm(PpmParams),
    Ssp(SspParams),
    Lstm(LstmParams),
}

/// Graph handles produced by one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub rollout: RolloutVars,
    /// Per sample, per head, `1 × (T−1)` weights. Empty unless the aggregator is TTM.
    pub head_weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    aggregator: Aggregator,
    predictor: Predictor,
    classifier: ParamId,
    positions: PositionalTable,
}

impl Model {
    /// Fresh model with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (d, c) = (config.d_model, config.num_classes);
        let aggregator = match config.aggregator {
            AggregatorKind::Ttm => Aggregator::Ttm(TtmParams::new(&mut params, "ttm", d, config.n_heads, &mut rng)?),
            AggregatorKind::Conv1d => Aggregator::Conv1d(Conv1dStack::new(&mut params, "conv", d, &mut rng)?),
            AggregatorKind::Lstm => Aggregator::Lstm(LstmParams::new(&mut params, "encoder", d, d, &mut rng)?),
        };
        let classifier = params.add_weight("classifier", d, c, &mut rng)?;
        let predictor = match config.predictor {
            PredictorKind::Ppm => Predictor::Ppm(PpmParams::new(
                &mut params,
                "ppm",
                d,
                c,
                classifier,
                config.dropout,
                &mut rng,
            )?),
            PredictorKind::Ssp => Predictor::Ssp(SspParams::new(
                &mut params,
                "ssp",
                d,
                c,
                config.horizon,
                classifier,
                config.dropout,
                &mut rng,
            )?),
            PredictorKind::Lstm => Predictor::Lstm(LstmParams::new(&mut params, "decoder", d + c, d, &mut rng)?),
        };
        let positions = PositionalTable::new(config.seq_len, d)?;
        Ok(Model {
            config,
            params,
            aggregator,
            predictor,
            classifier,
            positions,
        })
    }

    /// Rebuilds a model and overwrites every parameter from `values`, matched by name.
    pub fn from_params(config: ModelConfig, values: &ParamSet) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model expects {}",
                values.len(),
                model.params.len()
            )));
        }
        for p in values.iter() {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {:?} in checkpoint", p.name)))?;
            let slot = model.params.value_mut(id);
            if slot.shape() != p.value.shape() {
                return Err(Error::dim("from_params", slot.shape(), p.value.shape()));
            }
            *slot = p.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn classifier(&self) -> ParamId {
        self.classifier
    }

    pub fn positions(&self) -> &PositionalTable {
        &self.positions
    }

    /// Replaces the positional table (e.g. with zeros, to remove order information).
    pub fn set_positions(&mut self, table: PositionalTable) -> Result<()> {
        if table.table().cols() != self.config.d_model || table.max_len() < self.config.seq_len {
            return Err(Error::dim(
                "set_positions",
                table.table().shape(),
                &[self.config.seq_len, self.config.d_model],
            ));
        }
        self.positions = table;
        Ok(())
    }

    pub fn ttm_params(&self) -> Option<&TtmParams> {
        match &self.aggregator {
            Aggregator::Ttm(p) => Some(p),
            _ => None,
        }
    }

    pub fn ppm_params(&self) -> Option<&PpmParams> {
        match &self.predictor {
            Predictor::Ppm(p) => Some(p),
            _ => None,
        }
    }

    /// Batched forward over observed windows, each `T × d`. `g` must be built
    /// over this model's [`ParamSet`].
    pub fn forward(&self, g: &mut Graph<'_>, batch: &[&Tensor]) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("forward needs a non-empty batch".into()));
        }
        let (t, d) = (self.config.seq_len, self.config.d_model);
        let mut windows = Vec::with_capacity(batch.len());
        for obs in batch {
            if obs.rows() != t || obs.cols() != d {
                return Err(Error::dim("forward", obs.shape(), &[t, d]));
            }
            windows.push(g.input((*obs).clone()));
        }

        let mut head_weights = Vec::new();
        let summary = match &self.aggregator {
            Aggregator::Ttm(p) => {
                let mut rows = Vec::with_capacity(windows.len());
                for &w in &windows {
                    let agg = ttm::aggregate(g, w, p, &self.positions, self.config.shortcut)?;
                    rows.push(agg.summary);
                    head_weights.push(agg.head_weights);
                }
                g.concat_rows(&rows)?
            }
            Aggregator::Conv1d(p) => {
                let rows = windows
                    .iter()
                    .map(|&w| baselines::conv1d_aggregate(g, w, p, self.config.shortcut))
                    .collect::<Result<Vec<_>>>()?;
                g.concat_rows(&rows)?
            }
            Aggregator::Lstm(p) => {
                let mut steps = Vec::with_capacity(t);
                for i in 0..t {
                    let rows = windows
                        .iter()
                        .map(|&w| g.slice_rows(w, i, 1))
                        .collect::<Result<Vec<_>>>()?;
                    steps.push(g.concat_rows(&rows)?);
                }
                let h = baselines::lstm_encode_steps(g, &steps, p)?;
                if self.config.shortcut {
                    g.add(h, steps[t - 1])?
                } else {
                    h
                }
            }
        };

        let last_rows = windows
            .iter()
            .map(|&w| g.slice_rows(w, t - 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let current = g.concat_rows(&last_rows)?;

        let l = self.config.horizon;
        let rollout = match &self.predictor {
            Predictor::Ppm(p) => ppm::rollout_with(g, summary, current, p, l, self.config.ppm_variant)?,
            Predictor::Ssp(p) => baselines::ssp_rollout(g, summary, current, p)?,
            Predictor::Lstm(p) => baselines::lstm_decode(g, summary, current, self.classifier, p, l)?,
        };
        Ok(ForwardOutput { rollout, head_weights })
    }

    /// Eval-mode rollout for one observed window.
    pub fn predict(&self, observed: &Tensor) -> Result<Rollout> {
        Ok(self.predict_batch(&[observed])?.remove(0))
    }

    pub fn predict_batch(&self, batch: &[&Tensor]) -> Result<Vec<Rollout>> {
        let mut g = Graph::eval(&self.params);
        let out = self.forward(&mut g, batch)?;
        Ok((0..batch.len()).map(|i| out.rollout.extract(&g, i)).collect())
    }

    /// Per-head attention weights over the `T−1` memory slots; `None` for
    /// non-transformer aggregators.
    pub fn attention_weights(&self, observed: &Tensor) -> Result<Option<Vec<Tensor>>> {
        if self.ttm_params().is_none() {
            return Ok(None);
        }
        let mut g = Graph::eval(&self.params);
        let out = self.forward(&mut g, &[observed])?;
        Ok(Some(out.head_weights[0].iter().map(|&v| g.value(v).clone()).collect()))
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (d={}, heads={}, C={}, T={}, l={})",
            self.method_name(),
            self.d_model,
            self.n_heads,
            self.num_classes,
            self.seq_len,
            self.horizon
        )
    }
}
