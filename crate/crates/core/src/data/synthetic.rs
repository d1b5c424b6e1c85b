//! Semi-Markov synthetic sequences.
//!
//! Labels come in segments. Each segment's length is drawn from a duration
//! law; when it ends, the next label is drawn from the transition row of the
//! current one. Every chunk feature is its class prototype plus isotropic
//! Gaussian noise, rounded to `f32` so sequences survive the binary format
//! unchanged.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Segment length distribution, in chunks (always ≥ 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DurationLaw {
    /// `P(D = k) = p(1 − p)^(k−1)` with `p = 1 / mean`. Memoryless: the time
    /// already spent in a segment says nothing about when it ends.
    Geometric { mean: f64 },
    /// Uniform over `min..=max`. The elapsed time in a segment is informative.
    Uniform { min: usize, max: usize },
}

impl DurationLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DurationLaw::Geometric { mean } if !(mean >= 1.0 && mean.is_finite()) => Err(Error::Config(format!(
                "geometric duration mean must be ≥ 1, got {mean}"
            ))),
            DurationLaw::Uniform { min, max } if min == 0 || max < min => Err(Error::Config(format!(
                "uniform durations need 1 ≤ min ≤ max, got {min}..={max}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DurationLaw::Geometric { mean } => mean,
            DurationLaw::Uniform { min, max } => (min + max) as f64 / 2.0,
        }
    }

    /// `pmf[k] = P(D = k + 1)`. The geometric tail is cut once it falls below
    /// 1e-17 and the remainder renormalized.
    pub fn pmf(&self) -> Vec<f64> {
        match *self {
            DurationLaw::Geometric { mean } => {
                let p = 1.0 / mean;
                let q = 1.0 - p;
                let mut out = Vec::new();
                let mut tail = 1.0;
                while tail >= 1e-17 && out.len() < 100_000 {
                    out.push(tail * p);
                    tail *= q;
                }
                let z: f64 = out.iter().sum();
                out.iter().map(|v| v / z).collect()
            }
            DurationLaw::Uniform { min, max } => {
                let w = 1.0 / (max - min + 1) as f64;
                (1..=max).map(|k| if k >= min { w } else { 0.0 }).collect()
            }
        }
    }

    fn sampler(&self) -> Result<DurationSampler> {
        self.validate()?;
        Ok(match *self {
            DurationLaw::Geometric { mean } => DurationSampler::Geometric(
                Geometric::new(1.0 / mean).map_err(|e| Error::Config(format!("duration law: {e}")))?,
            ),
            DurationLaw::Uniform { min, max } => DurationSampler::Uniform(min, max),
        })
    }
}

#[derive(Debug, Clone)]
enum DurationSampler {
    Geometric(Geometric),
    Uniform(usize, usize),
}

impl DurationSampler {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        match self {
            DurationSampler::Geometric(g) => 1 + g.sample(rng) as usize,
            DurationSampler::Uniform(a, b) => rng.random_range(*a..=*b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Including background (class 0).
    pub num_classes: usize,
    pub d_model: usize,
    /// `C × C`, row-stochastic; row `a` is the distribution of the label that
    /// follows a segment of `a`.
    pub transition: Tensor,
    pub duration: DurationLaw,
    /// `C × d_model` class means.
    pub prototypes: Tensor,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Random prototypes with unit-variance entries and random transitions
    /// without self-loops, both derived from `seed`.
    pub fn random(
        num_classes: usize,
        d_model: usize,
        duration: DurationLaw,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 || d_model < 1 {
            return Err(Error::Config(format!(
                "synthetic data needs ≥ 2 classes and d_model ≥ 1, got {num_classes} and {d_model}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let protos: Vec<f64> = (0..num_classes * d_model)
            .map(|_| unit.sample(&mut rng) as f32 as f64)
            .collect();
        let mut trans = Tensor::zeros(num_classes, num_classes);
        for a in 0..num_classes {
            let w: Vec<f64> = (0..num_classes)
                .map(|b| if a == b { 0.0 } else { rng.random_range(0.1..1.0) })
                .collect();
            let z: f64 = w.iter().sum();
            for (b, v) in w.iter().enumerate() {
                trans.set(a, b, v / z);
            }
        }
        let cfg = SyntheticConfig {
            num_classes,
            d_model,
            transition: trans,
            duration,
            prototypes: Tensor::matrix(num_classes, d_model, protos)?,
            noise_sigma,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if self.transition.shape() != [c, c] {
            return Err(Error::dim("transition", self.transition.shape(), &[c, c]));
        }
        if self.prototypes.shape() != [c, self.d_model] {
            return Err(Error::dim("prototypes", self.prototypes.shape(), &[c, self.d_model]));
        }
        for (a, row) in self.transition.iter_rows().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "transition row {a} is not a distribution: {row:?}"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        self.duration.validate()
    }
}

/// A run of identical labels as drawn by the process (consecutive segments
/// may share a label when the transition matrix has self-loops).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: SyntheticConfig,
    rng: ChaCha8Rng,
    rows: Vec<WeightedIndex<f64>>,
    durations: DurationSampler,
    noise: Normal<f64>,
}

impl Generator {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let rows = cfg
            .transition
            .iter_rows()
            .map(|r| WeightedIndex::new(r.iter().copied()).map_err(|e| Error::Config(format!("transition: {e}"))))
            .collect::<Result<_>>()?;
        let durations = cfg.duration.sampler()?;
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
        Ok(Generator {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            rows,
            durations,
            noise,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// Segments covering exactly `length` chunks; the last one is cut short.
    /// The first label is uniform and its segment starts fresh at chunk 0.
    pub fn segments(&mut self, length: usize) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut label = self.rng.random_range(0..self.cfg.num_classes);
        let mut left = length;
        while left > 0 {
            let len = self.durations.sample(&mut self.rng).min(left);
            out.push(Segment { label, len });
            left -= len;
            label = self.rows[label].sample(&mut self.rng);
        }
        out
    }

    pub fn sequence(&mut self, video_id: impl Into<String>, length: usize) -> Result<FeatureSequence> {
        if length == 0 {
            return Err(Error::Config("synthetic sequences need at least one chunk".into()));
        }
        let labels: Vec<usize> = self
            .segments(length)
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.label, s.len))
            .collect();
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(length * d);
        for &l in &labels {
            for j in 0..d {
                let v = self.cfg.prototypes.get(l, j) + self.noise.sample(&mut self.rng);
                data.push(v as f32 as f64);
            }
        }
        FeatureSequence::new(video_id, Tensor::matrix(length, d, data)?, labels, self.cfg.num_classes)
    }
}

/// `n` sequences of `length` chunks named `syn0000`, `syn0001`, ….
pub fn gen_synthetic(cfg: &SyntheticConfig, n: usize, length: usize) -> Result<Vec<FeatureSequence>> {
    let mut gen = Generator::new(cfg.clone())?;
    (0..n).map(|i| gen.sequence(format!("syn{i:04}"), length)).collect()
}

/// Exact future label distributions for the synthetic process, obtained by
/// propagating the joint law of (label, chunks left in the segment).
#[derive(Debug, Clone)]
pub struct BayesOracle {
    transition: Tensor,
    /// `pmf[k] = P(D = k + 1)`
    pmf: Vec<f64>,
    /// `survival[r] = P(D > r)`
    survival: Vec<f64>,
}

impl BayesOracle {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let pmf = cfg.duration.pmf();
        let mut survival = Vec::with_capacity(pmf.len());
        let mut s = 1.0;
        for &p in &pmf {
            survival.push(s);
            s -= p;
        }
        Ok(BayesOracle {
            transition: cfg.transition.clone(),
            pmf,
            survival,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.transition.rows()
    }

    /// `horizon × C` distributions given only the current label, with the
    /// time left in the segment at its long-run (length-biased) law
    /// `P(R = r) ∝ P(D > r)`.
    pub fn predict(&self, label: usize, horizon: usize) -> Tensor {
        self.propagate(label, self.survival.clone(), horizon)
    }

    /// As [`predict`](Self::predict), knowing the current segment has lasted
    /// `age ≥ 1` chunks so far (current chunk included).
    pub fn predict_given_age(&self, label: usize, age: usize, horizon: usize) -> Tensor {
        let age = age.max(1);
        let residual: Vec<f64> = (0..self.pmf.len())
            .map(|r| self.pmf.get(age - 1 + r).copied().unwrap_or(0.0))
            .collect();
        if residual.iter().sum::<f64>() > 0.0 {
            self.propagate(label, residual, horizon)
        } else {
            // Longer than the law allows: treat the segment as ending now.
            let mut now = vec![0.0; self.pmf.len()];
            now[0] = 1.0;
            self.propagate(label, now, horizon)
        }
    }

    fn propagate(&self, label: usize, residual: Vec<f64>, horizon: usize) -> Tensor {
        let (c, k) = (self.num_classes(), self.pmf.len());
        let z: f64 = residual.iter().sum();
        let mut state = vec![vec![0.0; k]; c];
        for (r, w) in residual.iter().enumerate() {
            state[label][r] = w / z;
        }
        let mut out = Tensor::zeros(horizon.max(1), c);
        for step in 0..horizon {
            let mut next = vec![vec![0.0; k]; c];
            for a in 0..c {
                for r in 1..k {
                    next[a][r - 1] += state[a][r];
                }
                let ending = state[a][0];
                if ending > 0.0 {
                    for b in 0..c {
                        let m = ending * self.transition.get(a, b);
                        if m > 0.0 {
                            for (r, p) in self.pmf.iter().enumerate() {
                                next[b][r] += m * p;
                            }
                        }
                    }
                }
            }
            state = next;
            for b in 0..c {
                out.set(step, b, state[b].iter().sum());
            }
        }
        out
    }
}
