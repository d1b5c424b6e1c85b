//! Run configuration: a flat `key = value` file plus overrides.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so
//! applying defaults, then the file, then `--set` flags gives the
//! flags > file > defaults precedence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ttpp::data::DurationLaw;
use ttpp::model::ModelConfig;
use ttpp::ppm::FeatureFeedback;
use ttpp::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Where `gen` writes and where `files` data is read from by default.
    pub dir: PathBuf,
    /// Explicit file lists; empty means `<dir>/train` and `<dir>/test`.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub length: usize,
    pub noise: f64,
    pub duration: DurationLaw,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            dir: PathBuf::from("data"),
            train: Vec::new(),
            test: Vec::new(),
            n_train: 30,
            n_test: 20,
            length: 60,
            noise: 0.1,
            duration: DurationLaw::Uniform { min: 3, max: 10 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `train.seed` is ignored here; seeds come from [`RunConfig::seeds`].
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                d_model: 16,
                n_heads: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 0.003,
                batch_size: 16,
                epochs: 30,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Sub-seeds drawn in a fixed order from the single run generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
}

pub const KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "model.aggregator",
    "model.predictor",
    "model.ppm_variant",
    "model.d_model",
    "model.n_heads",
    "model.num_classes",
    "model.seq_len",
    "model.horizon",
    "model.dropout",
    "model.shortcut",
    "train.lr",
    "train.momentum",
    "train.batch_size",
    "train.epochs",
    "train.lambda",
    "data.source",
    "data.dir",
    "data.train",
    "data.test",
    "data.n_train",
    "data.n_test",
    "data.length",
    "data.noise",
    "data.duration",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn paths(value: &str) -> Vec<PathBuf> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

/// `geometric:<mean>` or `uniform:<min>:<max>`.
pub fn parse_duration(value: &str) -> Result<DurationLaw> {
    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
    let law = match parts.as_slice() {
        ["geometric", mean] => DurationLaw::Geometric {
            mean: num("data.duration", mean)?,
        },
        ["uniform", min, max] => DurationLaw::Uniform {
            min: num("data.duration", min)?,
            max: num("data.duration", max)?,
        },
        _ => bail!("data.duration: expected geometric:<mean> or uniform:<min>:<max>, got {value:?}"),
    };
    law.validate()?;
    Ok(law)
}

pub fn format_duration(law: &DurationLaw) -> String {
    match law {
        DurationLaw::Geometric { mean } => format!("geometric:{mean}"),
        DurationLaw::Uniform { min, max } => format!("uniform:{min}:{max}"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "model.aggregator" => m.aggregator = v.parse()?,
            "model.predictor" => m.predictor = v.parse()?,
            "model.ppm_variant" => m.ppm_variant = v.parse()?,
            "model.d_model" => m.d_model = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.num_classes" => m.num_classes = num(key, v)?,
            "model.seq_len" => m.seq_len = num(key, v)?,
            "model.horizon" => m.horizon = num(key, v)?,
            "model.dropout" => m.dropout = num(key, v)?,
            "model.shortcut" => m.shortcut = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lambda" => t.lambda = num(key, v)?,
            "data.source" => {
                d.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "files" => DataSource::Files,
                    _ => bail!("data.source: expected synthetic or files, got {v:?}"),
                }
            }
            "data.dir" => d.dir = PathBuf::from(v),
            "data.train" => d.train = paths(v),
            "data.test" => d.test = paths(v),
            "data.n_train" => d.n_train = num(key, v)?,
            "data.n_test" => d.n_test = num(key, v)?,
            "data.length" => d.length = num(key, v)?,
            "data.noise" => d.noise = num(key, v)?,
            "data.duration" => d.duration = parse_duration(v)?,
            other => bail!("unknown config key {other:?}; known keys: {}", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; errors carry the 1-based line number.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`, got {raw:?}", i + 1))?;
            self.set(k, v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Overrides of the form `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {assignment:?}"))?;
        self.set(k, v).with_context(|| format!("--set {assignment}"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.duration.validate()?;
        if self.data.source == DataSource::Synthetic {
            let need = self.model.seq_len + self.model.horizon;
            if self.data.length < need + 1 {
                bail!(
                    "data.length = {} is shorter than seq_len + horizon + 1 = {}",
                    self.data.length,
                    need + 1
                );
            }
            if self.data.n_train == 0 || self.data.n_test == 0 {
                bail!("data.n_train and data.n_test must be positive");
            }
            if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
                bail!("data.noise must be ≥ 0, got {}", self.data.noise);
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Seeds {
            data: rng.random(),
            init: rng.random(),
            train: rng.random(),
        }
    }

    /// Independent init/train seeds for grid cell `cell`; data stays shared.
    pub fn cell_seeds(&self, cell: usize) -> Seeds {
        let base = self.seeds();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(cell as u64 + 1);
        Seeds {
            data: base.data,
            init: rng.random(),
            train: rng.random(),
        }
    }

    /// Every key with its resolved value, for the manifest.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let join = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        let values = [
            self.seed.to_string(),
            self.output_dir.display().to_string(),
            m.aggregator.label().to_ascii_lowercase(),
            m.predictor.label().to_ascii_lowercase(),
            match m.ppm_variant {
                FeatureFeedback::Full => "full".into(),
                FeatureFeedback::NoFeature => "no_feature".into(),
            },
            m.d_model.to_string(),
            m.n_heads.to_string(),
            m.num_classes.to_string(),
            m.seq_len.to_string(),
            m.horizon.to_string(),
            m.dropout.to_string(),
            m.shortcut.to_string(),
            t.lr.to_string(),
            t.momentum.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.lambda.to_string(),
            match d.source {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Files => "files".into(),
            },
            d.dir.display().to_string(),
            join(&d.train),
            join(&d.test),
            d.n_train.to_string(),
            d.n_test.to_string(),
            d.length.to_string(),
            d.noise.to_string(),
            format_duration(&d.duration),
        ];
        KEYS.iter().copied().zip(values).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_assignments_win() {
        let mut c = RunConfig::default();
        c.apply_text("model.d_model = 32  # wider\n\ntrain.epochs=3\n", "f")
            .unwrap();
        c.apply_override("model.d_model=8").unwrap();
        assert_eq!(c.model.d_model, 8);
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 1\nmodel.widht = 3\n", "run.conf").unwrap_err();
        assert!(format!("{err:#}").contains("run.conf:2"), "{err:#}");
        assert!(c.apply_text("no equals sign", "x").is_err());
        assert!(c.apply_override("train.lr=fast").is_err());
    }

    #[test]
    fn resolved_round_trips_through_set() {
        let mut c = RunConfig::default();
        c.apply_text(
            "data.duration = geometric:4.5\ndata.train = a.feat, b.feat\nmodel.aggregator = lstm",
            "f",
        )
        .unwrap();
        let mut back = RunConfig::default();
        for (k, v) in c.resolved() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn grid_cells_get_distinct_streams() {
        let c = RunConfig::default();
        let (a, b) = (c.cell_seeds(0), c.cell_seeds(1));
        assert_eq!(a.data, b.data);
        assert_ne!(a.init, b.init);
        assert_eq!(c.cell_seeds(3), c.cell_seeds(3));
    }
}
