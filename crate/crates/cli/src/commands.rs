use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use ttpp::checkpoint::{load_model, save_checkpoint, CHECKPOINT_VERSION};
use ttpp::data::io::load_any;
use ttpp::data::{make_all_samples, save_features, save_features_csv, FeatureSequence, Generator, SyntheticConfig};
use ttpp::metrics::{evaluate_horizons, Metric, ReportTable};
use ttpp::model::{param_count, AggregatorKind, Model, ModelConfig, PredictorKind};
use ttpp::ppm::FeatureFeedback;
use ttpp::training::{train, History, TrainConfig};

use crate::config::{DataSource, RunConfig, Seeds};
use crate::outputs::{
    param_counts_csv, write_attention, write_param_counts, AttentionRow, Manifest, ParamCountRow, SeedRecord,
    CHECKPOINT_FILE, HISTORY_FILE, MANIFEST_FILE,
};

pub struct Dataset {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
}

pub fn synthetic_config(cfg: &RunConfig, seeds: Seeds) -> Result<SyntheticConfig> {
    Ok(SyntheticConfig::random(
        cfg.model.num_classes,
        cfg.model.d_model,
        cfg.data.duration,
        cfg.data.noise,
        seeds.data,
    )?)
}

/// Train sequences first, then test, all from one generator.
pub fn synthesize(cfg: &RunConfig, seeds: Seeds) -> Result<Dataset> {
    let mut gen = Generator::new(synthetic_config(cfg, seeds)?)?;
    let d = &cfg.data;
    let train = (0..d.n_train)
        .map(|i| gen.sequence(format!("train{i:04}"), d.length))
        .collect::<ttpp::Result<_>>()?;
    let test = (0..d.n_test)
        .map(|i| gen.sequence(format!("test{i:04}"), d.length))
        .collect::<ttpp::Result<_>>()?;
    Ok(Dataset { train, test })
}

/// Explicit paths, or every `.feat`/`.csv` file in `dir` in name order.
fn feature_files(explicit: &[PathBuf], dir: &Path) -> Result<Vec<PathBuf>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    let entries = fs::read_dir(dir).with_context(|| format!("cannot list feature directory {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if matches!(p.extension().and_then(|x| x.to_str()), Some("feat" | "csv")) {
            files.push(p);
        }
    }
    files.sort();
    ensure!(!files.is_empty(), "no .feat or .csv files in {}", dir.display());
    Ok(files)
}

fn load_split(cfg: &RunConfig, explicit: &[PathBuf], split: &str) -> Result<Vec<FeatureSequence>> {
    let files = feature_files(explicit, &cfg.data.dir.join(split))?;
    files
        .iter()
        .map(|p| {
            let seq = load_any(p).with_context(|| format!("loading {}", p.display()))?;
            ensure!(
                seq.d_model() == cfg.model.d_model && seq.num_classes() == cfg.model.num_classes,
                "{}: d_model {} / {} classes, config expects {} / {}",
                p.display(),
                seq.d_model(),
                seq.num_classes(),
                cfg.model.d_model,
                cfg.model.num_classes
            );
            Ok(seq)
        })
        .collect()
}

pub fn load_data(cfg: &RunConfig, seeds: Seeds) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => synthesize(cfg, seeds),
        DataSource::Files => Ok(Dataset {
            train: load_split(cfg, &cfg.data.train, "train")?,
            test: load_split(cfg, &cfg.data.test, "test")?,
        }),
    }
}

pub fn gen(cfg: &RunConfig, csv: bool) -> Result<()> {
    let data = synthesize(cfg, cfg.seeds())?;
    for (split, seqs) in [("train", &data.train), ("test", &data.test)] {
        let dir = cfg.data.dir.join(split);
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for s in seqs {
            if csv {
                save_features_csv(s, dir.join(format!("{}.csv", s.video_id)))?;
            } else {
                save_features(s, dir.join(format!("{}.feat", s.video_id)))?;
            }
        }
    }
    println!(
        "wrote {} train and {} test sequences under {}",
        data.train.len(),
        data.test.len(),
        cfg.data.dir.display()
    );
    Ok(())
}

pub fn fit(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: Seeds,
    seqs: &[FeatureSequence],
) -> Result<(Model, History, usize)> {
    let samples = make_all_samples(seqs, model_cfg.seq_len, model_cfg.horizon)?;
    ensure!(
        !samples.is_empty(),
        "no training windows: every sequence is shorter than seq_len + horizon = {}",
        model_cfg.seq_len + model_cfg.horizon
    );
    let mut model = Model::new(model_cfg.clone(), seeds.init)?;
    let tc = TrainConfig {
        seed: seeds.train,
        ..train_cfg.clone()
    };
    let history = train(&mut model, &samples, &tc)?;
    Ok((model, history, samples.len()))
}

pub fn train_run(cfg: &RunConfig) -> Result<()> {
    let seeds = cfg.seeds();
    let data = load_data(cfg, seeds)?;
    let (model, history, n_samples) = fit(&cfg.model, &cfg.train, seeds, &data.train)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    save_checkpoint(model.params(), out.join(CHECKPOINT_FILE))?;
    history.write_csv(out.join(HISTORY_FILE))?;
    let manifest = Manifest {
        checkpoint_version: CHECKPOINT_VERSION,
        seeds: SeedRecord {
            run: cfg.seed,
            data: seeds.data,
            init: seeds.init,
            train: seeds.train,
        },
        config: cfg.resolved().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        model: cfg.model.clone(),
        train: TrainConfig {
            seed: seeds.train,
            ..cfg.train.clone()
        },
        param_count: model.params().num_scalars(),
        param_checksum: model.params().checksum(),
        train_sequences: data.train.len(),
        train_samples: n_samples,
        files: vec![CHECKPOINT_FILE.into(), HISTORY_FILE.into()],
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    if let Some(last) = history.last() {
        println!(
            "{}: epoch {} total {:.6} acc_h1 {:.4}; wrote {}",
            cfg.model.method_name(),
            last.epoch,
            last.total,
            last.acc_h1,
            out.display()
        );
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
    if !path.is_file() {
        bail!(
            "checkpoint not found: {} (run `ttpp train` first or pass --checkpoint)",
            path.display()
        );
    }
    Ok(path)
}

fn trained_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint_path(cfg, checkpoint)?;
    load_model(cfg.model.clone(), &path).with_context(|| format!("loading {}", path.display()))
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, metric: Metric, out: Option<&Path>) -> Result<()> {
    let model = trained_model(cfg, checkpoint)?;
    let data = load_data(cfg, cfg.seeds())?;
    let report = evaluate_horizons(&model, &data.test, metric)?;
    let table = ReportTable::from_report(cfg.model.method_name(), &report);
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(format!("report_{metric}.csv")));
    create_parent(&path)?;
    table.write_csv(&path)?;
    print!("{}", table.to_csv());
    Ok(())
}

/// The nine aggregator × predictor pairs, then TTM-PPM without feature feedback.
pub fn grid_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut cells: Vec<ModelConfig> = AggregatorKind::ALL
        .iter()
        .flat_map(|&a| PredictorKind::ALL.iter().map(move |&p| (a, p)))
        .map(|(a, p)| base.with_pair(a, p))
        .collect();
    cells.push(ModelConfig {
        ppm_variant: FeatureFeedback::NoFeature,
        ..base.with_pair(AggregatorKind::Ttm, PredictorKind::Ppm)
    });
    cells
}

pub fn grid(cfg: &RunConfig, metric: Metric, out: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let data = load_data(cfg, cfg.seeds())?;
    let cells = grid_configs(&cfg.model);
    for c in &cells {
        c.validate().with_context(|| format!("grid cell {}", c.method_name()))?;
    }
    let run_cell = |(i, mc): (usize, &ModelConfig)| -> Result<_> {
        let (model, _, _) = fit(mc, &cfg.train, cfg.cell_seeds(i), &data.train)?;
        let report = evaluate_horizons(&model, &data.test, metric)?;
        Ok(report.to_row(mc.method_name()))
    };
    let rows: Vec<_> = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| cells.par_iter().enumerate().map(run_cell).collect::<Result<_>>())?,
        None => cells.par_iter().enumerate().map(run_cell).collect::<Result<_>>()?,
    };
    let chunk_seconds = data
        .test
        .first()
        .map(|s| s.chunk_seconds)
        .unwrap_or(ttpp::data::DEFAULT_CHUNK_SECONDS);
    let mut table = ReportTable::new(cfg.model.horizon, chunk_seconds);
    for row in rows {
        table.push(row)?;
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(format!("grid_{metric}.csv")));
    create_parent(&path)?;
    table.write_csv(&path)?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn dump_attention(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    limit: Option<usize>,
) -> Result<()> {
    ensure!(
        cfg.model.aggregator == AggregatorKind::Ttm,
        "attention weights exist only for the ttm aggregator, config has {}",
        cfg.model.aggregator.label()
    );
    let model = trained_model(cfg, checkpoint)?;
    let data = load_data(cfg, cfg.seeds())?;
    let big_t = cfg.model.seq_len;
    let mut rows = Vec::new();
    for seq in data.test.iter().take(limit.unwrap_or(usize::MAX)) {
        for t in big_t.saturating_sub(1)..seq.len() {
            let heads = model
                .attention_weights(&seq.window(t + 1 - big_t, big_t)?)?
                .expect("ttm aggregator yields weights");
            for (head, w) in heads.iter().enumerate() {
                for (memory_pos, &weight) in w.data().iter().enumerate() {
                    rows.push(AttentionRow {
                        video_id: seq.video_id.clone(),
                        t,
                        head,
                        memory_pos,
                        weight,
                    });
                }
            }
        }
    }
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("attention.csv"));
    create_parent(&path)?;
    write_attention(&rows, &path)?;
    println!("wrote {} attention weights to {}", rows.len(), path.display());
    Ok(())
}

pub fn param_counts(cfg: &RunConfig, d_models: &[usize]) -> Result<Vec<ParamCountRow>> {
    let dims = if d_models.is_empty() {
        vec![cfg.model.d_model]
    } else {
        d_models.to_vec()
    };
    let mut rows = Vec::new();
    for d in dims {
        let base = ModelConfig {
            d_model: d,
            ..cfg.model.clone()
        };
        let mut seen = BTreeMap::new();
        for mc in grid_configs(&base) {
            base_check(&mc)?;
            if seen.insert(mc.method_name(), ()).is_none() {
                rows.push(ParamCountRow {
                    method: mc.method_name(),
                    d_model: d,
                    num_classes: mc.num_classes,
                    horizon: mc.horizon,
                    params: param_count(&mc),
                });
            }
        }
    }
    Ok(rows)
}

fn base_check(mc: &ModelConfig) -> Result<()> {
    ensure!(
        mc.d_model >= 2 && mc.d_model.is_multiple_of(2),
        "d_model must be even and ≥ 2, got {}",
        mc.d_model
    );
    ensure!(mc.num_classes >= 2, "need at least 2 classes");
    Ok(())
}

pub fn param_count_cmd(cfg: &RunConfig, d_models: &[usize], out: Option<&Path>) -> Result<()> {
    let rows = param_counts(cfg, d_models)?;
    if let Some(path) = out {
        create_parent(path)?;
        write_param_counts(&rows, path)?;
    }
    print!("{}", param_counts_csv(&rows)?);
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}
