//! Experiment directories: dataset preparation, per-seed runs, aggregate
//! reports and figures.
//!
//! ```text
//! <dir>/experiment.toml       the full configuration bundle
//! <dir>/data/                 synthetic raw clips and their manifest
//! <dir>/clips/                preprocessed clips, manifest.tsv, hashes.tsv
//! <dir>/split.json            source ids of the train and test sets
//! <dir>/seed-<s>/             logs, checkpoints, predictions.json, metrics.json
//! <dir>/report.json           MetricsReport over all seeds
//! <dir>/baseline.json         MetricsReport of the train-mean predictor
//! <dir>/summary.txt           plain-text table of both
//! <dir>/plots/                scatter per seed, data efficiency when pretrained
//! ```

use std::path::{Path, PathBuf};

use cardio_ssl::evaluate::{aggregate_seeds, format_table, mean_baseline, SplitMetrics};
use cardio_ssl::io::{self, HashRecord, HASH_INDEX};
use cardio_ssl::models::{Checkpoint, CheckpointKind, RegressionModel};
use cardio_ssl::preprocess::preprocess_clip;
use cardio_ssl::train::{read_log, run_seed, LogRecord, Predictions};
use cardio_ssl::{data, synthdata, Clip, Manifest, ManifestEntry, MetricsReport, SeedMetrics, CLIP_FRAMES};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, DEFAULT_OUT_ROOT, OUT_ROOT_ENV};
use crate::error::{CliError, Result};
use crate::plot::{plot_data_efficiency, plot_scatter, EfficiencyPoint};

pub const CONFIG_FILE: &str = "experiment.toml";
pub const BASELINE_KEY: &str = "baseline-mean";

/// `out` itself when given, otherwise a fresh timestamped directory under the
/// output root from the environment (or `runs/`).
pub fn experiment_dir(out: Option<&Path>, name: &str) -> PathBuf {
    match out {
        Some(dir) => dir.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUT_ROOT.into());
            root.join(format!("{name}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S")))
        }
    }
}

/// Reads every clip of a manifest. `.clip` files are loaded as they are and
/// anything else is treated as a raw container and preprocessed. Labels
/// always come from the manifest.
pub fn load_clips(manifest: &Manifest, base: &Path) -> Result<Vec<Clip>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = io::resolve(base, &e.path);
            let clip =
                if path.extension().is_some_and(|x| x == "clip") { io::read_clip(&path)? } else { preprocess_clip(&io::read_raw(&path)?)? };
            if clip.source_id != e.source_id {
                return Err(cardio_ssl::Error::ManifestIntegrity(format!(
                    "{} holds clip {:?}, manifest says {:?}",
                    path.display(),
                    clip.source_id,
                    e.source_id
                ))
                .into());
            }
            Ok(clip.with_label(e.label))
        })
        .collect()
}

/// Preprocesses every raw clip of `manifest` into `out`, writing one `.clip`
/// per entry, `manifest.tsv` and the content hash index. Returns the new
/// manifest, whose paths are relative to `out`.
pub fn preprocess_manifest(manifest: &Manifest, base: &Path, out: &Path) -> Result<Manifest> {
    manifest.check_unique_ids()?;
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(manifest.len());
    let mut hashes = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let raw = io::read_raw(&io::resolve(base, &e.path))?;
        let clip = preprocess_clip(&raw)?.with_label(e.label);
        let file = format!("{}.clip", io::file_stem(&e.source_id));
        let bytes = io::encode_clip(&clip);
        std::fs::write(out.join(&file), &bytes)?;
        hashes.push(HashRecord { source_id: e.source_id.clone(), file: file.clone(), sha256: io::sha256_hex(&bytes) });
        entries.push(ManifestEntry {
            source_id: e.source_id.clone(),
            path: file.into(),
            fps: cardio_ssl::preprocess::TARGET_FPS,
            frame_count: CLIP_FRAMES,
            label: e.label,
        });
    }
    io::write_hash_index(&hashes, &out.join(HASH_INDEX))?;
    let clips = Manifest::new(entries);
    clips.write(&out.join("manifest.tsv"))?;
    Ok(clips)
}

/// Checks every file listed in a hash index against its recorded digest.
pub fn verify_hashes(dir: &Path) -> Result<()> {
    for r in io::read_hash_index(&dir.join(HASH_INDEX))? {
        let path = dir.join(&r.file);
        if io::sha256_hex(&std::fs::read(&path)?) != r.sha256 {
            return Err(CliError::conflict(path, "content hash differs from the index"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Preprocessed, labeled train and test clips of an experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Clip>,
    pub test: Vec<Clip>,
}

impl Dataset {
    pub fn split_ids(&self) -> SplitIds {
        let ids = |c: &[Clip]| c.iter().map(|c| c.source_id.clone()).collect();
        SplitIds { train: ids(&self.train), test: ids(&self.test) }
    }
}

/// Generates and preprocesses the experiment's synthetic data, or reuses
/// (after a hash check) clips already present in `dir`.
pub fn prepare_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let clips_dir = dir.join("clips");
    let manifest_path = clips_dir.join("manifest.tsv");
    let manifest = if manifest_path.exists() && clips_dir.join(HASH_INDEX).exists() {
        verify_hashes(&clips_dir)?;
        Manifest::read(&manifest_path)?
    } else {
        log::info!("generating {} synthetic clips", cfg.synth.n_clips);
        let data_dir = dir.join("data");
        let raw = synthdata::gen_dataset(&cfg.synth, &data_dir)?;
        log::info!("preprocessing into {}", clips_dir.display());
        preprocess_manifest(&raw, &data_dir, &clips_dir)?
    };
    let (train_m, test_m) = data::split_manifest(&manifest, &cfg.split)?;
    let ds = Dataset { train: load_clips(&train_m, &clips_dir)?, test: load_clips(&test_m, &clips_dir)? };
    write_or_check(&dir.join("split.json"), &serde_json::to_string_pretty(&ds.split_ids())?)?;
    Ok(ds)
}

/// Writes `text` to `path`, or confirms an existing file already holds it.
fn write_or_check(path: &Path, text: &str) -> Result<()> {
    match std::fs::read_to_string(path) {
        Ok(existing) if existing == text => Ok(()),
        Ok(_) => Err(CliError::conflict(path, "an earlier run wrote different contents; use a new output directory")),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(std::fs::write(path, text)?),
        Err(e) => Err(e.into()),
    }
}

/// Everything one seed produced, as read back from its directory.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pretrain_log: Vec<LogRecord>,
    pub train_log: Vec<LogRecord>,
    pub predictions: Predictions,
    pub metrics: SeedMetrics,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub report: MetricsReport,
    pub baseline: MetricsReport,
}

fn read_log_if_present(path: &Path) -> Result<Vec<LogRecord>> {
    if path.exists() {
        Ok(read_log(path)?)
    } else {
        Ok(vec![])
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn seed_complete(dir: &Path) -> bool {
    ["model.ckpt", "predictions.json", "metrics.json"].iter().all(|f| dir.join(f).exists())
}

/// Runs (or resumes) one seed inside the experiment directory.
fn run_one_seed(cfg: &ExperimentConfig, dir: &Path, data: &Dataset, seed: u64) -> Result<SeedOutcome> {
    let seed_dir = dir.join(format!("seed-{seed}"));
    if seed_complete(&seed_dir) {
        log::info!("seed {seed}: reusing finished run in {}", seed_dir.display());
        let predictions: Predictions = read_json(&seed_dir.join("predictions.json"))?;
        let stored: SeedMetrics = read_json(&seed_dir.join("metrics.json"))?;
        if predictions.metrics(&cfg.plan.key, seed)? != stored {
            return Err(CliError::Mismatch(seed_dir));
        }
        return Ok(SeedOutcome {
            seed,
            pretrain_log: read_log_if_present(&seed_dir.join("pretrain.log.jsonl"))?,
            train_log: read_log_if_present(&seed_dir.join(train_log_name(cfg)))?,
            predictions,
            metrics: stored,
        });
    }
    // stages after pretraining restart from scratch, so their logs do too
    for stale in ["finetune.log.jsonl", "supervised.log.jsonl"] {
        let p = seed_dir.join(stale);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    log::info!("seed {seed}: running {}", cfg.plan.key);
    let run = run_seed(&cfg.plan, &data.train, &data.test, seed, Some(dir))?;
    Ok(SeedOutcome { seed, pretrain_log: run.pretrain_log, train_log: run.train_log, predictions: run.predictions, metrics: run.metrics })
}

fn train_log_name(cfg: &ExperimentConfig) -> &'static str {
    if cfg.is_supervised() {
        "supervised.log.jsonl"
    } else {
        "finetune.log.jsonl"
    }
}

/// Train-mean predictor scored on both splits.
pub fn baseline_report(data: &Dataset, split_seed: u64) -> Result<MetricsReport> {
    let labels = |c: &[Clip]| -> Result<Vec<f64>> {
        c.iter()
            .map(|c| c.label.ok_or_else(|| cardio_ssl::Error::InvalidInput(format!("clip {} has no label", c.source_id)).into()))
            .collect()
    };
    let (train_y, test_y) = (labels(&data.train)?, labels(&data.test)?);
    let b = mean_baseline(&train_y)?;
    let m = SeedMetrics {
        key: BASELINE_KEY.into(),
        seed: split_seed,
        train: SplitMetrics::compute(&train_y, &b.predict(train_y.len()))?,
        test: SplitMetrics::compute(&test_y, &b.predict(test_y.len()))?,
    };
    Ok(aggregate_seeds(&[m])?)
}

/// Runs an experiment on an already prepared dataset.
pub fn run_on(cfg: &ExperimentConfig, dir: &Path, data: &Dataset) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    write_or_check(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let seeds: Vec<SeedOutcome> = cfg.seeds.iter().map(|&s| run_one_seed(cfg, dir, data, s)).collect::<Result<_>>()?;
    let metrics: Vec<SeedMetrics> = seeds.iter().map(|s| s.metrics.clone()).collect();
    let report = aggregate_seeds(&metrics)?;
    let baseline = baseline_report(data, cfg.split.seed)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    std::fs::write(dir.join("baseline.json"), baseline.to_json()?)?;
    std::fs::write(dir.join("summary.txt"), format_table(&[report.clone(), baseline.clone()]))?;

    let plots = dir.join("plots");
    for s in &seeds {
        let (truth, pred): (Vec<f64>, Vec<f64>) = s.predictions.test.iter().map(|r| (r.truth, r.prediction)).unzip();
        plot_scatter(&format!("{} seed {} test set", cfg.plan.key, s.seed), &truth, &pred)?
            .write(&plots, &format!("scatter-test-seed-{}", s.seed))?;
    }
    if let (true, Some(p)) = (cfg.is_pretrained(), &report.test.pearson) {
        let point = EfficiencyPoint { size: data.train.len() as f64, pearson: p.mean, label: cfg.plan.key.clone() };
        plot_data_efficiency("Test Pearson vs pretraining set size", &[point])?.write(&plots, "data-efficiency")?;
    }
    Ok(ExperimentOutcome { dir: dir.to_path_buf(), seeds, report, baseline })
}

/// Prepares the data and runs every seed. An existing directory is resumed
/// when it was created by the same configuration.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    write_or_check(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let data = prepare_dataset(cfg, dir)?;
    run_on(cfg, dir, &data)
}

/// Recomputes an experiment's report from its stored predictions and checks
/// it against the stored `report.json`.
pub fn reevaluate(dir: &Path) -> Result<MetricsReport> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let per_seed: Vec<SeedMetrics> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let preds: Predictions = read_json(&dir.join(format!("seed-{s}")).join("predictions.json"))?;
            Ok(preds.metrics(&cfg.plan.key, s)?)
        })
        .collect::<Result<_>>()?;
    let report = aggregate_seeds(&per_seed)?;
    let stored = MetricsReport::from_json(&std::fs::read_to_string(dir.join("report.json"))?)?;
    if stored != report {
        return Err(CliError::Mismatch(dir.to_path_buf()));
    }
    Ok(report)
}

/// Wraps a trained model in a checkpoint for saving.
pub fn model_checkpoint(kind: CheckpointKind, epoch: usize, seed: u64, config: serde_json::Value, model: &RegressionModel) -> Checkpoint {
    Checkpoint {
        kind,
        epoch,
        seed,
        train_config: config,
        encoder: model.encoder.clone(),
        projection: None,
        head: Some(model.head.clone()),
        encoder_optim: None,
        head_optim: None,
    }
}

pub fn model_from_checkpoint(ck: Checkpoint, origin: &Path) -> Result<RegressionModel> {
    let head = ck.head.ok_or_else(|| CliError::config(origin, "checkpoint holds no regression head"))?;
    Ok(RegressionModel::new(ck.encoder, head))
}

/// Combined table, per-seed scatter plots and a data-efficiency figure for
/// several finished experiments. `extra` adds externally known points, such
/// as large-scale pretraining results.
pub fn write_report(dirs: &[PathBuf], out: &Path, extra: &[EfficiencyPoint]) -> Result<String> {
    std::fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    let mut points = extra.to_vec();
    let mut baseline = None;
    for dir in dirs {
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let report = reevaluate(dir)?;
        for &s in &cfg.seeds {
            let preds: Predictions = read_json(&dir.join(format!("seed-{s}")).join("predictions.json"))?;
            let (truth, pred): (Vec<f64>, Vec<f64>) = preds.test.iter().map(|r| (r.truth, r.prediction)).unzip();
            plot_scatter(&format!("{} seed {s} test set", cfg.plan.key), &truth, &pred)?
                .write(out, &format!("scatter-{}-seed-{s}", cfg.plan.key))?;
        }
        if cfg.is_pretrained() {
            if let Some(p) = &report.test.pearson {
                let split: SplitIds = read_json(&dir.join("split.json"))?;
                points.push(EfficiencyPoint { size: split.train.len() as f64, pearson: p.mean, label: cfg.plan.key.clone() });
            }
        }
        if baseline.is_none() {
            baseline = Some(MetricsReport::from_json(&std::fs::read_to_string(dir.join("baseline.json"))?)?);
        }
        reports.push(report);
    }
    reports.extend(baseline);
    let table = format_table(&reports);
    std::fs::write(out.join("summary.txt"), &table)?;
    std::fs::write(out.join("reports.json"), serde_json::to_string_pretty(&reports)?)?;
    if !points.is_empty() {
        plot_data_efficiency("Test Pearson vs pretraining set size", &points)?.write(out, "data-efficiency")?;
    }
    Ok(table)
}
