//! Contrastive pretraining, frozen-encoder fine-tuning, end-to-end supervised
//! training, and the per-seed pipeline that strings them together.
//!
//! Every random choice (initialization, shuffling, augmentation, dropout,
//! validation split) comes from its own [`RngStream`] keyed by the run seed
//! and the epoch/step/clip position, so a run is a pure function of
//! `(config, clips)` and resuming from a checkpoint replays the same draws.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_positive_pair, AugmentConfig};
use crate::contrastive::{ntxent_from_raw, standard_pairing, ProjectionHead};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::evaluate::{SeedMetrics, SplitMetrics};
use crate::models::{
    freeze_encoder, Checkpoint, CheckpointKind, EncoderConfig, EncoderVariant, RegressionHead, RegressionModel, VideoEncoder,
};
use crate::nn::{Adam, Param, Parameterized, Scalar};
use crate::rng::RngStream;

/// Above this many views per step, encoder activations are recomputed in a
/// second pass instead of being held for the whole batch.
const CACHE_LIMIT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Supervised,
}

/// Complete recipe for one training stage. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub temperature: f64,
    pub encoder: EncoderVariant,
    pub augment: AugmentConfig,
    /// Intermediate checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Share of the fine-tuning set held out for epoch selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            lr_milestones: vec![0.33, 0.66],
            lr_decay_factor: 0.1,
            seed: 40,
            temperature: 0.5,
            encoder: EncoderVariant::Full,
            augment: AugmentConfig::default(),
            checkpoint_every: 50,
            val_fraction: 0.0,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            lr_milestones: vec![],
            checkpoint_every: 0,
            val_fraction: 0.1,
            ..Self::pretrain_default()
        }
    }

    pub fn supervised_default() -> Self {
        Self { stage: Stage::Supervised, batch_size: 8, val_fraction: 0.0, ..Self::pretrain_default() }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::for_variant(self.encoder)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 && self.stage != Stage::Finetune {
            return bad("epochs must be at least 1".into());
        }
        if self.stage == Stage::Pretrain && self.batch_size < 2 {
            return bad(format!("pretraining needs batch_size >= 2, got {}", self.batch_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!("lr_milestones must be fractions in [0, 1], got {:?}", self.lr_milestones));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 0.5), got {}", self.val_fraction));
        }
        self.augment.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate in force during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * lr_multiplier(epoch, self.epochs, &self.lr_milestones, self.lr_decay_factor)
    }
}

/// `factor^k` where `k` counts milestones with `epoch >= floor(m · total)`.
///
/// The power is formed in decimal and parsed once, so `0.1` squared is the
/// double nearest to `0.01` rather than `0.1 * 0.1`.
pub fn lr_multiplier(epoch: usize, total_epochs: usize, milestones: &[f64], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= (m * total_epochs as f64).floor() as usize).count();
    decimal_powi(factor, passed as u32)
}

fn decimal_powi(base: f64, k: u32) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // shortest round-trip form, e.g. "1e-1" or "2.5e0"
    let text = format!("{base:e}");
    let Some((mantissa, exp)) = text.split_once('e') else { return base.powi(k as i32) };
    let (Ok(exp), digits) = (exp.parse::<i64>(), mantissa.replace('.', "")) else { return base.powi(k as i32) };
    let frac = mantissa.split_once('.').map_or(0, |(_, f)| f.len()) as i64;
    let Ok(m) = digits.parse::<u128>() else { return base.powi(k as i32) };
    match m.checked_pow(k) {
        Some(mk) => format!("{mk}e{}", (exp - frac) * k as i64).parse().unwrap_or_else(|_| base.powi(k as i32)),
        None => base.powi(k as i32),
    }
}

/// One optimization step. Determinism checks compare everything but `wall_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the stage started.
    pub wall_time: f64,
}

/// `(epoch, step, loss bits, lr bits)` per record: the reproducible part of a log.
pub fn trajectory(log: &[LogRecord]) -> Vec<(usize, usize, u64, u64)> {
    log.iter().map(|r| (r.epoch, r.step, r.loss.to_bits(), r.lr.to_bits())).collect()
}

/// Mean step loss per epoch, in epoch order.
pub fn epoch_mean_losses(log: &[LogRecord]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in log {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

/// Where a stage writes its log and checkpoints, and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

impl RunOptions {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: Some(dir.into()), resume: None }
    }
}

struct Logger {
    file: Option<std::fs::File>,
    start: Instant,
    records: Vec<LogRecord>,
}

impl Logger {
    fn new(dir: Option<&Path>, name: &str) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Some(OpenOptions::new().create(true).append(true).open(d.join(name))?)
            }
            None => None,
        };
        Ok(Self { file, start: Instant::now(), records: Vec::new() })
    }

    /// Reopens a log for a resumed run: records from `start_epoch` on were
    /// written after the checkpoint and are dropped, the rest are kept.
    fn resume(dir: Option<&Path>, name: &str, start_epoch: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if let Some(d) = dir {
            let path = d.join(name);
            if path.exists() {
                kept = read_log(&path)?.into_iter().filter(|r| r.epoch < start_epoch).collect();
                let mut text = String::new();
                for r in &kept {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                std::fs::write(&path, text)?;
            }
        }
        let mut logger = Self::new(dir, name)?;
        logger.records = kept;
        Ok(logger)
    }

    fn push(&mut self, epoch: usize, step: usize, loss: f64, lr: f64) -> Result<()> {
        let r = LogRecord { epoch, step, loss, lr, wall_time: self.start.elapsed().as_secs_f64() };
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&r)?)?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string()))).collect()
}

fn trainable<F: Scalar, M: Parameterized<F>>(m: &mut M) -> Vec<&mut Param<F>> {
    m.params_mut().into_iter().map(|(_, p)| p).collect()
}

fn shuffled(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn to_f32(v: ndarray::ArrayView1<'_, f64>) -> Array1<f32> {
    v.mapv(|x| x as f32)
}

/// A freshly initialized encoder for `seed`.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<VideoEncoder<f32>> {
    VideoEncoder::new(config.clone(), &mut RngStream::new(seed, "encoder/init"))
}

/// Encodes `views` (consumed), then runs the projection head and NT-Xent and
/// accumulates gradients into both networks. Returns the batch loss.
fn contrastive_step(encoder: &mut VideoEncoder<f32>, projection: &mut ProjectionHead, views: Vec<Clip>, temperature: f64) -> Result<f64> {
    let rows = views.len();
    let keep = rows <= CACHE_LIMIT;
    let mut h = Array2::<f64>::zeros((rows, encoder.dim()));
    let mut caches = Vec::new();
    let mut stored = Vec::new();
    for (view, mut row) in views.into_iter().zip(h.outer_iter_mut()) {
        let patches = encoder.patches(&view);
        drop(view);
        if keep {
            let (hi, cache) = encoder.forward_cached(patches)?;
            row.assign(&hi.mapv(f64::from));
            caches.push(cache);
        } else {
            row.assign(&encoder.forward_patches(&patches)?.mapv(f64::from));
            stored.push(patches);
        }
    }
    encoder.zero_grad();
    projection.zero_grad();
    let (z, pcache) = projection.forward_cached(h.view())?;
    let (loss, dz) = ntxent_from_raw(z.view(), &standard_pairing(rows / 2), temperature)?;
    let dh = projection.backward(&pcache, &dz);
    if keep {
        for (cache, g) in caches.into_iter().zip(dh.outer_iter()) {
            encoder.backward(&cache, to_f32(g).view());
        }
    } else {
        for (patches, g) in stored.into_iter().zip(dh.outer_iter()) {
            let (_, cache) = encoder.forward_cached(patches)?;
            encoder.backward(&cache, to_f32(g).view());
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Contrastive pretraining on `clips`. Labels are never read.
pub fn pretrain(cfg: &TrainConfig, clips: &[Clip], opts: &RunOptions) -> Result<PretrainOutcome> {
    pretrain_with_encoder(cfg, cfg.encoder_config(), clips, opts)
}

/// [`pretrain`] with an explicit encoder shape (tests and benchmarks use smaller ones).
pub fn pretrain_with_encoder(
    cfg: &TrainConfig,
    encoder_config: EncoderConfig,
    clips: &[Clip],
    opts: &RunOptions,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config(format!("expected a pretrain config, got stage {:?}", cfg.stage)));
    }
    if clips.is_empty() {
        return Err(Error::input("pretraining needs at least one clip"));
    }
    if clips.len() < cfg.batch_size {
        return Err(Error::input(format!("{} clips cannot fill one batch of {}", clips.len(), cfg.batch_size)));
    }

    let (mut encoder, mut projection, mut enc_opt, mut proj_opt, start_epoch) = match &opts.resume {
        Some(ck) => {
            if ck.kind != CheckpointKind::Pretrain || ck.encoder.config() != &encoder_config {
                return Err(Error::Checkpoint("resume checkpoint does not match this pretraining run".into()));
            }
            let projection =
                ck.projection.clone().ok_or_else(|| Error::Checkpoint("pretrain checkpoint without projection head".into()))?;
            let mut enc_opt = Adam::new(cfg.weight_decay);
            enc_opt.set_state(ck.encoder_optim.clone().unwrap_or_default());
            let mut proj_opt = Adam::new(cfg.weight_decay);
            proj_opt.set_state(ck.head_optim.clone().unwrap_or_default());
            (ck.encoder.clone(), projection, enc_opt, proj_opt, ck.epoch)
        }
        None => {
            let encoder = init_encoder(&encoder_config, cfg.seed)?;
            let projection = ProjectionHead::new(encoder.dim(), &mut RngStream::new(cfg.seed, "projection/init"));
            (encoder, projection, Adam::new(cfg.weight_decay), Adam::new(cfg.weight_decay), 0)
        }
    };

    let out_dir = opts.out_dir.as_deref();
    let mut logger = Logger::resume(out_dir, "pretrain.log.jsonl", start_epoch)?;
    let n = cfg.batch_size;
    let steps = clips.len() / n;
    let snapshot = |encoder: &VideoEncoder<f32>, projection: &ProjectionHead, enc_opt: &Adam<f32>, proj_opt: &Adam<f64>, epoch| {
        Ok::<_, Error>(Checkpoint {
            kind: CheckpointKind::Pretrain,
            epoch,
            seed: cfg.seed,
            train_config: serde_json::to_value(cfg)?,
            encoder: encoder.clone(),
            projection: Some(projection.clone()),
            head: None,
            encoder_optim: Some(enc_opt.state().clone()),
            head_optim: Some(proj_opt.state().clone()),
        })
    };

    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled(clips.len(), &mut RngStream::new(cfg.seed, "pretrain/shuffle").derive(epoch));
        let augment = RngStream::new(cfg.seed, "pretrain/augment").derive(format!("epoch-{epoch}"));
        // the tail that cannot fill a batch is dropped
        for step in 0..steps {
            let batch = &order[step * n..(step + 1) * n];
            let mut first = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            for &i in batch {
                let (a, b) = make_positive_pair(&clips[i], &mut augment.derive(format!("clip-{i}")), &cfg.augment)?;
                first.push(a);
                second.push(b);
            }
            first.extend(second);
            let loss = contrastive_step(&mut encoder, &mut projection, first, cfg.temperature)?;
            enc_opt.step(&mut trainable(&mut encoder), lr);
            proj_opt.step(&mut trainable(&mut projection), lr);
            logger.push(epoch, epoch * steps + step, loss, lr)?;
        }
        let means = epoch_mean_losses(&logger.records);
        log::info!("pretrain seed {} epoch {}/{}: loss {:.4}", cfg.seed, epoch + 1, cfg.epochs, means.last().unwrap_or(&f64::NAN));
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                snapshot(&encoder, &projection, &enc_opt, &proj_opt, epoch + 1)?
                    .save(&dir.join(format!("pretrain-epoch-{:04}.ckpt", epoch + 1)))?;
            }
        }
    }

    let checkpoint = snapshot(&encoder, &projection, &enc_opt, &proj_opt, cfg.epochs.max(start_epoch))?;
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("pretrain.ckpt"))?;
    }
    Ok(PretrainOutcome { checkpoint, log: logger.records })
}

fn labels_of(clips: &[Clip]) -> Result<Vec<f64>> {
    clips.iter().map(|c| c.label.ok_or_else(|| Error::input(format!("clip {} has no label", c.source_id)))).collect()
}

#[derive(Debug, Clone)]
pub struct HeadFit {
    pub head: RegressionHead,
    pub log: Vec<LogRecord>,
    /// Epoch whose weights were kept (`None` when no epoch ran).
    pub best_epoch: Option<usize>,
}

/// Trains a regression head on fixed representations with squared error,
/// keeping the epoch with the lowest validation error.
pub fn fit_head(cfg: &TrainConfig, features: &Array2<f64>, labels: &[f64], log_dir: Option<&Path>) -> Result<HeadFit> {
    cfg.validate()?;
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::input(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
    }
    let n = labels.len();
    let n_val = if cfg.val_fraction > 0.0 && n >= 10 { ((cfg.val_fraction * n as f64).round() as usize).max(1) } else { 0 };
    let order = shuffled(n, &mut RngStream::new(cfg.seed, "finetune/val"));
    let (mut val, mut train) = (order[..n_val].to_vec(), order[n_val..].to_vec());
    val.sort_unstable();
    train.sort_unstable();

    let train_x = features.select(Axis(0), &train);
    let train_y: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
    let mut head = RegressionHead::new(features.ncols(), &mut RngStream::new(cfg.seed, "finetune/head-init"));
    head.fit_input_scaler(&train_x.view());
    head.fit_target_scaler(&train_y);
    let train_t: Array1<f64> = train_y.iter().map(|&y| head.standardize_target(y)).collect();
    let val_x = features.select(Axis(0), &val);
    let val_t: Array1<f64> = val.iter().map(|&i| head.standardize_target(labels[i])).collect();

    let mut logger = Logger::new(log_dir, "finetune.log.jsonl")?;
    let mut opt = Adam::new(cfg.weight_decay);
    let mut best = (f64::INFINITY, head.clone(), None);
    let b = cfg.batch_size;
    let steps = train.len().div_ceil(b);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let perm = shuffled(train.len(), &mut RngStream::new(cfg.seed, "finetune/shuffle").derive(epoch));
        let dropout = RngStream::new(cfg.seed, "finetune/dropout").derive(epoch);
        for step in 0..steps {
            let rows = &perm[step * b..((step + 1) * b).min(perm.len())];
            let x = train_x.select(Axis(0), rows);
            let t: Array1<f64> = rows.iter().map(|&r| train_t[r]).collect();
            let (out, cache) = head.forward_cached(&x.view(), Some(&mut dropout.derive(step)))?;
            let resid = &out - &t;
            let loss = resid.dot(&resid) / rows.len() as f64;
            head.zero_grad();
            head.backward(&cache, &(resid * (2.0 / rows.len() as f64)));
            opt.step(&mut trainable(&mut head), lr);
            logger.push(epoch, epoch * steps + step, loss, lr)?;
        }
        let (sel_x, sel_t) = if n_val > 0 { (&val_x, &val_t) } else { (&train_x, &train_t) };
        let (pred, _) = head.forward_cached(&sel_x.view(), None)?;
        let err = (&pred - sel_t).mapv(|v| v * v).mean().unwrap_or(f64::INFINITY);
        // with no validation set the last epoch is kept
        if err < best.0 || n_val == 0 {
            best = (err, head.clone(), Some(epoch));
        }
    }
    Ok(HeadFit { head: best.1, log: logger.records, best_epoch: best.2 })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: RegressionModel,
    pub log: Vec<LogRecord>,
    pub best_epoch: Option<usize>,
    /// Encoder checksum before and after; equal by construction.
    pub encoder_checksum: (u64, u64),
}

/// Frozen-encoder regression. The projection head in `checkpoint` is dropped.
pub fn finetune(cfg: &TrainConfig, checkpoint: &Checkpoint, clips: &[Clip], opts: &RunOptions) -> Result<FinetuneOutcome> {
    finetune_with_encoder(cfg, &cfg.encoder_config(), checkpoint, clips, opts)
}

pub fn finetune_with_encoder(
    cfg: &TrainConfig,
    expected: &EncoderConfig,
    checkpoint: &Checkpoint,
    clips: &[Clip],
    opts: &RunOptions,
) -> Result<FinetuneOutcome> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config(format!("expected a finetune config, got stage {:?}", cfg.stage)));
    }
    if checkpoint.encoder.config() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint encoder {:?} does not match the configured {:?}",
            checkpoint.encoder.config(),
            expected
        )));
    }
    let labels = labels_of(clips)?;
    let mut encoder = checkpoint.encoder.clone();
    encoder.set_trainable(false);
    let before = encoder.checksum();
    let features = encoder.encode(clips)?.mapv(f64::from);
    let fit = fit_head(cfg, &features, &labels, opts.out_dir.as_deref())?;
    let model = freeze_encoder(RegressionModel::new(encoder, fit.head));
    let after = model.encoder.checksum();
    Ok(FinetuneOutcome { model, log: fit.log, best_epoch: fit.best_epoch, encoder_checksum: (before, after) })
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub model: RegressionModel,
    pub log: Vec<LogRecord>,
}

/// End-to-end regression: encoder and head trained jointly with squared
/// error on un-augmented clips for every configured epoch.
pub fn train_supervised(cfg: &TrainConfig, clips: &[Clip], opts: &RunOptions) -> Result<SupervisedOutcome> {
    train_supervised_with_encoder(cfg, cfg.encoder_config(), clips, opts)
}

pub fn train_supervised_with_encoder(
    cfg: &TrainConfig,
    encoder_config: EncoderConfig,
    clips: &[Clip],
    opts: &RunOptions,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Supervised {
        return Err(Error::Config(format!("expected a supervised config, got stage {:?}", cfg.stage)));
    }
    let labels = labels_of(clips)?;
    let mut encoder = init_encoder(&encoder_config, cfg.seed)?;
    let mut head = RegressionHead::new(encoder.dim(), &mut RngStream::new(cfg.seed, "head/init"));
    // the input scaler is fixed from the initial representations
    head.fit_input_scaler(&encoder.encode(clips)?.mapv(f64::from).view());
    head.fit_target_scaler(&labels);
    let targets: Vec<f64> = labels.iter().map(|&y| head.standardize_target(y)).collect();

    let mut logger = Logger::new(opts.out_dir.as_deref(), "supervised.log.jsonl")?;
    let (mut enc_opt, mut head_opt) = (Adam::new(cfg.weight_decay), Adam::new(cfg.weight_decay));
    let b = cfg.batch_size;
    let steps = clips.len().div_ceil(b);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let perm = shuffled(clips.len(), &mut RngStream::new(cfg.seed, "supervised/shuffle").derive(epoch));
        let dropout = RngStream::new(cfg.seed, "supervised/dropout").derive(epoch);
        for step in 0..steps {
            let rows = &perm[step * b..((step + 1) * b).min(perm.len())];
            let mut h = Array2::<f64>::zeros((rows.len(), encoder.dim()));
            let mut caches = Vec::with_capacity(rows.len());
            for (&i, mut row) in rows.iter().zip(h.outer_iter_mut()) {
                let (hi, cache) = encoder.forward_cached(encoder.patches(&clips[i]))?;
                row.assign(&hi.mapv(f64::from));
                caches.push(cache);
            }
            let t: Array1<f64> = rows.iter().map(|&i| targets[i]).collect();
            encoder.zero_grad();
            head.zero_grad();
            let (out, hcache) = head.forward_cached(&h.view(), Some(&mut dropout.derive(step)))?;
            let resid = &out - &t;
            let loss = resid.dot(&resid) / rows.len() as f64;
            let dh = head.backward(&hcache, &(resid * (2.0 / rows.len() as f64)));
            for (cache, g) in caches.into_iter().zip(dh.outer_iter()) {
                encoder.backward(&cache, to_f32(g).view());
            }
            enc_opt.step(&mut trainable(&mut encoder), lr);
            head_opt.step(&mut trainable(&mut head), lr);
            logger.push(epoch, epoch * steps + step, loss, lr)?;
        }
        let means = epoch_mean_losses(&logger.records);
        log::info!("supervised seed {} epoch {}/{}: loss {:.4}", cfg.seed, epoch + 1, cfg.epochs, means.last().unwrap_or(&f64::NAN));
    }
    Ok(SupervisedOutcome { model: RegressionModel::new(encoder, head), log: logger.records })
}

/// One (truth, prediction) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub source_id: String,
    pub truth: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Predictions {
    pub train: Vec<PredictionRow>,
    pub test: Vec<PredictionRow>,
}

impl Predictions {
    pub fn split_metrics(rows: &[PredictionRow]) -> Result<SplitMetrics> {
        let y: Vec<f64> = rows.iter().map(|r| r.truth).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
        SplitMetrics::compute(&y, &p)
    }

    /// Recomputes metrics from stored predictions alone.
    pub fn metrics(&self, key: &str, seed: u64) -> Result<SeedMetrics> {
        Ok(SeedMetrics { key: key.into(), seed, train: Self::split_metrics(&self.train)?, test: Self::split_metrics(&self.test)? })
    }
}

pub fn predict_rows(model: &RegressionModel, clips: &[Clip]) -> Result<Vec<PredictionRow>> {
    let labels = labels_of(clips)?;
    let preds = model.predict(clips)?;
    Ok(clips
        .iter()
        .zip(labels)
        .zip(preds)
        .map(|((c, truth), prediction)| PredictionRow { source_id: c.source_id.clone(), truth, prediction })
        .collect())
}

/// The stages of one experiment. With `pretrain: None` and a finetune stage,
/// the frozen encoder keeps its random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub key: String,
    pub pretrain: Option<TrainConfig>,
    pub finetune: TrainConfig,
}

impl Plan {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.pretrain {
            p.validate()?;
            if p.stage != Stage::Pretrain {
                return Err(Error::Config("the pretrain stage must have stage = \"pretrain\"".into()));
            }
            if p.encoder != self.finetune.encoder {
                return Err(Error::Config("pretrain and finetune stages use different encoders".into()));
            }
        }
        self.finetune.validate()?;
        if self.finetune.stage == Stage::Pretrain {
            return Err(Error::Config("the second stage must be finetune or supervised".into()));
        }
        if self.finetune.stage == Stage::Supervised && self.pretrain.is_some() {
            return Err(Error::Config("supervised training starts from scratch; drop the pretrain stage".into()));
        }
        Ok(())
    }

    /// The same plan with every stage reseeded.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        if let Some(pre) = &mut p.pretrain {
            pre.seed = seed;
        }
        p.finetune.seed = seed;
        p
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub pretrain_log: Vec<LogRecord>,
    pub train_log: Vec<LogRecord>,
    pub checkpoint: Checkpoint,
    pub model: RegressionModel,
    pub predictions: Predictions,
    pub metrics: SeedMetrics,
}

/// Runs every stage of `plan` for one seed. With an output directory, each
/// stage writes into `<out>/seed-<seed>/`.
pub fn run_seed(plan: &Plan, train: &[Clip], test: &[Clip], seed: u64, out: Option<&Path>) -> Result<SeedRun> {
    let plan = plan.with_seed(seed);
    plan.validate()?;
    let dir = out.map(|o| o.join(format!("seed-{seed}")));
    let opts = RunOptions { out_dir: dir.clone(), resume: None };
    let encoder_config = plan.finetune.encoder_config();

    let (model, pretrain_log, train_log, kind) = match plan.finetune.stage {
        Stage::Supervised => {
            let s = train_supervised(&plan.finetune, train, &opts)?;
            (s.model, vec![], s.log, CheckpointKind::Supervised)
        }
        _ => {
            let (ck, plog) = match &plan.pretrain {
                Some(pre) => {
                    let mut resume_opts = opts.clone();
                    resume_opts.resume = resume_point(dir.as_deref(), pre)?;
                    let o = pretrain(pre, train, &resume_opts)?;
                    (o.checkpoint, o.log)
                }
                None => (random_checkpoint(&encoder_config, seed)?, vec![]),
            };
            let f = finetune(&plan.finetune, &ck, train, &opts)?;
            (f.model, plog, f.log, CheckpointKind::Finetune)
        }
    };

    let checkpoint = Checkpoint {
        kind,
        epoch: plan.finetune.epochs,
        seed,
        train_config: serde_json::to_value(&plan)?,
        encoder: model.encoder.clone(),
        projection: None,
        head: Some(model.head.clone()),
        encoder_optim: None,
        head_optim: None,
    };
    let predictions = Predictions { train: predict_rows(&model, train)?, test: predict_rows(&model, test)? };
    let metrics = predictions.metrics(&plan.key, seed)?;
    if let Some(d) = &dir {
        checkpoint.save(&d.join("model.ckpt"))?;
        std::fs::write(d.join("predictions.json"), serde_json::to_string_pretty(&predictions)?)?;
        std::fs::write(d.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    }
    Ok(SeedRun { seed, pretrain_log, train_log, checkpoint, model, predictions, metrics })
}

/// Latest intermediate pretraining checkpoint in `dir`, if any. A finished
/// `pretrain.ckpt` whose config differs is reported as a conflict.
pub fn resume_point(dir: Option<&Path>, cfg: &TrainConfig) -> Result<Option<Checkpoint>> {
    let Some(dir) = dir else { return Ok(None) };
    let Ok(listing) = std::fs::read_dir(dir) else { return Ok(None) };
    let mut found: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("pretrain") && n.ends_with(".ckpt")))
        .collect();
    found.sort();
    // "pretrain.ckpt" sorts after every "pretrain-epoch-*" file
    let Some(latest) = found.last() else { return Ok(None) };
    let ck = Checkpoint::load_expecting(latest, &cfg.encoder_config())?;
    if ck.train_config != serde_json::to_value(cfg)? {
        return Err(Error::Checkpoint(format!(
            "{} was written by a different pretraining config; remove it or use another output directory",
            latest.display()
        )));
    }
    // the log is cut back to the checkpoint's epoch when pretraining resumes
    Ok(Some(ck))
}

/// An untrained encoder wrapped as a checkpoint, for the random-frozen baseline.
pub fn random_checkpoint(config: &EncoderConfig, seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: CheckpointKind::Pretrain,
        epoch: 0,
        seed,
        train_config: serde_json::Value::Null,
        encoder: init_encoder(config, seed)?,
        projection: None,
        head: None,
        encoder_optim: None,
        head_optim: None,
    })
}

/// One independent run per seed, in order.
pub fn run_seeds(plan: &Plan, train: &[Clip], test: &[Clip], seeds: &[u64], out: Option<&Path>) -> Result<Vec<SeedRun>> {
    if seeds.is_empty() {
        return Err(Error::input("at least one seed is required"));
    }
    seeds.iter().map(|&s| run_seed(plan, train, test, s, out)).collect()
}
