//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use cardio_ssl::evaluate::SplitMetrics;
use cardio_ssl::models::{Checkpoint, CheckpointKind};
use cardio_ssl::train::{self, predict_rows, resume_point, RunOptions};
use cardio_ssl::{synthdata, Manifest, Stage, SynthConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};

use crate::config::{load_train_config, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiment::{self, experiment_dir, model_checkpoint, model_from_checkpoint, preprocess_manifest};
use crate::plot::{plot_scatter, EfficiencyPoint};

#[derive(Debug, Parser)]
#[command(name = "cardio-ssl", version, about = "Contrastive video pretraining and cardiac output regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic echo-like dataset and its manifest.
    Synthdata(SynthArgs),
    /// Turn raw clips into 32×224×224 clip tensors plus a hash index.
    Preprocess(PreprocessArgs),
    /// Contrastive pretraining on the clips of a manifest (labels unused).
    Pretrain(PretrainArgs),
    /// Train a regression head on a frozen encoder, or a supervised model end to end.
    Finetune(FinetuneArgs),
    /// Score a model on a manifest, or re-check an experiment directory.
    Evaluate(EvaluateArgs),
    /// Summary table and figures over finished experiments.
    Report(ReportArgs),
    /// Run a whole experiment: data, training for every seed, reports and plots.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory [default: timestamped, under $CARDIO_SSL_OUT or ./runs]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with SynthConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take the dataset settings of an experiment preset.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_clips: Option<usize>,
    /// Lowest cardiac output, L/min.
    #[arg(long)]
    pub co_low: Option<f64>,
    /// Highest cardiac output, L/min.
    #[arg(long)]
    pub co_high: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub speckle: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub fps_min: Option<f64>,
    #[arg(long)]
    pub fps_max: Option<f64>,
    #[arg(long)]
    pub frames_min: Option<usize>,
    #[arg(long)]
    pub frames_max: Option<usize>,
    #[arg(long)]
    pub duration_min: Option<f64>,
    #[arg(long)]
    pub duration_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Stage config: a TrainConfig file, or a stage of an experiment preset.
#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Training clips (raw or preprocessed).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub stage: StageArgs,
    /// Pretrained encoder; required unless the stage is supervised.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled training clips.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model checkpoint written by `finetune`.
    #[arg(long, requires = "manifest", conflicts_with = "experiment")]
    pub model: Option<PathBuf>,
    /// Labeled clips to score.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Recompute an experiment's report from its stored predictions.
    #[arg(long, required_unless_present = "model")]
    pub experiment: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `SIZE:PEARSON:LABEL`, an extra point for the data-efficiency figure.
#[derive(Debug, Clone, PartialEq)]
pub struct PointArg(pub EfficiencyPoint);

impl FromStr for PointArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.splitn(3, ':');
        let (Some(size), Some(pearson), Some(label)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("expected SIZE:PEARSON:LABEL, got {s:?}"));
        };
        let size: f64 = size.parse().map_err(|_| format!("bad size {size:?}"))?;
        let pearson: f64 = pearson.parse().map_err(|_| format!("bad Pearson value {pearson:?}"))?;
        Ok(PointArg(EfficiencyPoint { size, pearson, label: label.into() }))
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Finished experiment directories.
    #[arg(long = "experiment", required = true)]
    pub experiments: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra data-efficiency point, e.g. `1000000:0.13:large-scale`.
    #[arg(long = "point")]
    pub points: Vec<PointArg>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment TOML.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Replaces the seed list; repeat for several seeds.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Experiment directory; an existing one is resumed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn out_dir(out: &Option<PathBuf>, name: &str) -> PathBuf {
    experiment_dir(out.as_deref(), name)
}

pub fn synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| CliError::config(path, e))?,
        (None, Some(p)) => ExperimentConfig::preset(p)?.synth,
        (None, None) => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:tt).+),* $(,)?) => {
            $(if let Some(v) = args.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed, n_clips => n_clips, co_low => co_range.0, co_high => co_range.1,
        width => width, height => height, speckle => speckle, noise => noise,
        fps_min => fps_range.0, fps_max => fps_range.1, frames_min => frame_range.0, frames_max => frame_range.1,
        duration_min => duration_range.0, duration_max => duration_range.1,
    );
    cfg.validate()?;
    Ok(cfg)
}

fn stage_config(args: &StageArgs, pick: fn(&ExperimentConfig) -> Option<TrainConfig>, default: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => load_train_config(path)?,
        (None, Some(p)) => {
            let exp = ExperimentConfig::preset(p)?;
            pick(&exp).ok_or_else(|| CliError::config(p, "this preset has no such stage"))?
        }
        (None, None) => default,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Manifest::read(path)?, base))
}

pub fn synthdata_cmd(args: &SynthArgs) -> Result<PathBuf> {
    let cfg = synth_config(args)?;
    let out = out_dir(&args.out, "synthdata");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("synth.toml"), toml::to_string_pretty(&cfg).map_err(|e| CliError::config(&out, e))?)?;
    let manifest = synthdata::gen_dataset(&cfg, &out)?;
    log::info!("wrote {} clips to {}", manifest.len(), out.display());
    Ok(out.join("manifest.tsv"))
}

pub fn preprocess_cmd(args: &PreprocessArgs) -> Result<PathBuf> {
    let (manifest, base) = read_manifest(&args.manifest)?;
    let out = out_dir(&args.out, "clips");
    preprocess_manifest(&manifest, &base, &out)?;
    log::info!("preprocessed {} clips into {}", manifest.len(), out.display());
    Ok(out.join("manifest.tsv"))
}

pub fn pretrain_cmd(args: &PretrainArgs) -> Result<PathBuf> {
    let cfg = stage_config(&args.stage, |e| e.plan.pretrain.clone(), TrainConfig::pretrain_default())?;
    if cfg.stage != Stage::Pretrain {
        return Err(CliError::config(args.stage.config.clone().unwrap_or_default(), "expected stage = \"pretrain\""));
    }
    let (manifest, base) = read_manifest(&args.manifest)?;
    // labels are dropped before the clips reach the trainer
    let clips: Vec<_> = experiment::load_clips(&manifest, &base)?.into_iter().map(|c| c.with_label(None)).collect();
    let out = out_dir(&args.out, "pretrain");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("pretrain.toml"), cfg.to_toml()?)?;
    let opts = RunOptions { out_dir: Some(out.clone()), resume: resume_point(Some(&out), &cfg)? };
    train::pretrain(&cfg, &clips, &opts)?;
    Ok(out.join("pretrain.ckpt"))
}

pub fn finetune_cmd(args: &FinetuneArgs) -> Result<PathBuf> {
    let cfg = stage_config(&args.stage, |e| Some(e.plan.finetune.clone()), TrainConfig::finetune_default())?;
    let (manifest, base) = read_manifest(&args.manifest)?;
    manifest.check_labeled()?;
    let clips = experiment::load_clips(&manifest, &base)?;
    let out = out_dir(&args.out, "finetune");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("finetune.toml"), cfg.to_toml()?)?;
    let opts = RunOptions::in_dir(&out);
    let (kind, model) = match cfg.stage {
        Stage::Supervised => (CheckpointKind::Supervised, train::train_supervised(&cfg, &clips, &opts)?.model),
        Stage::Finetune => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                CliError::config(args.stage.config.clone().unwrap_or_default(), "--checkpoint is required for fine-tuning")
            })?;
            let ck = Checkpoint::load_expecting(path, &cfg.encoder_config())?;
            (CheckpointKind::Finetune, train::finetune(&cfg, &ck, &clips, &opts)?.model)
        }
        Stage::Pretrain => {
            return Err(CliError::config(
                args.stage.config.clone().unwrap_or_default(),
                "use the pretrain subcommand for stage = \"pretrain\"",
            ))
        }
    };
    let path = out.join("model.ckpt");
    model_checkpoint(kind, cfg.epochs, cfg.seed, serde_json::to_value(&cfg)?, &model).save(&path)?;
    Ok(path)
}

/// Scores a model on a manifest: predictions.json, metrics.json and a scatter plot.
pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<String> {
    if let Some(dir) = &args.experiment {
        let report = experiment::reevaluate(dir)?;
        return Ok(format!("{} matches its stored predictions\n{}", dir.display(), cardio_ssl::evaluate::format_table(&[report])));
    }
    let (Some(model_path), Some(manifest_path)) = (&args.model, &args.manifest) else {
        return Err(CliError::config("evaluate", "pass --model with --manifest, or --experiment"));
    };
    let model = model_from_checkpoint(Checkpoint::load(model_path)?, model_path)?;
    let (manifest, base) = read_manifest(manifest_path)?;
    manifest.check_labeled()?;
    let clips = experiment::load_clips(&manifest, &base)?;
    let rows = predict_rows(&model, &clips)?;
    let metrics: SplitMetrics = train::Predictions::split_metrics(&rows)?;
    let out = out_dir(&args.out, "evaluate");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("predictions.json"), serde_json::to_string_pretty(&rows)?)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    if rows.len() >= 2 {
        let (truth, pred): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.truth, r.prediction)).unzip();
        plot_scatter("Predicted vs ground-truth CO", &truth, &pred)?.write(&out, "scatter")?;
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    Ok(format!("n {}  MAE {:.4}  Pearson {}  R2 {}\n", metrics.n, metrics.mae, fmt(metrics.pearson), fmt(metrics.r2)))
}

pub fn report_cmd(args: &ReportArgs) -> Result<String> {
    let out = out_dir(&args.out, "report");
    let extra: Vec<EfficiencyPoint> = args.points.iter().map(|p| p.0.clone()).collect();
    experiment::write_report(&args.experiments, &out, &extra)
}

pub fn experiment_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(p)) => ExperimentConfig::preset(p)?,
        (None, None) => return Err(CliError::config("run", "pass --config or --preset")),
    };
    let cfg = if args.seeds.is_empty() { cfg } else { cfg.with_seeds(args.seeds.clone()) };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_cmd(args: &RunArgs) -> Result<String> {
    let cfg = experiment_config(args)?;
    let dir = out_dir(&args.out, &cfg.name);
    let outcome = experiment::run_experiment(&cfg, &dir)?;
    Ok(format!("{}\n{}", outcome.dir.display(), std::fs::read_to_string(outcome.dir.join("summary.txt"))?))
}

/// Runs one subcommand and returns what it prints on success.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synthdata(a) => synthdata_cmd(a).map(|p| format!("{}\n", p.display())),
        Command::Preprocess(a) => preprocess_cmd(a).map(|p| format!("{}\n", p.display())),
        Command::Pretrain(a) => pretrain_cmd(a).map(|p| format!("{}\n", p.display())),
        Command::Finetune(a) => finetune_cmd(a).map(|p| format!("{}\n", p.display())),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Run(a) => run_cmd(a),
    }
}
