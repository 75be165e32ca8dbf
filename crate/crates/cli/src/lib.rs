//! Command-line driver: synthetic data, training, generation, evaluation,
//! attention inspection and gradient checks. Every command writes its
//! outputs and a resolved `config.json` under one run directory.

pub mod commands;
pub mod config;
pub mod gradcheck;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use hat::dataio::Condition;
use hat::inference::DecodeMode;

pub use config::RunConfig;
use gradcheck::Precision;

#[derive(Debug, Parser)]
#[command(
    name = "hat",
    version,
    about = "Scanpath prediction with a foveated working-memory transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the run directory.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: SynthArgs,
    },
    /// Train a model; writes model.ckpt, loss.jsonl and epochs.jsonl.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate one scanpath per (image, task) of a manifest; writes scanpaths.jsonl.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Score predicted scanpaths against a manifest; writes report.json and report.csv.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Export attention contribution maps and matrices for one task.
    Inspect {
        #[command(flatten)]
        common: CommonArgs,
        /// Task to inspect; the first task of the checkpoint when unset.
        #[arg(long)]
        task: Option<String>,
    },
    /// Compare autodiff gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
        /// Central-difference step.
        #[arg(long)]
        grad_eps: Option<f64>,
        /// Elements checked per toy-model tensor.
        #[arg(long)]
        model_samples: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for every output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub condition: Option<Condition>,
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_size)]
    pub image_size: Option<(usize, usize)>,
    /// Comma-separated target names.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[arg(long)]
    pub blob_radius: Option<f64>,
    #[arg(long)]
    pub n_distractors: Option<usize>,
    #[arg(long)]
    pub subjects_per_image: Option<usize>,
    #[arg(long)]
    pub pixels_per_degree: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model input size as HxW; both multiples of 32.
    #[arg(long, value_parser = parse_size)]
    pub canvas: Option<(usize, usize)>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub freeze_encoder: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<DecodeMode>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write every step's heatmap as PFM.
    #[arg(long)]
    pub dump_heatmaps: bool,
    /// Write contribution maps and a contribution matrix per task.
    #[arg(long)]
    pub dump_contributions: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated scanpaths (JSONL).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Training manifest for the conditional-metric baseline.
    #[arg(long)]
    pub baseline_manifest: Option<PathBuf>,
    /// Canvas (HxW) for baseline-only scoring, when no checkpoint is given.
    #[arg(long, value_parser = parse_size)]
    pub canvas: Option<(usize, usize)>,
    #[arg(long)]
    pub bandwidth_px: Option<f64>,
    #[arg(long)]
    pub match_reward: Option<f64>,
    #[arg(long)]
    pub mismatch_penalty: Option<f64>,
    #[arg(long)]
    pub gap_penalty: Option<f64>,
    #[arg(long)]
    pub recall_threshold: Option<f64>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

fn parse_mode(s: &str) -> Result<DecodeMode, String> {
    match s {
        "greedy" => Ok(DecodeMode::Greedy),
        "sample" => Ok(DecodeMode::Sample),
        other => Err(format!("unknown decode mode {other:?} (greedy | sample)")),
    }
}

macro_rules! set {
    ($cfg:ident, $args:ident; $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl CommonArgs {
    fn base(&self, command: &str) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.command = command.to_string();
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.manifest.is_some() {
            cfg.manifest = self.manifest.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        Ok(cfg)
    }
}

impl Command {
    /// Merges the config file (if any) with explicit flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        Ok(match self {
            Command::Synth { common, data } => {
                let mut c = common.base("synth")?;
                set!(c, data; condition, n_images, image_size, tasks, blob_radius, n_distractors, subjects_per_image);
                if data.pixels_per_degree.is_some() {
                    c.pixels_per_degree = data.pixels_per_degree;
                }
                c
            }
            Command::Train { common, model, train } => {
                let mut c = common.base("train")?;
                set!(c, model; canvas, channels, heads, encoder_layers, decoder_layers, mlp_hidden, freeze_encoder);
                if model.ffn_hidden.is_some() {
                    c.ffn_hidden = model.ffn_hidden;
                }
                set!(c, train; lr, weight_decay, epochs, batch_size, alpha, beta);
                c
            }
            Command::Generate { common, policy } => {
                let mut c = common.base("generate")?;
                set!(c, policy; mode, threshold);
                if policy.max_len.is_some() {
                    c.max_len = policy.max_len;
                }
                c.dump_heatmaps |= policy.dump_heatmaps;
                c.dump_contributions |= policy.dump_contributions;
                c
            }
            Command::Evaluate { common, eval } => {
                let mut c = common.base("evaluate")?;
                set!(c, eval; canvas, match_reward, mismatch_penalty, gap_penalty, recall_threshold);
                if eval.predictions.is_some() {
                    c.predictions = eval.predictions.clone();
                }
                if eval.baseline_manifest.is_some() {
                    c.baseline_manifest = eval.baseline_manifest.clone();
                }
                if eval.bandwidth_px.is_some() {
                    c.bandwidth_px = eval.bandwidth_px;
                }
                c
            }
            Command::Inspect { common, task } => {
                let mut c = common.base("inspect")?;
                if task.is_some() {
                    c.task = task.clone();
                }
                c
            }
            Command::Gradcheck {
                common,
                precision,
                grad_eps,
                model_samples,
            } => {
                let mut c = common.base("gradcheck")?;
                if let Some(p) = precision {
                    c.precision = *p;
                }
                if let Some(e) = grad_eps {
                    c.grad_eps = *e;
                }
                if let Some(n) = model_samples {
                    c.model_samples = *n;
                }
                c
            }
        })
    }
}

/// Outcome of a command: `passed` is false when a check inside the
/// command failed, which maps to a nonzero exit status.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub message: String,
}

/// Resolves the configuration, writes its echo and runs the command.
pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let cfg = cli.command.resolve()?;
    run_config(&cfg)
}

pub fn run_config(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    cfg.write_echo()?;
    match cfg.command.as_str() {
        "synth" => commands::synth(cfg),
        "train" => commands::train(cfg),
        "generate" => commands::generate(cfg),
        "evaluate" => commands::evaluate(cfg),
        "inspect" => commands::inspect(cfg),
        "gradcheck" => commands::gradcheck(cfg),
        other => anyhow::bail!("unknown command {other:?}"),
    }
}
