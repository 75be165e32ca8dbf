use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hat::dataio::synth::SynthParams;
use hat::dataio::Condition;
use hat::inference::{default_max_len, DecodeMode, GenerationPolicy};
use hat::metrics::{AlignmentParams, EvalConfig};
use hat::model::ModelConfig;
use hat::training::{AdamWConfig, TrainConfig};

use crate::gradcheck::{GradCheckOptions, Precision};

/// Every setting of a run, flat. A resolved copy is written as
/// `config.json` next to the run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// Manifest whose fixations form the conditional-metric baseline.
    pub baseline_manifest: Option<PathBuf>,
    pub seed: u64,

    // synthetic data
    pub condition: Condition,
    pub n_images: usize,
    /// `(height, width)` of generated images.
    pub image_size: (usize, usize),
    pub tasks: Vec<String>,
    pub blob_radius: f64,
    pub n_distractors: usize,
    pub subjects_per_image: usize,
    pub p_detour: f64,
    pub jitter: f64,
    pub ta_visits: usize,
    /// Scaled from 16 px per degree at width 512 when unset.
    pub pixels_per_degree: Option<f64>,

    // model
    pub canvas: (usize, usize),
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: Option<usize>,
    pub mlp_hidden: usize,
    pub max_fixations: usize,
    pub freeze_encoder: bool,

    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,

    // generation
    pub mode: DecodeMode,
    /// Per-condition default (6 / 10 / 20) when unset.
    pub max_len: Option<usize>,
    pub threshold: f64,
    pub dump_heatmaps: bool,
    pub dump_contributions: bool,

    // evaluation
    /// One degree of visual angle when unset.
    pub bandwidth_px: Option<f64>,
    pub match_reward: f64,
    pub mismatch_penalty: f64,
    pub gap_penalty: f64,
    pub recall_threshold: f64,

    // inspection
    pub task: Option<String>,

    // gradient check
    pub precision: Precision,
    pub grad_eps: f64,
    pub model_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthParams::new(0, 8, Condition::TP, (64, 64));
        let model = ModelConfig::new((320, 512), 256, 1);
        let train = TrainConfig::default();
        let align = AlignmentParams::default();
        let grad = GradCheckOptions::default();
        RunConfig {
            command: String::new(),
            out: PathBuf::from("run"),
            manifest: None,
            checkpoint: None,
            predictions: None,
            baseline_manifest: None,
            seed: 0,
            condition: synth.condition,
            n_images: synth.n_images,
            image_size: synth.canvas,
            tasks: synth.tasks,
            blob_radius: synth.blob_radius,
            n_distractors: synth.n_distractors,
            subjects_per_image: synth.subjects_per_image,
            p_detour: synth.p_detour,
            jitter: synth.jitter,
            ta_visits: synth.ta_visits,
            pixels_per_degree: None,
            canvas: model.canvas,
            channels: model.channels,
            heads: model.heads,
            encoder_layers: model.encoder_layers,
            decoder_layers: model.decoder_layers,
            ffn_hidden: None,
            mlp_hidden: model.mlp_hidden,
            max_fixations: model.max_fixations,
            freeze_encoder: model.freeze_encoder,
            lr: train.optimizer.lr,
            weight_decay: train.optimizer.weight_decay,
            beta1: train.optimizer.beta1,
            beta2: train.optimizer.beta2,
            adam_eps: train.optimizer.eps,
            epochs: train.epochs,
            batch_size: train.batch_size,
            alpha: train.alpha,
            beta: train.beta,
            mode: DecodeMode::Greedy,
            max_len: None,
            threshold: 0.5,
            dump_heatmaps: false,
            dump_contributions: false,
            bandwidth_px: None,
            match_reward: align.match_reward,
            mismatch_penalty: align.mismatch_penalty,
            gap_penalty: align.gap_penalty,
            recall_threshold: EvalConfig::default().recall_threshold,
            task: None,
            precision: grad.precision,
            grad_eps: grad.eps_f64,
            model_samples: grad.model_samples,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn manifest(&self) -> anyhow::Result<&Path> {
        match &self.manifest {
            Some(p) => Ok(p),
            None => bail!("`{}` needs --manifest", self.command),
        }
    }

    pub fn checkpoint(&self) -> anyhow::Result<&Path> {
        match &self.checkpoint {
            Some(p) => Ok(p),
            None => bail!("`{}` needs --checkpoint", self.command),
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        let defaults = SynthParams::new(self.seed, self.n_images, self.condition, self.image_size);
        SynthParams {
            seed: self.seed,
            n_images: self.n_images,
            condition: self.condition,
            canvas: self.image_size,
            tasks: self.tasks.clone(),
            blob_radius: self.blob_radius,
            n_distractors: self.n_distractors,
            subjects_per_image: self.subjects_per_image,
            p_detour: self.p_detour,
            jitter: self.jitter,
            ta_visits: self.ta_visits,
            pixels_per_degree: self.pixels_per_degree.unwrap_or(defaults.pixels_per_degree),
        }
    }

    /// `n_tasks` is replaced by the manifest's vocabulary size at training.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.canvas, self.channels, self.tasks.len().max(1));
        m.heads = self.heads;
        m.encoder_layers = self.encoder_layers;
        m.decoder_layers = self.decoder_layers;
        if let Some(f) = self.ffn_hidden {
            m.ffn_hidden = f;
        }
        m.mlp_hidden = self.mlp_hidden;
        m.max_fixations = self.max_fixations;
        m.freeze_encoder = self.freeze_encoder;
        m.seed = self.seed;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
        }
    }

    pub fn policy(&self, condition: Condition, seed: u64) -> GenerationPolicy {
        GenerationPolicy {
            mode: self.mode,
            max_len: self.max_len.unwrap_or_else(|| default_max_len(condition)),
            threshold: self.threshold,
            seed,
            keep_heatmaps: self.dump_heatmaps,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            bandwidth_px: self.bandwidth_px,
            alignment: AlignmentParams {
                match_reward: self.match_reward,
                mismatch_penalty: self.mismatch_penalty,
                gap_penalty: self.gap_penalty,
            },
            recall_threshold: self.recall_threshold,
        }
    }

    pub fn gradcheck_options(&self) -> GradCheckOptions {
        GradCheckOptions {
            precision: self.precision,
            seed: self.seed,
            eps_f64: self.grad_eps,
            eps_f32: self.grad_eps,
            model_samples: self.model_samples,
        }
    }

    /// Writes the resolved configuration to `<out>/config.json`.
    pub fn write_echo(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join("config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
