use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::{example_loss, LossParams, TrainingSet};
use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Hat, ModelConfig};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub alpha: f64,
    pub beta: f64,
    /// Seeds the example shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            alpha: 2.0,
            beta: 4.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Zero epochs is allowed and leaves the model at its initialization.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step's batch-mean losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_fix")]
    pub l_fix: f64,
    #[serde(rename = "L_term")]
    pub l_term: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

/// Example-weighted mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(rename = "L_fix")]
    pub l_fix: f64,
    #[serde(rename = "L_term")]
    pub l_term: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

pub struct FitOutput {
    pub model: Hat<f32>,
    pub tasks: Vec<String>,
    pub log: Vec<LossRecord>,
    pub epochs: Vec<EpochLoss>,
    pub loss_params: LossParams,
}

impl FitOutput {
    /// Writes the loss log as JSON Lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, &self.tasks, path)
    }
}

/// Epoch means from a step log, weighting each step by its batch size.
pub fn epoch_means(log: &[LossRecord], batch_sizes: &[usize]) -> Vec<EpochLoss> {
    let mut acc: BTreeMap<usize, (f64, f64, f64, f64)> = BTreeMap::new();
    for (rec, &n) in log.iter().zip(batch_sizes) {
        let e = acc.entry(rec.epoch).or_default();
        let n = n as f64;
        e.0 += rec.l_fix * n;
        e.1 += rec.l_term * n;
        e.2 += rec.l * n;
        e.3 += n;
    }
    acc.into_iter()
        .map(|(epoch, (f, t, l, n))| EpochLoss {
            epoch,
            l_fix: f / n,
            l_term: t / n,
            l: l / n,
        })
        .collect()
}

/// Builds a fresh model for the manifest's tasks and trains it.
pub fn fit(manifest: &DatasetManifest, model_config: &ModelConfig, config: &TrainConfig) -> Result<FitOutput> {
    let mut mc = model_config.clone();
    mc.n_tasks = manifest.tasks.len();
    let set = TrainingSet::prepare(manifest, mc.canvas)?;
    let model = Hat::new(mc)?;
    train(model, &set, config)
}

/// Mini-batch training of `model` on `set`. Each epoch visits every example
/// once in an order drawn from `config.seed`; each batch computes the image
/// pyramid once per distinct image.
pub fn train(mut model: Hat<f32>, set: &TrainingSet, config: &TrainConfig) -> Result<FitOutput> {
    config.validate()?;
    if set.canvas != model.config().canvas {
        return Err(Error::Config(format!(
            "training set canvas {:?} differs from the model canvas {:?}",
            set.canvas,
            model.config().canvas
        )));
    }
    if set.tasks.len() != model.config().n_tasks {
        return Err(Error::Config(format!(
            "{} tasks in the data, {} queries in the model",
            set.tasks.len(),
            model.config().n_tasks
        )));
    }
    let mut lp = set.loss_params();
    lp.alpha = config.alpha;
    lp.beta = config.beta;
    lp.validate()?;

    let mut image_tensors = BTreeMap::new();
    for (id, img) in &set.images {
        image_tensors.insert(id.as_str(), model.image_tensor(img)?);
    }
    let mut opt = AdamW::new(&model.params, config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.examples.len()).collect();
    let mut log = Vec::new();
    let mut sizes = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let step = log.len() + 1;
            let (rec, grads) = batch_step(&model, set, &image_tensors, batch, &lp, epoch, step)?;
            opt.step(&mut model.params, &grads)?;
            log.push(rec);
            sizes.push(batch.len());
        }
    }
    let epochs = epoch_means(&log, &sizes);
    Ok(FitOutput {
        model,
        tasks: set.tasks.clone(),
        log,
        epochs,
        loss_params: lp,
    })
}

type BatchGrads = Vec<Option<Tensor<f32>>>;

fn batch_step(
    model: &Hat<f32>,
    set: &TrainingSet,
    images: &BTreeMap<&str, Tensor<f32>>,
    batch: &[usize],
    lp: &LossParams,
    epoch: usize,
    step: usize,
) -> Result<(LossRecord, BatchGrads)> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in batch {
        by_image.entry(set.examples[i].image.as_str()).or_default().push(i);
    }
    let mut g = Graph::new();
    let mut totals = Vec::with_capacity(batch.len());
    let (mut fix, mut term) = (0.0, 0.0);
    for (image, members) in by_image {
        let x = g.constant(images[image].clone());
        let pv = model.pyramid_graph(&mut g, x)?;
        let feats = model.image_features(&mut g, pv.p1, pv.p4)?;
        for i in members {
            let lv = example_loss(&mut g, model, &feats, &set.examples[i], lp)?;
            let c = lv.components(&g);
            fix += c.fix;
            term += c.term;
            totals.push(lv.total);
        }
    }
    let n = batch.len() as f64;
    let mut sum = totals[0];
    for &t in &totals[1..] {
        sum = g.add(sum, t)?;
    }
    let loss = g.scale(sum, 1.0 / n);
    let rec = LossRecord {
        epoch,
        step,
        l_fix: fix / n,
        l_term: term / n,
        l: (fix + term) / n,
    };
    if !rec.l.is_finite() || !g.value(loss).all_finite() {
        return Err(Error::Divergence {
            epoch,
            step,
            detail: format!("non-finite batch loss (L_fix {}, L_term {})", rec.l_fix, rec.l_term),
        });
    }
    let grads = g.backward(loss)?;
    let mut acc = vec![None; model.params.len()];
    grads.accumulate_into(&mut acc);
    if let Some(bad) = acc.iter().position(|g| g.as_ref().is_some_and(|t| !t.all_finite())) {
        return Err(Error::Divergence {
            epoch,
            step,
            detail: format!(
                "non-finite gradient for {}",
                model.params.name(model.params.ids().nth(bad).expect("id"))
            ),
        });
    }
    Ok((rec, acc))
}
