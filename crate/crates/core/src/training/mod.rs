//! Behavior-cloning objective and optimization loop.

mod fit;
mod optim;

pub use fit::{epoch_means, fit, train, EpochLoss, FitOutput, LossRecord, TrainConfig};
pub use optim::{AdamW, AdamWConfig};

use std::collections::BTreeMap;

use crate::dataio::{resize_to_canvas, DatasetManifest, Fixation, ImageRaster};
use crate::error::{Error, Result};
use crate::model::{Hat, ImageFeatures, StepVars};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// One supervised step: predict what follows `history` for `task`.
/// `next` is the next fixation, or `None` at the termination step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub image: String,
    pub task: usize,
    pub subject: u32,
    pub history: Vec<Fixation>,
    pub next: Option<Fixation>,
}

impl TrainingExample {
    pub fn is_terminal(&self) -> bool {
        self.next.is_none()
    }

    /// Termination target τ.
    pub fn tau(&self) -> f64 {
        if self.is_terminal() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the positive (τ = 1) termination class.
    pub omega: f64,
    /// Ground-truth Gaussian std in canvas pixels.
    pub sigma_px: f64,
}

impl LossParams {
    pub fn new(omega: f64, sigma_px: f64) -> Self {
        LossParams {
            alpha: 2.0,
            beta: 4.0,
            omega,
            sigma_px,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.omega > 0.0
            && self.sigma_px > 0.0
            && [self.alpha, self.beta, self.omega, self.sigma_px]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!(
                "loss parameters need alpha, beta >= 0 and omega, sigma > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Unnormalized Gaussian centered on the rounded fixation pixel, peak
/// exactly 1.
pub fn make_gt_heatmap<T: Scalar>(fixation: &Fixation, height: usize, width: usize, sigma_px: f64) -> Tensor<T> {
    let cx = fixation.x.round().clamp(0.0, (width - 1) as f64);
    let cy = fixation.y.round().clamp(0.0, (height - 1) as f64);
    let denom = 2.0 * sigma_px * sigma_px;
    Tensor::from_fn(&[height, width], |k| {
        let (i, j) = ((k / width) as f64, (k % width) as f64);
        let d2 = (i - cy).powi(2) + (j - cx).powi(2);
        T::of((-d2 / denom).exp())
    })
}

/// Every prefix of every record: `n` next-fixation examples per record with
/// fixations `f_0..f_n`, plus one terminal example when it terminated.
pub fn expand_scanpaths(manifest: &DatasetManifest) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for rec in &manifest.records {
        let task = manifest
            .task_index(&rec.task)
            .ok_or_else(|| Error::Config(format!("task {:?} is not in the manifest vocabulary", rec.task)))?;
        let make = |len: usize, next: Option<Fixation>| TrainingExample {
            image: rec.image.clone(),
            task,
            subject: rec.subject,
            history: rec.fixations[..len].to_vec(),
            next,
        };
        for i in 1..rec.fixations.len() {
            out.push(make(i, Some(rec.fixations[i])));
        }
        if rec.terminated {
            out.push(make(rec.fixations.len(), None));
        }
    }
    Ok(out)
}

/// Ratio of non-terminal to terminal examples.
pub fn compute_omega(examples: &[TrainingExample]) -> Result<f64> {
    let pos = examples.iter().filter(|e| e.is_terminal()).count();
    if pos == 0 {
        return Err(Error::Config(
            "no terminal examples, termination weight is undefined".into(),
        ));
    }
    Ok((examples.len() - pos) as f64 / pos as f64)
}

/// Pixel-wise focal loss of a predicted map against a ground-truth map,
/// averaged over pixels. Predictions at 0 or 1 are clamped to `1e-7` or `1 - 1e-7`.
pub fn focal_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, alpha: f64, beta: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let p = g.constant(pred.clone());
    let l = g.focal_loss(p, target, alpha, beta)?;
    Ok(g.value(l).item().as_f64())
}

/// Weighted binary cross-entropy `-ω·τ·log τ̂ - (1-τ)·log(1-τ̂)`, same clamp.
pub fn termination_loss(tau_hat: f64, tau: f64, omega: f64) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let p = g.constant(Tensor::scalar(tau_hat));
    let l = g.bce(p, tau, omega)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub fix: f64,
    pub term: f64,
    pub total: f64,
}

/// Graph nodes of one example's loss.
pub struct LossVars {
    pub step: StepVars,
    /// `None` for terminal examples.
    pub fix: Option<Var>,
    pub term: Var,
    pub total: Var,
}

impl LossVars {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> LossComponents {
        LossComponents {
            fix: self.fix.map_or(0.0, |v| g.value(v).item().as_f64()),
            term: g.value(self.term).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
        }
    }
}

/// Loss of one example on the example's own task: focal loss on its
/// full-resolution heatmap against `Y` plus weighted BCE on its τ̂.
/// Terminal examples contribute the termination term only. `feats` must
/// come from the example's image; fixations are in canvas pixels.
pub fn example_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Hat<T>,
    feats: &ImageFeatures,
    example: &TrainingExample,
    params: &LossParams,
) -> Result<LossVars> {
    model.check_task(example.task)?;
    let step = model.step(g, feats, &example.history)?;
    let tau_hat = model.task_tau(g, step.tau, example.task)?;
    let term = g.bce(tau_hat, example.tau(), params.omega)?;
    let (fix, total) = match &example.next {
        None => (None, term),
        Some(f) => {
            let (h, w) = model.config().canvas;
            let y = make_gt_heatmap::<T>(f, h, w, params.sigma_px).reshape(&[1, h, w])?;
            let heat = model.task_heatmap(g, step.heat_low, example.task)?;
            let fix = g.focal_loss(heat, &y, params.alpha, params.beta)?;
            (Some(fix), g.add(fix, term)?)
        }
    };
    Ok(LossVars { step, fix, term, total })
}

/// Forward-only loss of one example on a canvas-sized image.
pub fn total_loss<T: Scalar>(
    model: &Hat<T>,
    image: &ImageRaster,
    example: &TrainingExample,
    params: &LossParams,
) -> Result<LossComponents> {
    let mut g = Graph::inference();
    let x = g.constant(model.image_tensor(image)?);
    let pv = model.pyramid_graph(&mut g, x)?;
    let feats = model.image_features(&mut g, pv.p1, pv.p4)?;
    Ok(example_loss(&mut g, model, &feats, example, params)?.components(&g))
}

/// Examples and images brought to the model canvas.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub canvas: (usize, usize),
    pub images: BTreeMap<String, ImageRaster>,
    pub examples: Vec<TrainingExample>,
    pub tasks: Vec<String>,
    /// One degree of visual angle in canvas pixels.
    pub sigma_px: f64,
    pub omega: f64,
}

impl TrainingSet {
    /// Loads and resizes every image referenced by a record and rescales
    /// example fixations to the canvas.
    pub fn prepare(manifest: &DatasetManifest, canvas: (usize, usize)) -> Result<Self> {
        manifest.validate()?;
        let raw = expand_scanpaths(manifest)?;
        let omega = compute_omega(&raw)?;
        let mut images = BTreeMap::new();
        let mut scales = BTreeMap::new();
        for entry in &manifest.images {
            if !manifest.records.iter().any(|r| r.image == entry.id) {
                continue;
            }
            let img = manifest.load_image(&entry.id)?;
            let scale = (canvas.1 as f64 / img.width as f64, canvas.0 as f64 / img.height as f64);
            let (resized, _) = resize_to_canvas(&img, &[], canvas)?;
            images.insert(entry.id.clone(), resized);
            scales.insert(entry.id.clone(), scale);
        }
        let rescale = |f: &Fixation, (sx, sy): (f64, f64)| Fixation::new(f.x * sx, f.y * sy, f.index);
        let examples = raw
            .into_iter()
            .map(|mut e| {
                let s = scales[&e.image];
                e.history = e.history.iter().map(|f| rescale(f, s)).collect();
                e.next = e.next.map(|f| rescale(&f, s));
                e
            })
            .collect();
        let mean_sx = scales.values().map(|s| s.0).sum::<f64>() / scales.len().max(1) as f64;
        Ok(TrainingSet {
            canvas,
            images,
            examples,
            tasks: manifest.tasks.clone(),
            sigma_px: manifest.pixels_per_degree * mean_sx,
            omega,
        })
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams::new(self.omega, self.sigma_px)
    }
}
