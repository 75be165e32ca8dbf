//! Autoregressive scanpath generation and the winner-take-all baseline.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{resize_to_canvas, Condition, Fixation, ImageRaster, RecordWire, ScanpathRecord};
use crate::error::{Error, Result};
use crate::model::{Hat, ImageContext};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationPolicy {
    pub mode: DecodeMode,
    /// Cap on generated fixations, not counting `f_0`.
    pub max_len: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Keep every step's heatmap in the output.
    pub keep_heatmaps: bool,
}

impl GenerationPolicy {
    /// Greedy decoding with the condition's length cap (6 TP, 10 TA, 20 FV).
    pub fn for_condition(condition: Condition) -> Self {
        GenerationPolicy {
            mode: DecodeMode::Greedy,
            max_len: default_max_len(condition),
            threshold: 0.5,
            seed: 0,
            keep_heatmaps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "termination threshold {} is outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

pub fn default_max_len(condition: Condition) -> usize {
    match condition {
        Condition::TP => 6,
        Condition::TA => 10,
        Condition::FV => 20,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminatedBy {
    Threshold,
    Cap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedScanpath {
    /// `f_0..f_m` in image pixels.
    pub fixations: Vec<Fixation>,
    /// τ̂ of every forward step; one longer than the generated fixations
    /// when stopped by the threshold.
    pub tau: Vec<f64>,
    /// Canvas-resolution heatmaps of every forward step, when kept.
    pub heatmaps: Option<Vec<Tensor<f32>>>,
    pub terminated_by: TerminatedBy,
}

impl GeneratedScanpath {
    /// Generated fixations, excluding `f_0`.
    pub fn len(&self) -> usize {
        self.fixations.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset-schema record; `terminated` is true only when the model
    /// stopped itself.
    pub fn to_wire(&self, image: &str, task: &str, subject: u32, condition: Condition) -> RecordWire {
        let mut rec = ScanpathRecord {
            image: image.into(),
            task: task.into(),
            subject,
            condition,
            fixations: self.fixations.clone(),
            terminated: self.terminated_by == TerminatedBy::Threshold,
        }
        .to_wire();
        rec.tau = Some(self.tau.clone());
        rec
    }
}

/// One forward step of a scanpath model: the full-resolution heatmap and τ̂
/// for a history in canvas pixels.
pub trait StepModel {
    fn canvas(&self) -> (usize, usize);
    fn step(&mut self, history: &[Fixation]) -> Result<(Tensor<f32>, f64)>;
}

/// Steps a model on one image, reusing the image pyramid and peripheral
/// tokens across steps.
pub struct ContextStepper<'a, T: Scalar = f32> {
    model: &'a Hat<T>,
    context: ImageContext<T>,
    task: usize,
}

impl<'a, T: Scalar> ContextStepper<'a, T> {
    /// `image` must already be canvas-sized.
    pub fn new(model: &'a Hat<T>, image: &ImageRaster, task: usize) -> Result<Self> {
        model.check_task(task)?;
        Ok(ContextStepper {
            model,
            context: model.image_context(image)?,
            task,
        })
    }
}

impl<T: Scalar> StepModel for ContextStepper<'_, T> {
    fn canvas(&self) -> (usize, usize) {
        self.model.config().canvas
    }

    fn step(&mut self, history: &[Fixation]) -> Result<(Tensor<f32>, f64)> {
        let p = self.model.forward_with(&self.context, history, self.task)?;
        Ok((p.heatmap.cast(), p.tau.as_f64()))
    }
}

/// Steps a model by recomputing everything from the image each time.
pub struct NaiveStepper<'a, T: Scalar = f32> {
    pub model: &'a Hat<T>,
    pub image: ImageRaster,
    pub task: usize,
}

impl<T: Scalar> StepModel for NaiveStepper<'_, T> {
    fn canvas(&self) -> (usize, usize) {
        self.model.config().canvas
    }

    fn step(&mut self, history: &[Fixation]) -> Result<(Tensor<f32>, f64)> {
        let p = self.model.forward(&self.image, history, self.task)?;
        Ok((p.heatmap.cast(), p.tau.as_f64()))
    }
}

/// Generates a scanpath for `task` on `image`. The image is resized to the
/// model canvas; `start` and the returned fixations are in image pixels.
/// `start` defaults to the image center.
pub fn generate<T: Scalar>(
    model: &Hat<T>,
    image: &ImageRaster,
    task: usize,
    start: Option<Fixation>,
    policy: &GenerationPolicy,
) -> Result<GeneratedScanpath> {
    let canvas = model.config().canvas;
    let f0 = start.unwrap_or_else(|| image_center(image.height, image.width));
    let (resized, scaled) = resize_to_canvas(image, &[f0], canvas)?;
    let mut stepper = ContextStepper::new(model, &resized, task)?;
    let mut out = generate_with(&mut stepper, scaled[0], policy)?;
    let (sx, sy) = (
        image.width as f64 / canvas.1 as f64,
        image.height as f64 / canvas.0 as f64,
    );
    out.fixations[0] = f0;
    for f in &mut out.fixations[1..] {
        *f = Fixation::new(f.x * sx, f.y * sy, f.index);
    }
    Ok(out)
}

/// `((W-1)/2, (H-1)/2)`, the center of the pixel grid.
pub fn image_center(height: usize, width: usize) -> Fixation {
    Fixation::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, 0)
}

/// The decoding loop over any step model, in canvas pixels.
pub fn generate_with<M: StepModel>(
    model: &mut M,
    start: Fixation,
    policy: &GenerationPolicy,
) -> Result<GeneratedScanpath> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut fixations = vec![Fixation::new(start.x, start.y, 0)];
    let mut tau = Vec::new();
    let mut heatmaps = policy.keep_heatmaps.then(Vec::new);
    loop {
        let (map, t) = model.step(&fixations)?;
        tau.push(t);
        let stop = t > policy.threshold;
        let next = if stop {
            None
        } else {
            Some(match policy.mode {
                DecodeMode::Greedy => argmax_pixel(&map),
                DecodeMode::Sample => sample_pixel(&map, &mut rng),
            })
        };
        if let Some(h) = heatmaps.as_mut() {
            h.push(map);
        }
        let Some(f) = next else {
            return Ok(GeneratedScanpath {
                fixations,
                tau,
                heatmaps,
                terminated_by: TerminatedBy::Threshold,
            });
        };
        fixations.push(Fixation::new(f.x, f.y, fixations.len()));
        if fixations.len() > policy.max_len {
            return Ok(GeneratedScanpath {
                fixations,
                tau,
                heatmaps,
                terminated_by: TerminatedBy::Cap,
            });
        }
    }
}

/// Location of the largest value of an `[H×W]` map; ties go to the first in
/// row-major order. NaN never wins.
pub fn argmax_pixel<T: Scalar>(map: &Tensor<T>) -> Fixation {
    let w = map.shape()[map.rank() - 1];
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (k, &v) in map.data().iter().enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    Fixation::new((best % w) as f64, (best / w) as f64, 0)
}

/// Draws a pixel with probability proportional to its value. Falls back to
/// the argmax when the map has no positive mass.
pub fn sample_pixel<T: Scalar, R: Rng>(map: &Tensor<T>, rng: &mut R) -> Fixation {
    let w = map.shape()[map.rank() - 1];
    let weights = map.data().iter().map(|v| {
        let v = v.as_f64();
        if v.is_finite() && v > 0.0 {
            v
        } else {
            0.0
        }
    });
    match WeightedIndex::new(weights) {
        Ok(dist) => {
            let k = dist.sample(rng);
            Fixation::new((k % w) as f64, (k / w) as f64, 0)
        }
        Err(_) => argmax_pixel(map),
    }
}

/// Winner-take-all over a static density: take the argmax, zero a disk of
/// `ior_radius_px` around it, repeat `max_len` times. Fixation indices
/// count from 0; no `f_0` is prepended.
pub fn heuristic_wta<T: Scalar>(density: &Tensor<T>, ior_radius_px: f64, max_len: usize) -> Result<GeneratedScanpath> {
    let (h, w) = density.dims2("heuristic_wta")?;
    if density.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::Argument("winner-take-all density must be nonnegative".into()));
    }
    let mut map = density.clone();
    let r2 = ior_radius_px * ior_radius_px;
    let mut fixations = Vec::with_capacity(max_len);
    for n in 0..max_len {
        let f = argmax_pixel(&map);
        fixations.push(Fixation::new(f.x, f.y, n));
        let data = map.data_mut();
        for i in 0..h {
            for j in 0..w {
                if (i as f64 - f.y).powi(2) + (j as f64 - f.x).powi(2) <= r2 {
                    data[i * w + j] = T::zero();
                }
            }
        }
    }
    Ok(GeneratedScanpath {
        fixations,
        tau: Vec::new(),
        heatmaps: None,
        terminated_by: TerminatedBy::Cap,
    })
}
