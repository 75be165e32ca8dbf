//! Attention-based contribution maps and peripheral-vs-foveal matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{resize_to_canvas, write_heatmap, DatasetManifest, Fixation, HeatmapFormat};
use crate::error::{Error, Result};
use crate::model::{Hat, ImageContext, PERIPHERAL_STRIDE};
use crate::numerics::{resize_bilinear, Scalar, Tensor};

/// Normalized contribution of each peripheral token, on the stride-32 grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionMap {
    /// `(rows, cols)` of the peripheral grid.
    pub grid: (usize, usize),
    /// Renormalized weights in row-major order; they sum to 1.
    pub weights: Vec<f64>,
    /// Head-averaged weights before renormalization.
    pub raw: Vec<f64>,
}

impl ContributionMap {
    /// Peripheral share of the attention row before renormalization.
    pub fn peripheral_mass(&self) -> f64 {
        self.raw.iter().sum()
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.grid.0, self.grid.1], self.weights.clone()).expect("grid shape")
    }

    /// Bilinear upsampling to `(H, W)` for display. Values are no longer
    /// normalized.
    pub fn upsample(&self, canvas: (usize, usize)) -> Result<Tensor<f64>> {
        let t = self.to_tensor().reshape(&[1, self.grid.0, self.grid.1])?;
        resize_bilinear(&t, canvas.0, canvas.1)?.reshape(&[canvas.0, canvas.1])
    }

    pub fn write(&self, canvas: (usize, usize), path: &Path, format: HeatmapFormat) -> Result<()> {
        let up = self.upsample(canvas)?;
        let values: Vec<f32> = up.data().iter().map(|&v| v as f32).collect();
        write_heatmap(&values, canvas.0, canvas.1, path, format)
    }
}

/// Task `t`'s row of a `[heads×N×λ]` cross-attention tensor, averaged over
/// heads.
fn head_mean<T: Scalar>(attn: &Tensor<T>, task: usize) -> Result<Vec<f64>> {
    let (heads, n, len) = attn.dims3("contribution")?;
    if task >= n {
        return Err(Error::Argument(format!("task {task} out of range for {n} queries")));
    }
    let mut row = vec![0.0; len];
    for h in 0..heads {
        let base = (h * n + task) * len;
        for (r, v) in row.iter_mut().zip(&attn.data()[base..base + len]) {
            *r += v.as_f64();
        }
    }
    for r in &mut row {
        *r /= heads as f64;
    }
    Ok(row)
}

/// Contribution of each peripheral token to task `t`: the head-averaged
/// attention row restricted to the first `rows·cols` tokens, renormalized.
pub fn contribution_map<T: Scalar>(attn: &Tensor<T>, task: usize, grid: (usize, usize)) -> Result<ContributionMap> {
    let row = head_mean(attn, task)?;
    let n_peripheral = grid.0 * grid.1;
    if row.len() < n_peripheral {
        return Err(Error::dim(
            "contribution_map",
            format!("{} memory tokens for {n_peripheral} peripheral tokens", row.len()),
        ));
    }
    let raw = row[..n_peripheral].to_vec();
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / n_peripheral as f64; n_peripheral]
    };
    Ok(ContributionMap { grid, weights, raw })
}

/// Head-averaged last-layer cross-attention row of task `t` for one history.
pub fn step_attention<T: Scalar>(
    model: &Hat<T>,
    ctx: &ImageContext<T>,
    history: &[Fixation],
    task: usize,
) -> Result<Vec<f64>> {
    model.check_task(task)?;
    let set = model.predict_all_with(ctx, history)?;
    head_mean(&set.cross_attention, task)
}

/// Mean attention per fixation step (rows) and token group (columns: 0 for
/// all peripheral tokens together, `i > 0` for the `i`-th foveal token).
/// Cells are averaged over the scanpaths that reach them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionMatrix {
    pub values: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

impl ContributionMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,peripheral");
        for i in 1..self.cols() {
            let _ = write!(out, ",foveal_{i}");
        }
        out.push('\n');
        for (r, row) in self.values.iter().enumerate() {
            let _ = write!(out, "{}", r + 1);
            for (v, &n) in row.iter().zip(&self.counts[r]) {
                if n > 0 {
                    let _ = write!(out, ",{v:.8}");
                } else {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the matrix over scanpaths given as (image context, fixations in
/// canvas pixels). Row `k` holds the step whose history is `f_0..f_k`.
pub fn contribution_matrix<T: Scalar>(
    model: &Hat<T>,
    scanpaths: &[(&ImageContext<T>, &[Fixation])],
    task: usize,
) -> Result<ContributionMatrix> {
    if scanpaths.is_empty() {
        return Err(Error::Argument(
            "contribution matrix needs at least one scanpath".into(),
        ));
    }
    let n_peripheral = model.config().peripheral_tokens();
    let rows = scanpaths.iter().map(|(_, f)| f.len()).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; rows + 1]; rows];
    let mut counts = vec![vec![0usize; rows + 1]; rows];
    for (ctx, fix) in scanpaths {
        for k in 1..=fix.len() {
            let row = step_attention(model, ctx, &fix[..k], task)?;
            let r = k - 1;
            sums[r][0] += row[..n_peripheral].iter().sum::<f64>();
            counts[r][0] += 1;
            for (i, &w) in row[n_peripheral..].iter().enumerate() {
                sums[r][i + 1] += w;
                counts[r][i + 1] += 1;
            }
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            s.iter()
                .zip(c)
                .map(|(&v, &n)| if n > 0 { v / n as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(ContributionMatrix { values, counts })
}

/// Contribution map of task `task` averaged over every step of every record
/// of that task in the manifest.
pub fn category_contribution_map<T: Scalar>(
    model: &Hat<T>,
    tasks: &[String],
    manifest: &DatasetManifest,
    task: &str,
) -> Result<ContributionMap> {
    let t = tasks
        .iter()
        .position(|n| n == task)
        .ok_or_else(|| Error::Argument(format!("the model has no query for task {task:?}")))?;
    let canvas = model.config().canvas;
    let grid = model.config().grid(PERIPHERAL_STRIDE);
    let mut contexts: BTreeMap<&str, ImageContext<T>> = BTreeMap::new();
    let mut acc_w = vec![0.0; grid.0 * grid.1];
    let mut acc_raw = vec![0.0; grid.0 * grid.1];
    let mut steps = 0usize;
    for rec in manifest.records.iter().filter(|r| r.task == task) {
        let img = manifest.load_image(&rec.image)?;
        let (resized, fix) = resize_to_canvas(&img, &rec.fixations, canvas)?;
        if !contexts.contains_key(rec.image.as_str()) {
            contexts.insert(&rec.image, model.image_context(&resized)?);
        }
        let ctx = &contexts[rec.image.as_str()];
        for k in 1..=fix.len() {
            let set = model.predict_all_with(ctx, &fix[..k])?;
            let m = contribution_map(&set.cross_attention, t, grid)?;
            for (a, v) in acc_w.iter_mut().zip(&m.weights) {
                *a += v;
            }
            for (a, v) in acc_raw.iter_mut().zip(&m.raw) {
                *a += v;
            }
            steps += 1;
        }
    }
    if steps == 0 {
        return Err(Error::Argument(format!("no records for task {task:?}")));
    }
    let n = steps as f64;
    Ok(ContributionMap {
        grid,
        weights: acc_w.into_iter().map(|v| v / n).collect(),
        raw: acc_raw.into_iter().map(|v| v / n).collect(),
    })
}
