//! Scanpath similarity and conditional saliency metrics.

mod report;

pub use report::{
    baseline_density, conditional_eval, conditional_eval_model, evaluate, task_baselines, ConditionalScores,
    EvalConfig, ImageMetrics, MetricReport, MetricSummary, ReportParams, StepScores,
};

use serde::{Deserialize, Serialize};

use crate::dataio::{Fixation, SemanticLabelMap};
use crate::numerics::{Scalar, Tensor};

/// A metric value with a flag for degenerate inputs (empty sequences, flat
/// maps), for which the value is defined as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Score {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Score {
            value: 0.0,
            degenerate: true,
        }
    }
}

// ---- clustering -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id of every input fixation, in input order.
    pub ids: Vec<usize>,
    pub centers: Vec<(f64, f64)>,
    pub bandwidth_px: f64,
}

impl ClusterAssignment {
    /// Id of the nearest center; ties go to the lower id.
    pub fn assign(&self, f: &Fixation) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, &(cx, cy)) in self.centers.iter().enumerate() {
            let d = (f.x - cx).powi(2) + (f.y - cy).powi(2);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    pub fn labels(&self, path: &[Fixation]) -> Vec<usize> {
        path.iter().map(|f| self.assign(f)).collect()
    }
}

const MEAN_SHIFT_MAX_ITER: usize = 1000;

/// Flat-kernel mean shift. Every fixation seeds a trajectory that moves to
/// the mean of the points within `bandwidth_px` until that neighbor set
/// stops changing. Converged modes are merged in input order: a mode within
/// `bandwidth_px / 2` of an existing center joins it, otherwise it becomes
/// a new center. Fixations then take the id of their nearest center.
pub fn cluster_fixations(points: &[Fixation], bandwidth_px: f64) -> ClusterAssignment {
    let pts: Vec<(f64, f64)> = points.iter().map(|f| (f.x, f.y)).collect();
    let b2 = bandwidth_px * bandwidth_px;
    let neighbors = |c: (f64, f64)| -> Vec<usize> {
        (0..pts.len())
            .filter(|&i| (pts[i].0 - c.0).powi(2) + (pts[i].1 - c.1).powi(2) <= b2)
            .collect()
    };
    let mean_of = |set: &[usize]| -> (f64, f64) {
        let n = set.len() as f64;
        let (sx, sy) = set.iter().fold((0.0, 0.0), |a, &i| (a.0 + pts[i].0, a.1 + pts[i].1));
        (sx / n, sy / n)
    };
    let mut centers: Vec<(f64, f64)> = Vec::new();
    for &seed in &pts {
        let mut set = neighbors(seed);
        let mut mode = mean_of(&set);
        for _ in 0..MEAN_SHIFT_MAX_ITER {
            let next = neighbors(mode);
            if next == set {
                break;
            }
            set = next;
            mode = mean_of(&set);
        }
        let near = centers
            .iter()
            .any(|c| (c.0 - mode.0).powi(2) + (c.1 - mode.1).powi(2) <= b2 / 4.0);
        if !near {
            centers.push(mode);
        }
    }
    let mut out = ClusterAssignment {
        ids: Vec::new(),
        centers,
        bandwidth_px,
    };
    out.ids = out.labels(points);
    out
}

// ---- alignment --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub match_reward: f64,
    pub mismatch_penalty: f64,
    pub gap_penalty: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            match_reward: 1.0,
            mismatch_penalty: 0.0,
            gap_penalty: 0.0,
        }
    }
}

/// Needleman-Wunsch global alignment score. Empty input scores 0, flagged.
pub fn nw_align<S: PartialEq>(a: &[S], b: &[S], params: &AlignmentParams) -> Score {
    if a.is_empty() || b.is_empty() {
        return Score::degenerate();
    }
    let (n, m) = (a.len(), b.len());
    let gap = params.gap_penalty;
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * gap).collect();
    let mut cur = vec![0.0; m + 1];
    for i in 1..=n {
        cur[0] = i as f64 * gap;
        for j in 1..=m {
            let sub = if a[i - 1] == b[j - 1] {
                params.match_reward
            } else {
                params.mismatch_penalty
            };
            cur[j] = (prev[j - 1] + sub).max(prev[j] + gap).max(cur[j - 1] + gap);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Score::ok(prev[m])
}

/// Alignment score normalized by the longer sequence.
pub fn string_similarity<S: PartialEq>(a: &[S], b: &[S], params: &AlignmentParams) -> Score {
    let s = nw_align(a, b, params);
    if s.degenerate {
        return s;
    }
    Score::ok(s.value / a.len().max(b.len()) as f64)
}

/// Sequence score: both scanpaths (all fixations, `f_0` included) become
/// cluster-id strings under one clustering, then are aligned.
pub fn sequence_score(
    pred: &[Fixation],
    gt: &[Fixation],
    clustering: &ClusterAssignment,
    params: &AlignmentParams,
) -> Score {
    string_similarity(&clustering.labels(pred), &clustering.labels(gt), params)
}

fn label_at(map: &SemanticLabelMap, f: &Fixation) -> u16 {
    let j = f.x.round().clamp(0.0, (map.width - 1) as f64) as usize;
    let i = f.y.round().clamp(0.0, (map.height - 1) as f64) as usize;
    map.at(i, j)
}

/// Semantic sequence score over the labels of fixated pixels. `None` when
/// the image has no label map.
pub fn semantic_sequence_score(
    pred: &[Fixation],
    gt: &[Fixation],
    labels: Option<&SemanticLabelMap>,
    params: &AlignmentParams,
) -> Option<Score> {
    let map = labels?;
    let a: Vec<u16> = pred.iter().map(|f| label_at(map, f)).collect();
    let b: Vec<u16> = gt.iter().map(|f| label_at(map, f)).collect();
    Some(string_similarity(&a, &b, params))
}

// ---- saliency ---------------------------------------------------------------

fn pixel_index(shape: &[usize], f: &Fixation) -> usize {
    let (h, w) = (shape[0], shape[1]);
    let j = f.x.round().clamp(0.0, (w - 1) as f64) as usize;
    let i = f.y.round().clamp(0.0, (h - 1) as f64) as usize;
    i * w + j
}

/// Normalized scanpath saliency at one fixation: the z-scored map (population
/// std) read at the rounded fixation pixel. A constant map scores 0, flagged.
pub fn nss<T: Scalar>(map: &Tensor<T>, fixation: &Fixation) -> Score {
    let v = map.to_f64_vec();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, &x| (a.0.min(x), a.1.max(x)));
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if lo == hi || var <= 0.0 || !var.is_finite() {
        return Score::degenerate();
    }
    Score::ok((v[pixel_index(map.shape(), fixation)] - mean) / var.sqrt())
}

/// Area under the ROC curve of the map as a classifier of fixated pixels
/// (positives, one per fixation) against every other pixel (negatives).
/// The threshold sweeps every distinct map value and the curve is
/// integrated with the trapezoid rule, so ties count one half.
pub fn auc_judd<T: Scalar>(map: &Tensor<T>, positives: &[Fixation]) -> f64 {
    let v = map.to_f64_vec();
    let mut is_pos = vec![false; v.len()];
    let mut pos: Vec<f64> = positives
        .iter()
        .map(|f| {
            let k = pixel_index(map.shape(), f);
            is_pos[k] = true;
            v[k]
        })
        .collect();
    let mut neg: Vec<f64> = v.iter().zip(&is_pos).filter(|(_, &p)| !p).map(|(&x, _)| x).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut tpr, mut fpr, mut area) = (0.0, 0.0, 0.0);
    while i < pos.len() || j < neg.len() {
        let t = match (pos.get(i), neg.get(j)) {
            (Some(&a), Some(&b)) => a.max(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        while i < pos.len() && pos[i] >= t {
            i += 1;
        }
        while j < neg.len() && neg[j] >= t {
            j += 1;
        }
        let (t2, f2) = (i as f64 / np, j as f64 / nn);
        area += (f2 - fpr) * (tpr + t2) / 2.0;
        tpr = t2;
        fpr = f2;
    }
    area
}

pub const IG_EPS: f64 = 1e-16;

/// Information gain in bits of `map` over `baseline` at one fixation; both
/// are L1-normalized first.
pub fn info_gain<T: Scalar, U: Scalar>(map: &Tensor<T>, baseline: &Tensor<U>, fixation: &Fixation) -> f64 {
    let k = pixel_index(map.shape(), fixation);
    let p = map.data()[k].as_f64() / map.to_f64_vec().iter().sum::<f64>();
    let q = baseline.data()[k].as_f64() / baseline.to_f64_vec().iter().sum::<f64>();
    (IG_EPS + p).log2() - (IG_EPS + q).log2()
}

// ---- set-level scores -------------------------------------------------------

/// Cluster-id strings of one image's predictions and ground truth.
#[derive(Clone, Debug, Default)]
pub struct ImageStrings {
    pub pred: Vec<Vec<usize>>,
    pub gt: Vec<Vec<usize>>,
}

/// Fraction of ground-truth scanpaths whose best similarity to any
/// prediction exceeds `threshold`, averaged over images with both sets.
pub fn scanpath_recall(images: &[ImageStrings], threshold: f64, params: &AlignmentParams) -> f64 {
    let mut per_image = Vec::new();
    for img in images {
        if img.pred.is_empty() || img.gt.is_empty() {
            continue;
        }
        let covered = img
            .gt
            .iter()
            .filter(|g| {
                img.pred
                    .iter()
                    .map(|p| string_similarity(p, g, params).value)
                    .fold(f64::NEG_INFINITY, f64::max)
                    > threshold
            })
            .count();
        per_image.push(covered as f64 / img.gt.len() as f64);
    }
    mean(&per_image).unwrap_or(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub value: f64,
    pub images_used: usize,
    pub images_skipped: usize,
}

/// Mean similarity over unordered pairs of ground-truth scanpaths per image,
/// then over images. Images with fewer than two scanpaths are skipped.
pub fn human_consistency(images: &[Vec<Vec<usize>>], params: &AlignmentParams) -> Consistency {
    let mut per_image = Vec::new();
    let mut skipped = 0;
    for paths in images {
        if paths.len() < 2 {
            skipped += 1;
            continue;
        }
        let mut scores = Vec::new();
        for a in 0..paths.len() {
            for b in a + 1..paths.len() {
                scores.push(string_similarity(&paths[a], &paths[b], params).value);
            }
        }
        per_image.push(mean(&scores).expect("at least one pair"));
    }
    Consistency {
        value: mean(&per_image).unwrap_or(0.0),
        images_used: per_image.len(),
        images_skipped: skipped,
    }
}

pub(crate) fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
