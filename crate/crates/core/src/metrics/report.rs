use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    auc_judd, cluster_fixations, human_consistency, info_gain, mean, nss, scanpath_recall, semantic_sequence_score,
    sequence_score, AlignmentParams, ImageStrings, IG_EPS,
};
use crate::dataio::{resize_to_canvas, DatasetManifest, Fixation, ScanpathRecord};
use crate::error::{Error, Result};
use crate::model::{Hat, ImageContext};
use crate::numerics::{Scalar, Tensor};
use crate::training::make_gt_heatmap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Mean-shift bandwidth in image pixels; one degree when unset.
    pub bandwidth_px: Option<f64>,
    pub alignment: AlignmentParams,
    pub recall_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bandwidth_px: None,
            alignment: AlignmentParams::default(),
            recall_threshold: 0.5,
        }
    }
}

/// Every setting a report's numbers depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub bandwidth_px: f64,
    pub alignment: AlignmentParams,
    pub normalizer: String,
    pub recall_threshold: f64,
    pub auc_variant: String,
    pub ig_log_base: u32,
    pub ig_eps: f64,
    pub sequence_includes_initial_fixation: bool,
}

/// Conditional saliency of one history step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub image: String,
    pub task: String,
    pub subject: u32,
    /// Index `i` of the predicted fixation `f_i`.
    pub step: usize,
    pub ig: f64,
    pub nss: f64,
    pub nss_degenerate: bool,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalScores {
    pub cig: f64,
    pub cnss: f64,
    pub cauc: f64,
    pub steps: Vec<StepScores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub task: String,
    pub n_pred: usize,
    pub n_gt: usize,
    pub ss: Option<f64>,
    pub semss: Option<f64>,
    pub cig: Option<f64>,
    pub cnss: Option<f64>,
    pub cauc: Option<f64>,
    pub recall: Option<f64>,
    pub human_consistency: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ss: Option<f64>,
    pub semss: Option<f64>,
    pub cig: Option<f64>,
    pub cnss: Option<f64>,
    pub cauc: Option<f64>,
    pub recall: Option<f64>,
    pub human_consistency: Option<f64>,
    pub n_items: usize,
    pub n_pred: usize,
    pub n_gt: usize,
    pub conditional_steps: usize,
    pub semss_skipped: usize,
    pub consistency_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub params: ReportParams,
    pub summary: MetricSummary,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (image, task) and a final `all` row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("image,task,SemSS,SS,cIG,cNSS,cAUC,recall,human_consistency\n");
        let rows = self.per_image.iter().map(|m| {
            (
                m.image.as_str(),
                m.task.as_str(),
                [m.semss, m.ss, m.cig, m.cnss, m.cauc, m.recall, m.human_consistency],
            )
        });
        let s = &self.summary;
        let all = (
            "all",
            "",
            [s.semss, s.ss, s.cig, s.cnss, s.cauc, s.recall, s.human_consistency],
        );
        for (image, task, vals) in rows.chain(std::iter::once(all)) {
            let cells: Vec<String> = vals.iter().map(|&v| cell(v)).collect();
            let _ = writeln!(out, "{image},{task},{}", cells.join(","));
        }
        out
    }
}

/// Mean of per-fixation Gaussian densities (each summing to 1) over the
/// given fixations on an `(H, W)` canvas; uniform when there are none.
pub fn baseline_density(fixations: &[Fixation], canvas: (usize, usize), sigma_px: f64) -> Tensor<f64> {
    let (h, w) = canvas;
    if fixations.is_empty() {
        return Tensor::full(&[h, w], 1.0 / (h * w) as f64);
    }
    let mut acc = vec![0.0; h * w];
    for f in fixations {
        let g: Tensor<f64> = make_gt_heatmap(f, h, w, sigma_px);
        let s = g.sum();
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v / s;
        }
    }
    let n = fixations.len() as f64;
    Tensor::new(vec![h, w], acc.into_iter().map(|v| v / n).collect()).expect("canvas shape")
}

/// Conditional IG, NSS and AUC. For every record and every step `i ≥ 1`,
/// `predict(record, f_0..f_{i-1})` yields a map that is scored against
/// `f_i`; IG is taken over the record's task baseline. Coordinates of the
/// records, maps and baselines must share one canvas.
/// One baseline density per task from a (training) manifest, on the model
/// canvas. Fixations after `f_0` are rescaled from image to canvas pixels and
/// σ is one degree at the canvas scale.
pub fn task_baselines(manifest: &DatasetManifest, canvas: (usize, usize)) -> Result<BTreeMap<String, Tensor<f64>>> {
    let mut points: BTreeMap<String, Vec<Fixation>> = manifest.tasks.iter().map(|t| (t.clone(), Vec::new())).collect();
    let mut scales = Vec::new();
    for rec in &manifest.records {
        let entry = manifest
            .image(&rec.image)
            .ok_or_else(|| Error::Argument(format!("record for unknown image {:?}", rec.image)))?;
        let (h, w) = entry.dims;
        if h == 0 || w == 0 {
            return Err(Error::Argument(format!("image {:?} has no recorded size", rec.image)));
        }
        let (sy, sx) = (canvas.0 as f64 / h as f64, canvas.1 as f64 / w as f64);
        scales.push(sx);
        let out = points.entry(rec.task.clone()).or_default();
        out.extend(
            rec.fixations
                .iter()
                .skip(1)
                .map(|f| Fixation::new(f.x * sx, f.y * sy, f.index)),
        );
    }
    let sigma = manifest.pixels_per_degree * mean(&scales).unwrap_or(1.0);
    Ok(points
        .into_iter()
        .map(|(t, fix)| (t, baseline_density(&fix, canvas, sigma)))
        .collect())
}

pub fn conditional_eval<F>(
    records: &[ScanpathRecord],
    baselines: &BTreeMap<String, Tensor<f64>>,
    mut predict: F,
) -> Result<ConditionalScores>
where
    F: FnMut(&ScanpathRecord, &[Fixation]) -> Result<Tensor<f64>>,
{
    let mut steps = Vec::new();
    for rec in records {
        let base = baselines
            .get(&rec.task)
            .ok_or_else(|| Error::Argument(format!("no baseline density for task {:?}", rec.task)))?;
        for i in 1..rec.fixations.len() {
            let map = predict(rec, &rec.fixations[..i])?;
            if map.shape() != base.shape() {
                return Err(Error::dim(
                    "conditional_eval",
                    format!("map {:?} vs baseline {:?}", map.shape(), base.shape()),
                ));
            }
            let target = &rec.fixations[i];
            let n = nss(&map, target);
            steps.push(StepScores {
                image: rec.image.clone(),
                task: rec.task.clone(),
                subject: rec.subject,
                step: i,
                ig: info_gain(&map, base, target),
                nss: n.value,
                nss_degenerate: n.degenerate,
                auc: auc_judd(&map, std::slice::from_ref(target)),
            });
        }
    }
    let avg = |f: fn(&StepScores) -> f64| mean(&steps.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
    Ok(ConditionalScores {
        cig: avg(|s| s.ig),
        cnss: avg(|s| s.nss),
        cauc: avg(|s| s.auc),
        steps,
    })
}

/// Conditional metrics of a model on a manifest's scanpaths, at the model
/// canvas. Records are rescaled to the canvas; baselines must be
/// canvas-sized. `tasks[t]` names query `t`.
pub fn conditional_eval_model<T: Scalar>(
    model: &Hat<T>,
    tasks: &[String],
    manifest: &DatasetManifest,
    baselines: &BTreeMap<String, Tensor<f64>>,
) -> Result<ConditionalScores> {
    let canvas = model.config().canvas;
    let mut contexts: BTreeMap<String, ImageContext<T>> = BTreeMap::new();
    let mut records = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let img = manifest.load_image(&rec.image)?;
        let (resized, fix) = resize_to_canvas(&img, &rec.fixations, canvas)?;
        if !contexts.contains_key(&rec.image) {
            contexts.insert(rec.image.clone(), model.image_context(&resized)?);
        }
        records.push(ScanpathRecord {
            fixations: fix,
            ..rec.clone()
        });
    }
    conditional_eval(&records, baselines, |rec, history| {
        let task = tasks
            .iter()
            .position(|t| *t == rec.task)
            .ok_or_else(|| Error::Argument(format!("the model has no query for task {:?}", rec.task)))?;
        let p = model.forward_with(&contexts[&rec.image], history, task)?;
        Ok(p.heatmap.cast())
    })
}

/// Scanpath metrics of `preds` against the manifest's scanpaths, grouped by
/// (image, task), merged with optional conditional scores.
pub fn evaluate(
    gt: &DatasetManifest,
    preds: &[ScanpathRecord],
    conditional: Option<&ConditionalScores>,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let bandwidth = config.bandwidth_px.unwrap_or(gt.pixels_per_degree);
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!(
            "clustering bandwidth {bandwidth} must be positive"
        )));
    }
    let params = &config.alignment;
    type Key = (String, String);
    let mut groups: BTreeMap<Key, (Vec<&ScanpathRecord>, Vec<&ScanpathRecord>)> = BTreeMap::new();
    for r in &gt.records {
        groups.entry((r.image.clone(), r.task.clone())).or_default().1.push(r);
    }
    for r in preds {
        if gt.image(&r.image).is_none() {
            return Err(Error::Argument(format!("prediction for unknown image {:?}", r.image)));
        }
        groups.entry((r.image.clone(), r.task.clone())).or_default().0.push(r);
    }
    let mut cond_groups: BTreeMap<Key, Vec<&StepScores>> = BTreeMap::new();
    if let Some(c) = conditional {
        for s in &c.steps {
            cond_groups
                .entry((s.image.clone(), s.task.clone()))
                .or_default()
                .push(s);
        }
    }

    let mut per_image = Vec::new();
    let mut summary = MetricSummary::default();
    let mut all_consistency = Vec::new();
    for ((image, task), (pred, gts)) in &groups {
        let mut m = ImageMetrics {
            image: image.clone(),
            task: task.clone(),
            n_pred: pred.len(),
            n_gt: gts.len(),
            ..ImageMetrics::default()
        };
        let gt_points: Vec<Fixation> = gts.iter().flat_map(|r| r.fixations.iter().copied()).collect();
        if !gt_points.is_empty() {
            let clustering = cluster_fixations(&gt_points, bandwidth);
            let labels = gt.load_labels(image)?;
            let mut ss = Vec::new();
            let mut sem = Vec::new();
            for p in pred {
                for g in gts {
                    ss.push(sequence_score(&p.fixations, &g.fixations, &clustering, params).value);
                    if let Some(s) = semantic_sequence_score(&p.fixations, &g.fixations, labels.as_ref(), params) {
                        sem.push(s.value);
                    }
                }
            }
            m.ss = mean(&ss);
            m.semss = mean(&sem);
            if labels.is_none() && !pred.is_empty() {
                summary.semss_skipped += 1;
            }
            let strings = ImageStrings {
                pred: pred.iter().map(|r| clustering.labels(&r.fixations)).collect(),
                gt: gts.iter().map(|r| clustering.labels(&r.fixations)).collect(),
            };
            if !strings.pred.is_empty() {
                m.recall = Some(scanpath_recall(
                    std::slice::from_ref(&strings),
                    config.recall_threshold,
                    params,
                ));
            }
            let hc = human_consistency(std::slice::from_ref(&strings.gt), params);
            if hc.images_used == 1 {
                m.human_consistency = Some(hc.value);
                all_consistency.push(hc.value);
            } else {
                summary.consistency_skipped += 1;
            }
        }
        if let Some(steps) = cond_groups.get(&(image.clone(), task.clone())) {
            m.cig = mean(&steps.iter().map(|s| s.ig).collect::<Vec<_>>());
            m.cnss = mean(&steps.iter().map(|s| s.nss).collect::<Vec<_>>());
            m.cauc = mean(&steps.iter().map(|s| s.auc).collect::<Vec<_>>());
        }
        summary.n_pred += m.n_pred;
        summary.n_gt += m.n_gt;
        per_image.push(m);
    }
    let collect = |f: fn(&ImageMetrics) -> Option<f64>| mean(&per_image.iter().filter_map(f).collect::<Vec<_>>());
    summary.ss = collect(|m| m.ss);
    summary.semss = collect(|m| m.semss);
    summary.recall = collect(|m| m.recall);
    summary.human_consistency = mean(&all_consistency);
    if let Some(c) = conditional {
        summary.cig = Some(c.cig);
        summary.cnss = Some(c.cnss);
        summary.cauc = Some(c.cauc);
        summary.conditional_steps = c.steps.len();
    }
    summary.n_items = per_image.len();
    Ok(MetricReport {
        params: ReportParams {
            bandwidth_px: bandwidth,
            alignment: *params,
            normalizer: "max_length".into(),
            recall_threshold: config.recall_threshold,
            auc_variant: "judd_full_sweep".into(),
            ig_log_base: 2,
            ig_eps: IG_EPS,
            sequence_includes_initial_fixation: true,
        },
        summary,
        per_image,
    })
}
