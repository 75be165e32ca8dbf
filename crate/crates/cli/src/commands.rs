use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hat::dataio::synth::synth_dataset;
use hat::dataio::{
    load_manifest, load_records, resize_to_canvas, write_heatmap, DatasetManifest, Fixation, HeatmapFormat,
    ScanpathRecord,
};
use hat::inference::generate as generate_scanpath;
use hat::interpret::{category_contribution_map, contribution_map, contribution_matrix};
use hat::metrics::{conditional_eval, conditional_eval_model, evaluate as score, task_baselines, ConditionalScores};
use hat::model::{load_checkpoint, Hat, ImageContext, PERIPHERAL_STRIDE};
use hat::training::fit;

use crate::config::RunConfig;
use crate::gradcheck::run_gradcheck;
use crate::Outcome;

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn ok(message: String) -> anyhow::Result<Outcome> {
    Ok(Outcome { passed: true, message })
}

fn load(path: &Path) -> anyhow::Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<(Hat<f32>, Vec<String>)> {
    let path = cfg.checkpoint()?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Image id and task joined into a file-name stem.
fn stem(image: &str, task: &str) -> String {
    format!("{image}__{task}")
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let m = synth_dataset(&cfg.synth_params(), &cfg.out)?;
    ok(format!(
        "wrote {} images and {} scanpaths to {}",
        m.images.len(),
        m.records.len(),
        cfg.out.join("manifest.jsonl").display()
    ))
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let manifest = load(cfg.manifest()?)?;
    let out = fit(&manifest, &cfg.model_config(), &cfg.train_config())?;
    out.save_checkpoint(&cfg.out.join("model.ckpt"))?;
    out.write_log(&cfg.out.join("loss.jsonl"))?;
    let mut epochs = String::new();
    for e in &out.epochs {
        epochs.push_str(&serde_json::to_string(e)?);
        epochs.push('\n');
    }
    write(&cfg.out.join("epochs.jsonl"), &epochs)?;
    let msg = match (out.epochs.first(), out.epochs.last()) {
        (Some(a), Some(b)) => format!("trained {} epochs: loss {:.6} -> {:.6}", out.epochs.len(), a.l, b.l),
        _ => "wrote an untrained checkpoint".to_string(),
    };
    ok(msg)
}

/// First record of every (image, task) pair, in key order.
fn items(manifest: &DatasetManifest) -> Vec<&ScanpathRecord> {
    let mut first: BTreeMap<(&str, &str), &ScanpathRecord> = BTreeMap::new();
    for r in &manifest.records {
        first.entry((r.image.as_str(), r.task.as_str())).or_insert(r);
    }
    first.into_values().collect()
}

fn task_index(tasks: &[String], task: &str) -> anyhow::Result<usize> {
    match tasks.iter().position(|t| t == task) {
        Some(i) => Ok(i),
        None => bail!("the checkpoint has no query for task {task:?}"),
    }
}

pub fn generate(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let manifest = load(cfg.manifest()?)?;
    let (model, tasks) = load_model(cfg)?;
    let canvas = model.config().canvas;
    let grid = model.config().grid(PERIPHERAL_STRIDE);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lines = String::new();
    let mut per_task: BTreeMap<String, Vec<(String, Vec<Fixation>)>> = BTreeMap::new();
    let mut images = BTreeMap::new();
    let mut count = 0;
    for rec in items(&manifest) {
        let t = task_index(&tasks, &rec.task)?;
        if !images.contains_key(&rec.image) {
            images.insert(rec.image.clone(), manifest.load_image(&rec.image)?);
        }
        let image = &images[&rec.image];
        let policy = cfg.policy(rec.condition, rng.gen());
        let out = generate_scanpath(&model, image, t, Some(rec.fixations[0]), &policy)?;
        lines.push_str(&serde_json::to_string(&out.to_wire(
            &rec.image,
            &rec.task,
            0,
            rec.condition,
        ))?);
        lines.push('\n');
        count += 1;

        if let Some(maps) = &out.heatmaps {
            for (k, map) in maps.iter().enumerate() {
                let path = cfg
                    .out
                    .join("heatmaps")
                    .join(format!("{}__{:02}.pfm", stem(&rec.image, &rec.task), k + 1));
                std::fs::create_dir_all(path.parent().expect("has parent"))?;
                write_heatmap(map.data(), canvas.0, canvas.1, &path, HeatmapFormat::Pfm)?;
            }
        }
        if cfg.dump_contributions {
            let (resized, fix) = resize_to_canvas(image, &out.fixations, canvas)?;
            let ctx = model.image_context(&resized)?;
            let dir = cfg.out.join("contributions");
            std::fs::create_dir_all(&dir)?;
            for k in 1..=out.tau.len() {
                let set = model.predict_all_with(&ctx, &fix[..k])?;
                let m = contribution_map(&set.cross_attention, t, grid)?;
                let path = dir.join(format!("{}__{:02}.pgm", stem(&rec.image, &rec.task), k));
                m.write(canvas, &path, HeatmapFormat::Pgm16)?;
            }
            per_task
                .entry(rec.task.clone())
                .or_default()
                .push((rec.image.clone(), fix));
        }
    }
    write(&cfg.out.join("scanpaths.jsonl"), &lines)?;

    for (task, paths) in &per_task {
        let t = task_index(&tasks, task)?;
        let mut contexts: BTreeMap<&str, ImageContext<f32>> = BTreeMap::new();
        for (image, _) in paths {
            if !contexts.contains_key(image.as_str()) {
                let (resized, _) = resize_to_canvas(&images[image], &[], canvas)?;
                contexts.insert(image, model.image_context(&resized)?);
            }
        }
        let items: Vec<(&ImageContext<f32>, &[Fixation])> = paths
            .iter()
            .map(|(img, fix)| (&contexts[img.as_str()], fix.as_slice()))
            .collect();
        let m = contribution_matrix(&model, &items, t)?;
        write(
            &cfg.out.join("contributions").join(format!("matrix__{task}.csv")),
            &m.to_csv(),
        )?;
    }
    ok(format!(
        "generated {count} scanpaths into {}",
        cfg.out.join("scanpaths.jsonl").display()
    ))
}

/// Records with fixations rescaled from image to canvas pixels.
fn records_at_canvas(manifest: &DatasetManifest, canvas: (usize, usize)) -> anyhow::Result<Vec<ScanpathRecord>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let Some(entry) = manifest.image(&r.image) else {
                bail!("record for unknown image {:?}", r.image);
            };
            let (h, w) = entry.dims;
            let (sy, sx) = (canvas.0 as f64 / h as f64, canvas.1 as f64 / w as f64);
            Ok(ScanpathRecord {
                fixations: r
                    .fixations
                    .iter()
                    .map(|f| Fixation::new(f.x * sx, f.y * sy, f.index))
                    .collect(),
                ..r.clone()
            })
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let gt = load(cfg.manifest()?)?;
    let preds = match &cfg.predictions {
        Some(p) => load_records(p)
            .with_context(|| format!("loading predictions {}", p.display()))?
            .into_iter()
            .enumerate()
            .map(|(i, w)| w.into_record(&format!("prediction {}", i + 1)))
            .collect::<hat::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let baseline_manifest = match &cfg.baseline_manifest {
        Some(p) => Some(load(p)?),
        None => None,
    };
    let conditional: Option<ConditionalScores> = match (&cfg.checkpoint, &baseline_manifest) {
        (Some(_), Some(base)) => {
            let (model, tasks) = load_model(cfg)?;
            let baselines = task_baselines(base, model.config().canvas)?;
            Some(conditional_eval_model(&model, &tasks, &gt, &baselines)?)
        }
        (Some(_), None) => bail!("conditional metrics need --baseline-manifest"),
        (None, Some(base)) => {
            // No model: score the baseline density itself.
            let baselines = task_baselines(base, cfg.canvas)?;
            let records = records_at_canvas(&gt, cfg.canvas)?;
            Some(conditional_eval(&records, &baselines, |rec, _| {
                Ok(baselines[&rec.task].clone())
            })?)
        }
        (None, None) => None,
    };
    let report = score(&gt, &preds, conditional.as_ref(), &cfg.eval_config())?;
    write(&cfg.out.join("report.json"), &(report.to_json()? + "\n"))?;
    write(&cfg.out.join("report.csv"), &report.to_csv())?;
    if let Some(c) = &conditional {
        write_json(&cfg.out.join("conditional_steps.json"), &c.steps)?;
    }
    let s = &report.summary;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    ok(format!(
        "SS {} SemSS {} cIG {} cNSS {} cAUC {} over {} items",
        fmt(s.ss),
        fmt(s.semss),
        fmt(s.cig),
        fmt(s.cnss),
        fmt(s.cauc),
        s.n_items
    ))
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    config: &'a hat::model::ModelConfig,
    tasks: &'a [String],
    parameters: usize,
    peripheral_tokens: usize,
}

pub fn inspect(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let manifest = load(cfg.manifest()?)?;
    let (model, tasks) = load_model(cfg)?;
    let task = cfg.task.clone().unwrap_or_else(|| tasks[0].clone());
    let t = task_index(&tasks, &task)?;
    let canvas = model.config().canvas;
    write_json(
        &cfg.out.join("model.json"),
        &ModelSummary {
            config: model.config(),
            tasks: &tasks,
            parameters: model.params.numel(),
            peripheral_tokens: model.config().peripheral_tokens(),
        },
    )?;

    let map = category_contribution_map(&model, &tasks, &manifest, &task)?;
    write_json(&cfg.out.join("contribution_map.json"), &map)?;
    map.write(canvas, &cfg.out.join("contribution_map.pgm"), HeatmapFormat::Pgm16)?;

    let mut contexts: BTreeMap<&str, ImageContext<f32>> = BTreeMap::new();
    let mut paths = Vec::new();
    for rec in manifest.records.iter().filter(|r| r.task == task) {
        let img = manifest.load_image(&rec.image)?;
        let (resized, fix) = resize_to_canvas(&img, &rec.fixations, canvas)?;
        if !contexts.contains_key(rec.image.as_str()) {
            contexts.insert(&rec.image, model.image_context(&resized)?);
        }
        paths.push((rec.image.as_str(), fix));
    }
    let items: Vec<(&ImageContext<f32>, &[Fixation])> = paths
        .iter()
        .map(|(img, fix)| (&contexts[img], fix.as_slice()))
        .collect();
    let matrix = contribution_matrix(&model, &items, t)?;
    write(&cfg.out.join("contribution_matrix.csv"), &matrix.to_csv())?;

    let mut msg = format!("task {task}: peripheral mass {:.4}; step rows:", map.peripheral_mass());
    for row in &matrix.values {
        let _ = write!(msg, " {:.3}", row[0]);
    }
    ok(msg)
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let summary = run_gradcheck(&cfg.gradcheck_options())?;
    write_json(&cfg.out.join("gradcheck.json"), &summary)?;
    let mut msg = String::new();
    for r in &summary.results {
        let _ = writeln!(
            msg,
            "{:<28} {} max rel err {:.3e} (< {:.0e}) {}",
            r.family,
            r.precision,
            r.max_rel_error,
            r.threshold,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let _ = write!(
        msg,
        "worst: {} ({}) {:.3e}",
        summary.worst_family, summary.worst_precision, summary.worst_rel_error
    );
    Ok(Outcome {
        passed: summary.passed,
        message: msg,
    })
}
