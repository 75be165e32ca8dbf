//! Procedural search and free-viewing scenes with rule-generated scanpaths.
//!
//! Scenes are colored disks on a dim noisy background. Scanpaths start at the
//! canvas center and follow a fixed rule per condition:
//!
//! - TP: at each step, with probability `p_detour` fixate the unvisited
//!   distractor nearest the current fixation, otherwise fixate the target and
//!   stop. Once every distractor has been visited the target is next.
//! - TA: fixate the `ta_visits` highest-contrast blobs in contrast order.
//! - FV: fixate every blob in descending contrast order.
//!
//! Every fixation is the blob center plus isotropic Gaussian jitter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    save_manifest, write_image, write_label_map, Condition, DatasetManifest, Fixation, ImageEntry, ImageRaster,
    ScanpathRecord, SemanticLabelMap, FREEVIEW_TASK,
};
use crate::error::{Error, Result};

/// Named colors available to blobs. Label id of a color is its index + 1.
pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [1.0, 0.1, 0.1]),
    ("green", [0.1, 0.9, 0.1]),
    ("blue", [0.15, 0.3, 1.0]),
    ("yellow", [1.0, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("cyan", [0.1, 0.9, 0.9]),
];

fn color_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|(n, _)| *n == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_images: usize,
    pub condition: Condition,
    /// `(height, width)`
    pub canvas: (usize, usize),
    /// Search targets, drawn round-robin per image. Ignored for FV.
    pub tasks: Vec<String>,
    pub blob_radius: f64,
    pub n_distractors: usize,
    pub subjects_per_image: usize,
    pub p_detour: f64,
    /// Standard deviation of fixation jitter in pixels.
    pub jitter: f64,
    pub ta_visits: usize,
    pub pixels_per_degree: f64,
}

impl SynthParams {
    pub fn new(seed: u64, n_images: usize, condition: Condition, canvas: (usize, usize)) -> Self {
        SynthParams {
            seed,
            n_images,
            condition,
            canvas,
            tasks: vec!["red".into()],
            blob_radius: 6.0,
            n_distractors: 3,
            subjects_per_image: 3,
            p_detour: 0.15,
            jitter: 1.0,
            ta_visits: 3,
            pixels_per_degree: super::DEFAULT_PIXELS_PER_DEGREE * canvas.1 as f64 / 512.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("synthetic canvas {h}x{w} is below 32x32")));
        }
        if !(0.0..=1.0).contains(&self.p_detour) {
            return Err(Error::Config(format!("p_detour {} outside [0, 1]", self.p_detour)));
        }
        if !(self.blob_radius > 0.0 && self.jitter >= 0.0 && self.pixels_per_degree > 0.0) {
            return Err(Error::Config(
                "blob radius, jitter and pixels_per_degree must be positive".into(),
            ));
        }
        if self.condition != Condition::FV {
            if self.tasks.is_empty() {
                return Err(Error::Config("search datasets need at least one task".into()));
            }
            for t in &self.tasks {
                if color_index(t).is_none() {
                    return Err(Error::Config(format!("task {t:?} is not a palette color")));
                }
            }
        }
        Ok(())
    }

    /// Task vocabulary of the generated manifest.
    pub fn vocabulary(&self) -> Vec<String> {
        match self.condition {
            Condition::FV => vec![FREEVIEW_TASK.to_string()],
            _ => self.tasks.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: String,
    pub contrast: f64,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: String,
    pub blobs: Vec<Blob>,
}

impl Scene {
    pub fn target(&self) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.target)
    }
}

/// One generated image with its labels, layout and scanpaths.
pub struct SynthImage {
    pub id: String,
    pub image: ImageRaster,
    pub labels: Option<SemanticLabelMap>,
    pub scene: Scene,
    pub records: Vec<ScanpathRecord>,
}

/// Generates all images in memory. Deterministic in `params`.
pub fn synth_images(params: &SynthParams) -> Result<Vec<SynthImage>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let vocab = params.vocabulary();
    let mut out = Vec::with_capacity(params.n_images);
    for i in 0..params.n_images {
        let task = vocab[i % vocab.len()].clone();
        let scene = place_blobs(params, &task, &mut rng)?;
        let image = render(params, &scene, &mut rng)?;
        let labels = (params.condition != Condition::FV).then(|| label_map(params, &scene));
        let id = format!("img_{i:03}");
        let records = (0..params.subjects_per_image)
            .map(|s| {
                let (fixations, terminated) = scanpath(params, &scene, &mut rng);
                ScanpathRecord {
                    image: id.clone(),
                    task: task.clone(),
                    subject: s as u32,
                    condition: params.condition,
                    fixations,
                    terminated,
                }
            })
            .collect();
        out.push(SynthImage {
            id,
            image,
            labels,
            scene,
            records,
        });
    }
    Ok(out)
}

/// Writes `manifest.jsonl`, `images/*.ppm` and `labels/*.pgm` under `dir`
/// and returns the manifest.
pub fn synth_dataset(params: &SynthParams, dir: &Path) -> Result<DatasetManifest> {
    let generated = synth_images(params)?;
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut images = Vec::new();
    let mut records = Vec::new();
    for g in generated {
        let raster = PathBuf::from(format!("images/{}.ppm", g.id));
        write_image(&g.image, &dir.join(&raster))?;
        let labels = match &g.labels {
            Some(map) => {
                let p = PathBuf::from(format!("labels/{}.pgm", g.id));
                write_label_map(map, &dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        images.push(ImageEntry {
            id: g.id,
            raster,
            labels,
            scene: Some(g.scene),
            dims: params.canvas,
        });
        records.extend(g.records);
    }
    let mut label_names = BTreeMap::new();
    if params.condition != Condition::FV {
        label_names.insert(0, "background".to_string());
        for (k, (name, _)) in PALETTE.iter().enumerate() {
            label_names.insert(k as u16 + 1, name.to_string());
        }
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        images,
        records,
        tasks: params.vocabulary(),
        pixels_per_degree: params.pixels_per_degree,
        label_names,
        generator: Some(params.clone()),
    };
    manifest.validate()?;
    save_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn center(params: &SynthParams) -> (f64, f64) {
    (params.canvas.1 as f64 / 2.0, params.canvas.0 as f64 / 2.0)
}

/// Rejection-samples blob centers inside the canvas, apart from each other
/// and from the initial fixation. Contrast of the TP target is 1; all other
/// blobs draw contrast from `[0.4, 0.9]`.
fn place_blobs(params: &SynthParams, task: &str, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let (h, w) = params.canvas;
    let r = params.blob_radius;
    let n = params.n_distractors + 1;
    let margin = r + 2.0;
    let (cx, cy) = center(params);
    let target_color = color_index(task);
    let others: Vec<usize> = (0..PALETTE.len()).filter(|&k| Some(k) != target_color).collect();
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    let mut attempts = 0;
    while blobs.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "cannot place {n} blobs of radius {r} on a {h}x{w} canvas"
            )));
        }
        let x = rng.gen_range(margin..w as f64 - margin);
        let y = rng.gen_range(margin..h as f64 - margin);
        let clear_of_start = (x - cx).hypot(y - cy) >= 2.0 * r;
        let clear_of_blobs = blobs.iter().all(|b| (x - b.x).hypot(y - b.y) >= 2.5 * r + 2.0);
        if !(clear_of_start && clear_of_blobs) {
            continue;
        }
        let is_target = params.condition == Condition::TP && blobs.is_empty();
        let (color, contrast) = if is_target {
            (PALETTE[target_color.expect("validated task color")].0, 1.0)
        } else {
            let k = match params.condition {
                Condition::FV => rng.gen_range(0..PALETTE.len()),
                _ => others[rng.gen_range(0..others.len())],
            };
            (PALETTE[k].0, rng.gen_range(0.4..0.9))
        };
        blobs.push(Blob {
            x,
            y,
            radius: r,
            color: color.to_string(),
            contrast,
            target: is_target,
        });
    }
    Ok(Scene {
        task: task.to_string(),
        blobs,
    })
}

fn render(params: &SynthParams, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<ImageRaster> {
    let (h, w) = params.canvas;
    let plane = h * w;
    let mut values = vec![0.0f32; 3 * plane];
    for v in values.iter_mut() {
        *v = 0.15 + rng.gen_range(-0.05f32..0.05);
    }
    for b in &scene.blobs {
        let rgb = PALETTE[color_index(&b.color).expect("palette color")].1;
        for i in 0..h {
            for j in 0..w {
                let d = (j as f64 - b.x).hypot(i as f64 - b.y);
                let alpha = (b.radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    for (c, &col) in rgb.iter().enumerate() {
                        let v = &mut values[c * plane + i * w + j];
                        *v = *v * (1.0 - alpha) + col * b.contrast as f32 * alpha;
                    }
                }
            }
        }
    }
    ImageRaster::new(h, w, 3, values)
}

fn label_map(params: &SynthParams, scene: &Scene) -> SemanticLabelMap {
    let (h, w) = params.canvas;
    let mut labels = vec![0u16; h * w];
    for b in &scene.blobs {
        let id = color_index(&b.color).expect("palette color") as u16 + 1;
        for i in 0..h {
            for j in 0..w {
                if (j as f64 - b.x).hypot(i as f64 - b.y) <= b.radius {
                    labels[i * w + j] = id;
                }
            }
        }
    }
    SemanticLabelMap {
        height: h,
        width: w,
        labels,
    }
}

fn scanpath(params: &SynthParams, scene: &Scene, rng: &mut ChaCha8Rng) -> (Vec<Fixation>, bool) {
    let (cx, cy) = center(params);
    let mut stops: Vec<usize> = Vec::new();
    match params.condition {
        Condition::TP => {
            let mut pos = (cx, cy);
            let mut unvisited: Vec<usize> = (0..scene.blobs.len()).filter(|&k| !scene.blobs[k].target).collect();
            while !unvisited.is_empty() && rng.gen_bool(params.p_detour) {
                let (slot, &k) = unvisited
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let da = (scene.blobs[*a.1].x - pos.0).hypot(scene.blobs[*a.1].y - pos.1);
                        let db = (scene.blobs[*b.1].x - pos.0).hypot(scene.blobs[*b.1].y - pos.1);
                        da.total_cmp(&db)
                    })
                    .expect("non-empty");
                unvisited.remove(slot);
                stops.push(k);
                pos = (scene.blobs[k].x, scene.blobs[k].y);
            }
            stops.push(
                scene
                    .blobs
                    .iter()
                    .position(|b| b.target)
                    .expect("TP scene has a target"),
            );
        }
        Condition::TA | Condition::FV => {
            let mut order: Vec<usize> = (0..scene.blobs.len()).collect();
            order.sort_by(|&a, &b| scene.blobs[b].contrast.total_cmp(&scene.blobs[a].contrast));
            if params.condition == Condition::TA {
                order.truncate(params.ta_visits);
            }
            stops = order;
        }
    }
    let (h, w) = params.canvas;
    let noise = Normal::new(0.0, params.jitter).expect("jitter validated");
    let mut fixations = vec![Fixation::new(cx, cy, 0)];
    for (n, &k) in stops.iter().enumerate() {
        let b = &scene.blobs[k];
        let x = (b.x + noise.sample(rng)).clamp(0.0, w as f64 - 1.0);
        let y = (b.y + noise.sample(rng)).clamp(0.0, h as f64 - 1.0);
        fixations.push(Fixation::new(x, y, n + 1));
    }
    (fixations, true)
}
