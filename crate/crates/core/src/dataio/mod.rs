//! Scanpath datasets: JSONL manifests, rasters, label maps, canvas resizing
//! and a procedural scene generator.
//!
//! A manifest file holds three kinds of lines:
//!
//! ```text
//! {"kind":"header","tasks":["red"],"pixels_per_degree":2.0,"label_names":{"0":"background"},"generator":{..}}
//! {"kind":"image","id":"img_000","raster":"images/img_000.ppm","labels":"labels/img_000.pgm"}
//! {"image":"img_000","task":"red","subject":0,"condition":"TP","X":[32.0,40.5],"Y":[32.0,12.25],"terminated":true}
//! ```
//!
//! Lines without a `kind` are scanpath records. Raster and label paths are
//! relative to the manifest's directory.

pub mod raster;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{resize_bilinear, Tensor};
pub use raster::{
    read_image, read_label_map, read_pfm, write_heatmap, write_image, write_label_map, HeatmapFormat, ImageRaster,
    SemanticLabelMap,
};
pub use synth::{synth_dataset, Blob, Scene, SynthParams};

/// Task name used by free-viewing records.
pub const FREEVIEW_TASK: &str = "freeview";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    TP,
    TA,
    FV,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::TP => "TP",
            Condition::TA => "TA",
            Condition::FV => "FV",
        })
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TP" => Ok(Condition::TP),
            "TA" => Ok(Condition::TA),
            "FV" => Ok(Condition::FV),
            other => Err(Error::Argument(format!("unknown condition {other:?}"))),
        }
    }
}

/// A fixation in pixel coordinates; pixel `(row i, col j)` has its center at
/// `(x, y) = (j, i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub index: usize,
}

impl Fixation {
    pub fn new(x: f64, y: f64, index: usize) -> Self {
        Fixation { x, y, index }
    }
}

/// Builds an indexed fixation list from coordinate pairs.
pub fn fixations_from_xy(points: &[(f64, f64)]) -> Vec<Fixation> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Fixation::new(x, y, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanpathRecord {
    pub image: String,
    pub task: String,
    pub subject: u32,
    pub condition: Condition,
    /// `fixations[0]` is the given initial fixation.
    pub fixations: Vec<Fixation>,
    pub terminated: bool,
}

impl ScanpathRecord {
    /// Number of fixations after the initial one.
    pub fn len(&self) -> usize {
        self.fixations.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_wire(&self) -> RecordWire {
        RecordWire {
            image: self.image.clone(),
            task: self.task.clone(),
            subject: self.subject,
            condition: self.condition,
            x: self.fixations.iter().map(|f| f.x).collect(),
            y: self.fixations.iter().map(|f| f.y).collect(),
            terminated: self.terminated,
            tau: None,
        }
    }
}

/// On-disk scanpath line. `tau` is present only on generated scanpaths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordWire {
    pub image: String,
    pub task: String,
    pub subject: u32,
    pub condition: Condition,
    #[serde(rename = "X")]
    pub x: Vec<f64>,
    #[serde(rename = "Y")]
    pub y: Vec<f64>,
    pub terminated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<f64>>,
}

impl RecordWire {
    /// Structural checks that need no image: lengths, finiteness, non-empty.
    pub fn into_record(self, name: &str) -> Result<ScanpathRecord> {
        let invalid = |field: &str, detail: String| Error::Validation {
            record: name.to_string(),
            field: field.to_string(),
            detail,
        };
        if self.x.is_empty() {
            return Err(invalid("X", "scanpath needs at least the initial fixation".into()));
        }
        if self.x.len() != self.y.len() {
            return Err(invalid(
                "Y",
                format!("{} x values but {} y values", self.x.len(), self.y.len()),
            ));
        }
        if let Some(t) = &self.tau {
            if t.len() + 1 != self.x.len() && t.len() != self.x.len() {
                return Err(invalid(
                    "tau",
                    format!("{} values for {} fixations", t.len(), self.x.len()),
                ));
            }
        }
        for (i, (&x, &y)) in self.x.iter().zip(&self.y).enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(invalid("X/Y", format!("fixation {i} is not finite")));
            }
        }
        let fixations = self
            .x
            .iter()
            .zip(&self.y)
            .enumerate()
            .map(|(i, (&x, &y))| Fixation::new(x, y, i))
            .collect();
        Ok(ScanpathRecord {
            image: self.image,
            task: self.task,
            subject: self.subject,
            condition: self.condition,
            fixations,
            terminated: self.terminated,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub raster: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Ground-truth scene layout, present on generated datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
    /// `(height, width)` read from the raster header at load time.
    #[serde(skip)]
    pub dims: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    tasks: Vec<String>,
    pixels_per_degree: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    label_names: BTreeMap<u16, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<SynthParams>,
}

#[derive(Serialize)]
struct ImageLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    entry: &'a ImageEntry,
}

/// Default pixels per degree of visual angle at a 320×512 canvas.
pub const DEFAULT_PIXELS_PER_DEGREE: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub images: Vec<ImageEntry>,
    pub records: Vec<ScanpathRecord>,
    /// Task vocabulary; a task's position is its query index.
    pub tasks: Vec<String>,
    pub pixels_per_degree: f64,
    pub label_names: BTreeMap<u16, String>,
    pub generator: Option<SynthParams>,
}

impl DatasetManifest {
    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn raster_path(&self, entry: &ImageEntry) -> PathBuf {
        self.root.join(&entry.raster)
    }

    pub fn load_image(&self, id: &str) -> Result<ImageRaster> {
        let entry = self.entry(id)?;
        read_image(&self.raster_path(entry))
    }

    /// Label map for `id`, or `None` when the image has none.
    pub fn load_labels(&self, id: &str) -> Result<Option<SemanticLabelMap>> {
        let entry = self.entry(id)?;
        entry
            .labels
            .as_ref()
            .map(|p| read_label_map(&self.root.join(p)))
            .transpose()
    }

    fn entry(&self, id: &str) -> Result<&ImageEntry> {
        self.image(id)
            .ok_or_else(|| Error::Argument(format!("image id {id:?} is not in the manifest")))
    }

    /// Records grouped by image id, in manifest order within each image.
    pub fn records_by_image(&self) -> BTreeMap<&str, Vec<&ScanpathRecord>> {
        let mut out: BTreeMap<&str, Vec<&ScanpathRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image.as_str()).or_default().push(r);
        }
        out
    }

    /// Checks every type invariant. Image dimensions must already be filled.
    pub fn validate(&self) -> Result<()> {
        let invalid = |record: String, field: &str, detail: String| Error::Validation {
            record,
            field: field.to_string(),
            detail,
        };
        if !(self.pixels_per_degree.is_finite() && self.pixels_per_degree > 0.0) {
            return Err(invalid(
                "header".into(),
                "pixels_per_degree",
                format!("{} is not positive", self.pixels_per_degree),
            ));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                return Err(invalid("header".into(), "tasks", format!("duplicate task {t:?}")));
            }
        }
        let mut ids = BTreeSet::new();
        for e in &self.images {
            if !ids.insert(e.id.as_str()) {
                return Err(invalid(format!("image {}", e.id), "id", "duplicate image id".into()));
            }
            let (h, w) = e.dims;
            if h < 32 || w < 32 {
                return Err(invalid(
                    format!("image {}", e.id),
                    "raster",
                    format!("{h}x{w} is below 32x32"),
                ));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            let name = format!("record {i} (image {}, subject {})", r.image, r.subject);
            let entry = self
                .image(&r.image)
                .ok_or_else(|| invalid(name.clone(), "image", format!("unknown image id {:?}", r.image)))?;
            if self.task_index(&r.task).is_none() {
                return Err(invalid(
                    name,
                    "task",
                    format!("task {:?} is not in the vocabulary", r.task),
                ));
            }
            if r.fixations.is_empty() {
                return Err(invalid(
                    name,
                    "X",
                    "scanpath needs at least the initial fixation".into(),
                ));
            }
            let (h, w) = entry.dims;
            for (k, f) in r.fixations.iter().enumerate() {
                if f.index != k {
                    return Err(invalid(name, "index", format!("fixation {k} has index {}", f.index)));
                }
                if !(f.x >= 0.0 && f.x < w as f64) {
                    return Err(invalid(name, "X", format!("fixation {k} x = {} outside [0, {w})", f.x)));
                }
                if !(f.y >= 0.0 && f.y < h as f64) {
                    return Err(invalid(name, "Y", format!("fixation {k} y = {} outside [0, {h})", f.y)));
                }
            }
        }
        Ok(())
    }

    /// Serialized manifest text. Deterministic for a given manifest.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            kind: "header".into(),
            tasks: self.tasks.clone(),
            pixels_per_degree: self.pixels_per_degree,
            label_names: self.label_names.clone(),
            generator: self.generator.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.images {
            out.push_str(&serde_json::to_string(&ImageLine {
                kind: "image",
                entry: e,
            })?);
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&serde_json::to_string(&r.to_wire())?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = manifest.to_jsonl()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads and fully validates a manifest, reading raster headers for image
/// sizes and label maps for vocabulary and size checks.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut header: Option<Header> = None;
    let mut images = Vec::new();
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let name = format!("line {}", ln + 1);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Validation {
            record: name.clone(),
            field: "json".into(),
            detail: e.to_string(),
        })?;
        let kind = value.get("kind").and_then(|k| k.as_str()).map(str::to_owned);
        let parse_err = |e: serde_json::Error| Error::Validation {
            record: name.clone(),
            field: "schema".into(),
            detail: e.to_string(),
        };
        match kind.as_deref() {
            Some("header") => {
                if header.is_some() {
                    return Err(Error::Validation {
                        record: name,
                        field: "kind".into(),
                        detail: "second header line".into(),
                    });
                }
                header = Some(serde_json::from_value(value).map_err(parse_err)?);
            }
            Some("image") => {
                let mut entry: ImageEntry = serde_json::from_value(value).map_err(parse_err)?;
                entry.dims = raster::read_image_dims(&root.join(&entry.raster)).map_err(|e| Error::Validation {
                    record: format!("image {}", entry.id),
                    field: "raster".into(),
                    detail: e.to_string(),
                })?;
                images.push(entry);
            }
            None => {
                let wire: RecordWire = serde_json::from_value(value).map_err(parse_err)?;
                records.push(wire.into_record(&name)?);
            }
            Some(other) => {
                return Err(Error::Validation {
                    record: name,
                    field: "kind".into(),
                    detail: format!("unknown line kind {other:?}"),
                })
            }
        }
    }
    let header = header.ok_or_else(|| Error::Validation {
        record: path.display().to_string(),
        field: "header".into(),
        detail: "manifest has no header line".into(),
    })?;
    let manifest = DatasetManifest {
        root,
        images,
        records,
        tasks: header.tasks,
        pixels_per_degree: header.pixels_per_degree,
        label_names: header.label_names,
        generator: header.generator,
    };
    manifest.validate()?;
    for e in &manifest.images {
        if let Some(lp) = &e.labels {
            let map = read_label_map(&manifest.root.join(lp))?;
            let record = format!("image {}", e.id);
            if (map.height, map.width) != e.dims {
                return Err(Error::Validation {
                    record,
                    field: "labels".into(),
                    detail: format!(
                        "label map {}x{} vs image {}x{}",
                        map.height, map.width, e.dims.0, e.dims.1
                    ),
                });
            }
            if let Some(bad) = map.labels.iter().find(|l| !manifest.label_names.contains_key(l)) {
                return Err(Error::Validation {
                    record,
                    field: "labels".into(),
                    detail: format!("label id {bad} is not in the vocabulary"),
                });
            }
        }
    }
    Ok(manifest)
}

/// Reads scanpath lines only (header and image lines are skipped), e.g. a
/// generated-scanpath file. Structural checks only.
pub fn load_records(path: &Path) -> Result<Vec<RecordWire>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let name = format!("line {}", ln + 1);
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Validation {
            record: name.clone(),
            field: "json".into(),
            detail: e.to_string(),
        })?;
        if value.get("kind").is_some() {
            continue;
        }
        let wire: RecordWire = serde_json::from_value(value).map_err(|e| Error::Validation {
            record: name.clone(),
            field: "schema".into(),
            detail: e.to_string(),
        })?;
        wire.clone().into_record(&name)?;
        out.push(wire);
    }
    Ok(out)
}

/// Bilinear resize to `(height, width)`; fixations scale by `width'/width`
/// in x and `height'/height` in y.
pub fn resize_to_canvas(
    image: &ImageRaster,
    fixations: &[Fixation],
    canvas: (usize, usize),
) -> Result<(ImageRaster, Vec<Fixation>)> {
    let (out_h, out_w) = canvas;
    let sx = out_w as f64 / image.width as f64;
    let sy = out_h as f64 / image.height as f64;
    let fix = fixations
        .iter()
        .map(|f| Fixation::new(f.x * sx, f.y * sy, f.index))
        .collect();
    if (out_h, out_w) == (image.height, image.width) {
        return Ok((image.clone(), fix));
    }
    let t = Tensor::new(vec![image.channels, image.height, image.width], image.values.clone())?;
    let resized = resize_bilinear(&t, out_h, out_w)?;
    let values = resized.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok((ImageRaster::new(out_h, out_w, image.channels, values)?, fix))
}

/// Nearest-neighbor label-map resize; labels are categorical.
pub fn resize_labels(map: &SemanticLabelMap, canvas: (usize, usize)) -> SemanticLabelMap {
    let (out_h, out_w) = canvas;
    if (out_h, out_w) == (map.height, map.width) {
        return map.clone();
    }
    let mut labels = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let si = (((i as f64 + 0.5) * map.height as f64 / out_h as f64) as usize).min(map.height - 1);
        for j in 0..out_w {
            let sj = (((j as f64 + 0.5) * map.width as f64 / out_w as f64) as usize).min(map.width - 1);
            labels.push(map.at(si, sj));
        }
    }
    SemanticLabelMap {
        height: out_h,
        width: out_w,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> ImageRaster {
        ImageRaster::new(h, w, 1, (0..h * w).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap()
    }

    #[test]
    fn identity_resize_keeps_everything() {
        let img = gray(40, 48);
        let fix = fixations_from_xy(&[(3.5, 7.25), (47.9, 39.9)]);
        let (out, f2) = resize_to_canvas(&img, &fix, (40, 48)).unwrap();
        assert_eq!(out, img);
        assert_eq!(f2, fix);
    }

    #[test]
    fn half_scale_fixation() {
        let img = gray(64, 128);
        let (out, f) = resize_to_canvas(&img, &fixations_from_xy(&[(100.0, 20.0)]), (32, 64)).unwrap();
        assert_eq!((out.height, out.width), (32, 64));
        assert_eq!((f[0].x, f[0].y), (50.0, 10.0));
    }

    #[test]
    fn condition_round_trips_through_text() {
        for c in [Condition::TP, Condition::TA, Condition::FV] {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert!("XX".parse::<Condition>().is_err());
    }

    #[test]
    fn label_resize_nearest() {
        let map = SemanticLabelMap {
            height: 2,
            width: 2,
            labels: vec![1, 2, 3, 4],
        };
        let big = resize_labels(&map, (4, 4));
        assert_eq!(big.labels, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }
}
