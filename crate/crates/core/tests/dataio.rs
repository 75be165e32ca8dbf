use std::path::Path;

use hat::dataio::synth::synth_images;
use hat::dataio::{
    fixations_from_xy, load_manifest, load_records, read_pfm, resize_to_canvas, save_manifest, synth_dataset,
    write_heatmap, Condition, HeatmapFormat, ImageRaster, SynthParams,
};
use hat::Error;
use proptest::prelude::*;

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// A directory with one 40×48 gray image and a manifest header.
fn one_image_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageRaster::new(40, 48, 1, vec![0.5; 40 * 48]).unwrap();
    hat::dataio::write_image(&img, &dir.path().join("a.pgm")).unwrap();
    dir
}

const HEADER: &str = r#"{"kind":"header","tasks":["red"],"pixels_per_degree":16.0}
{"kind":"image","id":"a","raster":"a.pgm"}
"#;

#[test]
fn empty_record_list_is_valid() {
    let dir = one_image_dir();
    let path = dir.path().join("m.jsonl");
    write(&path, HEADER);
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.records.len(), 0);
    assert_eq!(m.images.len(), 1);
    assert_eq!(m.images[0].dims, (40, 48));
}

#[test]
fn fixation_at_width_is_rejected() {
    let dir = one_image_dir();
    let path = dir.path().join("m.jsonl");
    let rec =
        r#"{"image":"a","task":"red","subject":0,"condition":"TP","X":[10.0,48.0],"Y":[5.0,5.0],"terminated":true}"#;
    write(&path, &format!("{HEADER}{rec}\n"));
    match load_manifest(&path) {
        Err(Error::Validation { record, field, .. }) => {
            assert!(record.contains("record 0"), "{record}");
            assert_eq!(field, "X");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
    // Just inside the boundary is fine.
    let ok = rec.replace("48.0", "47.999");
    write(&path, &format!("{HEADER}{ok}\n"));
    assert_eq!(load_manifest(&path).unwrap().records.len(), 1);
}

#[test]
fn unknown_image_and_task_are_named() {
    let dir = one_image_dir();
    let path = dir.path().join("m.jsonl");
    let bad_img = r#"{"image":"zz","task":"red","subject":3,"condition":"TP","X":[1.0],"Y":[1.0],"terminated":false}"#;
    write(&path, &format!("{HEADER}{bad_img}\n"));
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("record 0") && err.contains("image"), "{err}");

    let bad_task = r#"{"image":"a","task":"blue","subject":3,"condition":"TP","X":[1.0],"Y":[1.0],"terminated":false}"#;
    write(&path, &format!("{HEADER}{bad_task}\n"));
    match load_manifest(&path) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "task"),
        other => panic!("{other:?}"),
    }

    let ragged =
        r#"{"image":"a","task":"red","subject":3,"condition":"TP","X":[1.0,2.0],"Y":[1.0],"terminated":false}"#;
    write(&path, &format!("{HEADER}{ragged}\n"));
    match load_manifest(&path) {
        Err(Error::Validation { record, field, .. }) => {
            assert_eq!(record, "line 3");
            assert_eq!(field, "Y");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn synthetic_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams::new(7, 8, Condition::TP, (64, 64));
    let made = synth_dataset(&params, dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    let loaded = load_manifest(&path).unwrap();
    assert!(loaded == made, "loaded manifest differs from generated one");
    let path2 = dir.path().join("again.jsonl");
    save_manifest(&loaded, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(load_manifest(&path2).unwrap(), loaded);
    assert_eq!(loaded.records.len(), 24);
    let labels = loaded.load_labels("img_000").unwrap().unwrap();
    let target = loaded.images[0].scene.as_ref().unwrap().target().unwrap().clone();
    assert_eq!(labels.at(target.y.round() as usize, target.x.round() as usize), 1);
}

#[test]
fn generated_records_load_as_records() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&SynthParams::new(1, 2, Condition::FV, (48, 64)), dir.path()).unwrap();
    let recs = load_records(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(recs.len(), 6);
    assert!(recs
        .iter()
        .all(|r| r.task == "freeview" && r.condition == Condition::FV));
}

#[test]
fn synthesis_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let params = SynthParams::new(11, 4, Condition::TA, (64, 64));
    synth_dataset(&params, a.path()).unwrap();
    synth_dataset(&params, b.path()).unwrap();
    for f in ["manifest.jsonl", "images/img_002.ppm", "labels/img_003.pgm"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn tp_scanpaths_end_on_the_target() {
    let params = SynthParams::new(3, 40, Condition::TP, (64, 64));
    for img in synth_images(&params).unwrap() {
        let t = img.scene.target().unwrap();
        for r in &img.records {
            let last = r.fixations.last().unwrap();
            assert!((last.x - t.x).hypot(last.y - t.y) <= t.radius);
            assert!(r.terminated);
            assert_eq!((r.fixations[0].x, r.fixations[0].y), (32.0, 32.0));
        }
    }
}

#[test]
fn ta_and_fv_follow_contrast_order() {
    for cond in [Condition::TA, Condition::FV] {
        let params = SynthParams::new(5, 10, cond, (64, 64));
        for img in synth_images(&params).unwrap() {
            let mut contrasts: Vec<f64> = img.scene.blobs.iter().map(|b| b.contrast).collect();
            contrasts.sort_by(|a, b| b.total_cmp(a));
            let want = if cond == Condition::TA {
                params.ta_visits
            } else {
                img.scene.blobs.len()
            };
            for r in &img.records {
                assert_eq!(r.len(), want);
                for (k, f) in r.fixations[1..].iter().enumerate() {
                    let nearest = img
                        .scene
                        .blobs
                        .iter()
                        .min_by(|a, b| (a.x - f.x).hypot(a.y - f.y).total_cmp(&(b.x - f.x).hypot(b.y - f.y)))
                        .unwrap();
                    assert_eq!(nearest.contrast, contrasts[k]);
                }
            }
        }
    }
}

/// Under the TP rule the number of detours is geometric in `p_detour`,
/// truncated at the distractor count. A scanpath of length 1 occurs with
/// probability `1 - p`; the observed rate over 1000 records must lie within
/// three binomial standard deviations, and so must the mean length.
#[test]
fn tp_length_distribution_matches_rule() {
    let mut params = SynthParams::new(21, 250, Condition::TP, (64, 64));
    params.subjects_per_image = 4;
    let records: Vec<_> = synth_images(&params)
        .unwrap()
        .into_iter()
        .flat_map(|i| i.records)
        .collect();
    assert_eq!(records.len(), 1000);
    let n = records.len() as f64;
    let p = params.p_detour;
    let direct = records.iter().filter(|r| r.len() == 1).count() as f64;
    let sd = (n * p * (1.0 - p)).sqrt();
    assert!((direct - n * (1.0 - p)).abs() <= 3.0 * sd, "direct {direct}");

    // Exact length law: P(L = 1 + j) = p^j (1 - p) for j < d, P(L = 1 + d) = p^d.
    let d = params.n_distractors;
    let probs: Vec<f64> = (0..=d)
        .map(|j| {
            if j < d {
                p.powi(j as i32) * (1.0 - p)
            } else {
                p.powi(d as i32)
            }
        })
        .collect();
    let mean: f64 = probs.iter().enumerate().map(|(j, q)| (1 + j) as f64 * q).sum();
    let var: f64 = probs
        .iter()
        .enumerate()
        .map(|(j, q)| ((1 + j) as f64 - mean).powi(2) * q)
        .sum();
    let observed = records.iter().map(|r| r.len() as f64).sum::<f64>() / n;
    assert!(
        (observed - mean).abs() <= 3.0 * (var / n).sqrt(),
        "mean {observed} vs {mean}"
    );
}

#[test]
fn heatmap_pgm16_endpoints_and_constant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.pgm");
    write_heatmap(&[0.0, 1.0], 1, 2, &p, HeatmapFormat::Pgm16).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let header = b"P5\n2 1\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[0, 0, 0xff, 0xff]);

    write_heatmap(&[0.0; 6], 2, 3, &p, HeatmapFormat::Pgm16).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert!(bytes[b"P5\n3 2\n65535\n".len()..].iter().all(|&b| b == 0));
    assert_eq!(bytes.len(), b"P5\n3 2\n65535\n".len() + 12);
}

#[test]
fn heatmap_rejects_non_finite() {
    let dir = tempfile::tempdir().unwrap();
    let err = write_heatmap(&[f32::NAN], 1, 1, &dir.path().join("x"), HeatmapFormat::Pfm);
    assert!(err.is_err());
}

#[test]
fn aspect_changing_resize_scales_per_axis() {
    let img = ImageRaster::new(48, 64, 1, vec![0.25; 48 * 64]).unwrap();
    let fix = fixations_from_xy(&[(10.0, 30.0), (63.5, 47.25)]);
    let (out, f) = resize_to_canvas(&img, &fix, (32, 64)).unwrap();
    assert_eq!((out.height, out.width), (32, 64));
    // y scales by 32/48 = 2/3, x by 1.
    assert_eq!(f[0].x, 10.0);
    assert!((f[0].y - 20.0).abs() < 1e-12);
    assert_eq!(f[1].x, 63.5);
    assert!((f[1].y - 31.5).abs() < 1e-12);
    assert!(out.values.iter().all(|&v| (v - 0.25).abs() < 1e-6));
}

proptest! {
    #[test]
    fn pfm_round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let map: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pfm");
        write_heatmap(&map, h, w, &p, HeatmapFormat::Pfm).unwrap();
        let (back, bh, bw) = read_pfm(&p).unwrap();
        prop_assert_eq!((bh, bw), (h, w));
        prop_assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            map.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn resize_then_inverse_restores_fixations(
        h in 32usize..200, w in 32usize..200, h2 in 32usize..200, w2 in 32usize..200,
        fx in 0.0f64..1.0, fy in 0.0f64..1.0,
    ) {
        let img = ImageRaster::new(h, w, 1, vec![0.5; h * w]).unwrap();
        let fix = fixations_from_xy(&[(fx * w as f64, fy * h as f64)]);
        let (small, f2) = resize_to_canvas(&img, &fix, (h2, w2)).unwrap();
        prop_assert!(f2[0].x < w2 as f64 && f2[0].y < h2 as f64);
        let (_, f3) = resize_to_canvas(&small, &f2, (h, w)).unwrap();
        prop_assert!((f3[0].x - fix[0].x).abs() <= 0.5);
        prop_assert!((f3[0].y - fix[0].y).abs() <= 0.5);
    }
}
