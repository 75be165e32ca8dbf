use hat::dataio::{fixations_from_xy, Fixation, ImageRaster};
use hat::model::{load_checkpoint, save_checkpoint, Hat, ModelConfig, ModelProbe, SpatialEmbeddingTable};
use hat::numerics::{grad_check_f32_sampled, grad_check_sampled, Graph, Tensor};
use hat::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> ImageRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRaster::new(h, w, 3, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn small_config(canvas: (usize, usize), c: usize, n_tasks: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(canvas, c, n_tasks);
    cfg.mlp_hidden = 16;
    cfg.seed = 3;
    cfg
}

#[test]
fn pyramid_shapes_follow_strides() {
    let model = Hat::<f32>::new(ModelConfig::new((320, 512), 32, 1)).unwrap();
    let p = model.extract_pyramid(&random_image(320, 512, 1)).unwrap();
    assert_eq!(p.p1.shape(), &[32, 10, 16]);
    assert_eq!(p.p2.shape(), &[32, 20, 32]);
    assert_eq!(p.p3.shape(), &[32, 40, 64]);
    assert_eq!(p.p4.shape(), &[32, 80, 128]);
}

#[test]
fn pyramid_is_deterministic_and_rejects_bad_sizes() {
    let model = Hat::<f32>::new(small_config((64, 64), 8, 1)).unwrap();
    let img = random_image(64, 64, 2);
    assert_eq!(
        model.extract_pyramid(&img).unwrap(),
        model.extract_pyramid(&img.clone()).unwrap()
    );
    assert!(matches!(
        model.extract_pyramid(&random_image(64, 96, 2)),
        Err(Error::Config(_))
    ));
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::zeros(&[3, 48, 64]));
    assert!(matches!(model.pyramid_graph(&mut g, x), Err(Error::Config(_))));
    assert!(matches!(
        Hat::<f32>::new(ModelConfig::new((48, 64), 8, 1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn spatial_table_values() {
    let t = SpatialEmbeddingTable::new(320, 512, 32).unwrap();
    let g00: Vec<f64> = t.row(0, 0);
    for (k, v) in g00.iter().enumerate() {
        assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
    }
    assert_eq!(t.lookup::<f64>(1, 1, 32), t.row::<f64>(32, 32));
    // x encoding first, y second: G[i, j] for j = 1 differs from G[0, 0] in
    // the first half only.
    let g01: Vec<f64> = t.row(0, 1);
    assert!(g01[..16].iter().zip(&g00[..16]).any(|(a, b)| a != b));
    assert_eq!(&g01[16..], &g00[16..]);
    assert_eq!(g01[0], 1f64.sin());
    assert!(matches!(SpatialEmbeddingTable::new(8, 8, 6), Err(Error::Config(_))));
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Every row has the same norm and the dot product of two rows depends only
/// on their offset `(dy, dx)`, so scanning all offsets covers all pairs.
/// The reduction itself is checked exhaustively on a smaller grid.
#[test]
fn spatial_rows_are_distinct() {
    let small = SpatialEmbeddingTable::new(12, 16, 32).unwrap();
    let rows: Vec<Vec<f64>> = (0..12)
        .flat_map(|i| (0..16).map(move |j| (i, j)))
        .map(|(i, j)| small.row(i, j))
        .collect();
    let mut worst = f64::MIN;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            let c = cosine(&rows[a], &rows[b]);
            let (ia, ja, ib, jb) = (a / 16, a % 16, b / 16, b % 16);
            let shifted = cosine(&small.row(0, 0), &small.row(ib.abs_diff(ia), jb.abs_diff(ja)));
            assert!((c - shifted).abs() < 1e-12);
            worst = worst.max(c);
        }
    }
    assert!(worst < 1.0 - 1e-6);

    let t = SpatialEmbeddingTable::new(320, 512, 32).unwrap();
    let origin: Vec<f64> = t.row(0, 0);
    let mut worst = f64::MIN;
    for dy in 0..320 {
        for dx in 0..512 {
            if dy == 0 && dx == 0 {
                continue;
            }
            worst = worst.max(cosine(&origin, &t.row(dy, dx)));
        }
    }
    assert!(worst < 1.0 - 1e-6, "max cosine {worst}");
}

#[test]
fn working_memory_layout() {
    let model = Hat::<f64>::new(ModelConfig::new((320, 512), 32, 1)).unwrap();
    let ctx = model.image_context(&random_image(320, 512, 4)).unwrap();
    let mut g = Graph::<f64>::inference();
    let feats = hat::model::ImageFeatures {
        peripheral: g.constant(ctx.peripheral.clone()),
        p4_flat: g.constant(ctx.p4_flat.clone()),
        p4_tokens: g.constant(ctx.p4_tokens.clone()),
    };
    let m0 = model.working_memory(&mut g, &feats, &[]).unwrap();
    assert_eq!(g.shape(m0), &[160, 32]);

    assert_eq!(model.foveal_cell(&Fixation::new(6.0, 6.0, 0)).unwrap(), (2, 2));
    assert_eq!(model.foveal_cell(&Fixation::new(511.9, 319.9, 0)).unwrap(), (79, 127));
    assert!(matches!(
        model.foveal_cell(&Fixation::new(512.0, 3.0, 0)),
        Err(Error::Bounds(_))
    ));

    let fix = fixations_from_xy(&[(256.0, 160.0), (40.2, 300.7), (500.0, 10.0)]);
    let mut prev = g.value(m0).clone();
    for k in 1..=3 {
        let m = model.working_memory(&mut g, &feats, &fix[..k]).unwrap();
        let cur = g.value(m).clone();
        assert_eq!(cur.shape(), &[160 + k, 32]);
        assert_eq!(&cur.data()[..prev.numel()], prev.data());
        prev = cur;
    }

    // Foveal token = P4 feature + foveal scale + spatial + temporal.
    let (i, j) = model.foveal_cell(&fix[1]).unwrap();
    let cell = i * 128 + j;
    let scale = model.params.get(model.params.id_of("memory.scale_foveal").unwrap());
    let temporal = model.params.get(model.temporal_param());
    let spatial: Vec<f64> = model.table().row(4 * i, 4 * j);
    for ch in 0..32 {
        let want = ctx.p4_tokens.at(&[cell, ch]) + scale.data()[ch] + spatial[ch] + temporal.at(&[1, ch]);
        assert!((prev.at(&[161, ch]) - want).abs() < 1e-12);
    }
}

#[test]
fn temporal_index_beyond_table_is_an_error() {
    let model = Hat::<f32>::new(small_config((32, 32), 8, 1)).unwrap();
    let img = random_image(32, 32, 1);
    let fix = vec![Fixation::new(3.0, 3.0, 21)];
    assert!(matches!(model.forward(&img, &fix, 0), Err(Error::Config(_))));
    assert!(matches!(model.forward(&img, &[], 1), Err(Error::Argument(_))));
}

#[test]
fn single_token_memory_attends_with_weight_one() {
    let model = Hat::<f64>::new(small_config((32, 32), 8, 1)).unwrap();
    let mut g = Graph::<f64>::inference();
    let mem = g.constant(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.3 - 1.0));
    let (_, maps) = model.encode_memory(&mut g, mem).unwrap();
    for m in maps {
        assert!(g.value(m).data().iter().all(|&w| w == 1.0));
    }
    let agg = model.aggregate(&mut g, mem).unwrap();
    for m in agg.attention {
        assert_eq!(g.value(m).shape(), &[4, 1, 1]);
        assert!(g.value(m).data().iter().all(|&w| w == 1.0));
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = Hat::<f64>::new(small_config((32, 32), 8, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = Tensor::<f64>::from_fn(&[6, 8], |_| rng.gen_range(-1.0..1.0));
    let mut swapped = base.clone();
    for c in 0..8 {
        swapped.data_mut().swap(3 * 8 + c, 5 * 8 + c);
    }
    let mut g = Graph::<f64>::inference();
    let a = g.constant(base);
    let b = g.constant(swapped);
    let (ea, _) = model.encode_memory(&mut g, a).unwrap();
    let (eb, _) = model.encode_memory(&mut g, b).unwrap();
    let (va, vb) = (g.value(ea).clone(), g.value(eb).clone());
    for r in 0..6 {
        let src = match r {
            3 => 5,
            5 => 3,
            r => r,
        };
        for c in 0..8 {
            assert!((va.at(&[src, c]) - vb.at(&[r, c])).abs() < 1e-12);
        }
    }
}

// ---- direct-formula oracle for one decoder layer --------------------------

fn p(model: &Hat<f64>, name: &str) -> Vec<f64> {
    model.params.get(model.params.id_of(name).unwrap()).data().to_vec()
}

fn layer_norm(x: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(k, v)| (v - mu) / (var + 1e-5).sqrt() * gain[k] + bias[k])
                .collect()
        })
        .collect()
}

fn linear(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let d_out = b.len();
    x.iter()
        .map(|r| {
            (0..d_out)
                .map(|o| b[o] + r.iter().enumerate().map(|(i, v)| v * w[i * d_out + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn mha(model: &Hat<f64>, name: &str, q: &[Vec<f64>], kv: &[Vec<f64>], heads: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let lin = |x: &[Vec<f64>], s: &str| {
        linear(
            x,
            &p(model, &format!("{name}.{s}.weight")),
            &p(model, &format!("{name}.{s}.bias")),
        )
    };
    let (qp, kp, vp) = (lin(q, "q"), lin(kv, "k"), lin(kv, "v"));
    let c = q[0].len();
    let d = c / heads;
    let mut merged = vec![vec![0.0; c]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| (0..d).map(|t| qi[h * d + t] * kj[h * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                let a = ej / z;
                weights.push(a);
                for t in 0..d {
                    merged[i][h * d + t] += a * vp[j][h * d + t];
                }
            }
        }
    }
    (lin(&merged, "o"), weights)
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

#[test]
fn decoder_layer_matches_direct_formula() {
    let mut cfg = small_config((32, 32), 8, 2);
    cfg.decoder_layers = 1;
    cfg.heads = 2;
    let mut model = Hat::<f64>::new(cfg).unwrap();
    // Non-trivial norms and biases so every term of the formula matters.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        if name.starts_with("aggregator.") && (name.ends_with(".bias") || name.ends_with(".gain")) {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    let memory: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut g = Graph::<f64>::inference();
    let mem = g.constant(Tensor::new(vec![3, 8], memory.concat()).unwrap());
    let out = model.aggregate(&mut g, mem).unwrap();

    let ln =
        |x: &[Vec<f64>], n: &str| layer_norm(x, &p(&model, &format!("{n}.gain")), &p(&model, &format!("{n}.bias")));
    let q0: Vec<Vec<f64>> = p(&model, "aggregator.queries").chunks(8).map(<[f64]>::to_vec).collect();
    let (cross, cross_w) = mha(
        &model,
        "aggregator.layer0.cross",
        &ln(&q0, "aggregator.layer0.norm_cross"),
        &memory,
        2,
    );
    let q1 = add(&q0, &cross);
    let n1 = ln(&q1, "aggregator.layer0.norm_self");
    let (sa, _) = mha(&model, "aggregator.layer0.self", &n1, &n1, 2);
    let q2 = add(&q1, &sa);
    let n2 = ln(&q2, "aggregator.layer0.norm_ffn");
    let hid: Vec<Vec<f64>> = linear(
        &n2,
        &p(&model, "aggregator.layer0.ffn.up.weight"),
        &p(&model, "aggregator.layer0.ffn.up.bias"),
    )
    .into_iter()
    .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
    .collect();
    let f = linear(
        &hid,
        &p(&model, "aggregator.layer0.ffn.down.weight"),
        &p(&model, "aggregator.layer0.ffn.down.bias"),
    );
    let q3 = add(&q2, &f);
    let want = ln(&q3, "aggregator.norm");

    let got = g.value(out.queries);
    assert_eq!(got.shape(), &[2, 8]);
    for i in 0..2 {
        for c in 0..8 {
            assert!((got.at(&[i, c]) - want[i][c]).abs() < 1e-5);
        }
    }
    let w = g.value(out.cross_attention);
    assert_eq!(w.shape(), &[2, 2, 3]);
    for (a, b) in w.data().iter().zip(&cross_w) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn heads_at_zero_give_one_half() {
    let mut model = Hat::<f64>::new(small_config((32, 32), 8, 2)).unwrap();
    for name in [
        "head.task_mlp2.weight",
        "head.task_mlp2.bias",
        "head.termination.weight",
        "head.termination.bias",
    ] {
        let id = model.params.id_of(name).unwrap();
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let set = model
        .predict_all(&random_image(32, 32, 8), &fixations_from_xy(&[(16.0, 16.0)]))
        .unwrap();
    assert!(set.heatmaps.data().iter().all(|&v| v == 0.5));
    assert_eq!(set.tau, vec![0.5, 0.5]);
}

#[test]
fn dot_product_head_by_hand() {
    let mut model = Hat::<f64>::new(small_config((32, 32), 4, 1)).unwrap();
    let e = [0.5, -1.0, 2.0, 0.25];
    let w2 = model.params.id_of("head.task_mlp2.weight").unwrap();
    model.params.get_mut(w2).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b2 = model.params.id_of("head.task_mlp2.bias").unwrap();
    model.params.get_mut(b2).data_mut().copy_from_slice(&e);
    // P4 on a 2×2 grid, channel-major [C × 4].
    let cells = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 1.0, 0.0],
        [0.2, -0.4, 0.6, 1.0],
        [-1.0, -1.0, 0.0, 2.0],
    ];
    let mut flat = vec![0.0; 16];
    for (cell, v) in cells.iter().enumerate() {
        for c in 0..4 {
            flat[c * 4 + cell] = v[c];
        }
    }
    let mut g = Graph::<f64>::inference();
    let q = g.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
    let p4 = g.constant(Tensor::new(vec![4, 4], flat).unwrap());
    let (heat, _) = model.predict(&mut g, q, p4).unwrap();
    // Hand dot products: 0.5, -1+2 = 1, 0.1+0.4+1.2+0.25 = 1.95, -0.5+1+0.5 = 1.0
    let want = [0.5f64, 1.0, 1.95, 1.0].map(|z| 1.0 / (1.0 + (-z).exp()));
    for (a, b) in g.value(heat).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_contracts_at_full_canvas() {
    let model = Hat::<f32>::new(ModelConfig::new((320, 512), 32, 1)).unwrap();
    let img = random_image(320, 512, 6);
    let fix = fixations_from_xy(&[(256.0, 160.0), (100.5, 40.25)]);
    let pred = model.forward(&img, &fix, 0).unwrap();
    assert_eq!(pred.heatmap.shape(), &[320, 512]);
    assert!(pred.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(pred.tau > 0.0 && pred.tau < 1.0);
    assert_eq!(pred.cross_attention.shape(), &[4, 1, 162]);
    let ctx = model.image_context(&img).unwrap();
    let reused = model.forward_with(&ctx, &fix, 0).unwrap();
    assert!(pred.heatmap.max_abs_diff(&reused.heatmap) <= 1e-6);
    assert!((pred.tau - reused.tau).abs() <= 1e-6);
    let again = model.forward(&img, &fix, 0).unwrap();
    assert_eq!(again.heatmap, pred.heatmap);
}

#[test]
fn every_attention_row_sums_to_one() {
    let model = Hat::<f32>::new(small_config((64, 64), 16, 3)).unwrap();
    let ctx = model.image_context(&random_image(64, 64, 2)).unwrap();
    let mut g = Graph::<f32>::inference();
    let feats = hat::model::ImageFeatures {
        peripheral: g.constant(ctx.peripheral.clone()),
        p4_flat: g.constant(ctx.p4_flat.clone()),
        p4_tokens: g.constant(ctx.p4_tokens.clone()),
    };
    let out = model
        .step(&mut g, &feats, &fixations_from_xy(&[(32.0, 32.0), (5.0, 60.0)]))
        .unwrap();
    let mut maps = out.encoder_attention.clone();
    maps.extend(out.aggregate.attention.iter().copied());
    assert_eq!(maps.len(), 3 + 12);
    for m in maps {
        let t = g.value(m);
        let n = *t.shape().last().unwrap();
        for row in t.data().chunks(n) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn swapping_task_queries_swaps_outputs() {
    let mut model = Hat::<f64>::new(small_config((32, 32), 8, 2)).unwrap();
    let img = random_image(32, 32, 1);
    let fix = fixations_from_xy(&[(10.0, 20.0)]);
    let before = model.predict_all(&img, &fix).unwrap();
    let q = model.queries_param();
    let data = model.params.get_mut(q).data_mut();
    for c in 0..8 {
        data.swap(c, 8 + c);
    }
    let after = model.predict_all(&img, &fix).unwrap();
    assert!((before.tau[0] - after.tau[1]).abs() < 1e-12);
    assert!((before.tau[1] - after.tau[0]).abs() < 1e-12);
    let plane = 32 * 32;
    for k in 0..plane {
        assert!((before.heatmaps.data()[k] - after.heatmaps.data()[plane + k]).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = small_config((32, 32), 8, 2);
    cfg.seed = 17;
    let model = Hat::<f32>::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hatc");
    let tasks = vec!["red".to_string(), "blue".to_string()];
    save_checkpoint(&model, &tasks, &path).unwrap();
    let (back, t2) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(t2, tasks);
    assert_eq!(back.config(), model.config());
    for id in model.params.ids() {
        assert_eq!(back.params.get(id), model.params.get(id));
    }
    assert!(save_checkpoint(&model, &tasks[..1], &path).is_err());

    // A tensor of the wrong shape is rejected on load.
    let mut other = cfg.clone();
    other.ffn_hidden = 12;
    let wrong = Hat::<f32>::new(other).unwrap();
    let p2 = dir.path().join("wrong.hatc");
    save_checkpoint(&wrong, &tasks, &p2).unwrap();
    let mut bytes = std::fs::read(&p2).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"ffn_hidden\":12").unwrap();
    bytes[at + 13..at + 15].copy_from_slice(b"32");
    std::fs::write(&p2, bytes).unwrap();
    assert!(load_checkpoint::<f32>(&p2).is_err());
}

#[test]
fn frozen_encoder_receives_no_gradient() {
    let mut cfg = small_config((32, 32), 8, 1);
    cfg.freeze_encoder = true;
    let model = Hat::<f32>::new(cfg).unwrap();
    let mut g = Graph::<f32>::new();
    let x = g.constant(model.image_tensor(&random_image(32, 32, 3)).unwrap());
    let pv = model.pyramid_graph(&mut g, x).unwrap();
    let feats = model.image_features(&mut g, pv.p1, pv.p4).unwrap();
    let out = model.step(&mut g, &feats, &fixations_from_xy(&[(16.0, 16.0)])).unwrap();
    let loss = g.sum(out.heat_low);
    let grads = g.backward(loss).unwrap();
    for id in model.params.ids() {
        let name = model.params.name(id);
        if name.starts_with("pixel_encoder.") {
            assert!(grads.param(id).is_none(), "{name}");
        }
    }
    let q = model.queries_param();
    assert!(grads.param(q).is_some());
}

fn probe_model() -> (Hat<f64>, ImageRaster, Vec<Fixation>) {
    let mut cfg = ModelConfig::new((32, 32), 8, 2);
    cfg.mlp_hidden = 16;
    cfg.ffn_hidden = 16;
    cfg.seed = 11;
    let model = Hat::<f64>::new(cfg).unwrap();
    (
        model,
        random_image(32, 32, 12),
        fixations_from_xy(&[(16.0, 16.0), (5.3, 27.9)]),
    )
}

#[test]
fn end_to_end_gradients_f64() {
    let (model, img, fix) = probe_model();
    let probe = ModelProbe::new(&model, &img, &fix, 1, 4).unwrap();
    let report = grad_check_sampled(&probe, &probe.inputs(), 1e-5, 24).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "{report:?} at {}",
        probe.input_name(report.worst_input)
    );
}

#[test]
fn end_to_end_gradients_f32() {
    let (model, img, fix) = probe_model();
    let probe = ModelProbe::new(&model, &img, &fix, 0, 5).unwrap();
    let inputs: Vec<Tensor<f32>> = probe.inputs().iter().map(Tensor::cast).collect();
    let report = grad_check_f32_sampled(&probe, &inputs, 1e-5, 24).unwrap();
    assert!(
        report.max_rel_error < 1e-3,
        "{report:?} at {}",
        probe.input_name(report.worst_input)
    );
}
