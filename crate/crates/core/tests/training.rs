use std::collections::BTreeMap;
use std::path::PathBuf;

use hat::dataio::synth::{synth_dataset, SynthParams};
use hat::dataio::{fixations_from_xy, Condition, DatasetManifest, Fixation, ScanpathRecord};
use hat::model::{Hat, ModelConfig};
use hat::numerics::{grad_check, Graph, Objective, ParamStore, Scalar, Tensor, Var};
use hat::training::{
    compute_omega, example_loss, expand_scanpaths, fit, focal_loss, make_gt_heatmap, termination_loss, total_loss,
    AdamW, AdamWConfig, LossParams, TrainConfig, TrainingExample, TrainingSet,
};
use hat::Error;
use proptest::prelude::*;

fn record(points: &[(f64, f64)], terminated: bool) -> ScanpathRecord {
    ScanpathRecord {
        image: "img".into(),
        task: "red".into(),
        subject: 0,
        condition: Condition::TP,
        fixations: fixations_from_xy(points),
        terminated,
    }
}

fn manifest_of(records: Vec<ScanpathRecord>) -> DatasetManifest {
    DatasetManifest {
        root: PathBuf::new(),
        images: vec![],
        records,
        tasks: vec!["red".into()],
        pixels_per_degree: 2.0,
        label_names: BTreeMap::new(),
        generator: None,
    }
}

fn example(next: Option<Fixation>) -> TrainingExample {
    TrainingExample {
        image: "img".into(),
        task: 0,
        subject: 0,
        history: vec![Fixation::new(1.0, 1.0, 0)],
        next,
    }
}

#[test]
fn gt_heatmap_peak_and_falloff() {
    let f = Fixation::new(10.4, 7.6, 1);
    let y: Tensor<f64> = make_gt_heatmap(&f, 20, 30, 3.0);
    assert_eq!(y.shape(), &[20, 30]);
    assert_eq!(y.at(&[8, 10]), 1.0);
    assert!((y.at(&[8, 13]) - (-0.5f64).exp()).abs() < 1e-12);
    assert!((y.at(&[11, 10]) - (-0.5f64).exp()).abs() < 1e-12);
    assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(y.data().iter().filter(|&&v| v == 1.0).count(), 1);
}

#[test]
fn gt_heatmap_sum_matches_direct_summation() {
    let (h, w, s) = (24usize, 40usize, 2.5);
    let f = Fixation::new(3.2, 20.9, 0);
    let y: Tensor<f64> = make_gt_heatmap(&f, h, w, s);
    let mut direct = 0.0;
    for row in 0..h {
        for col in 0..w {
            let dx = col as f64 - 3.0;
            let dy = row as f64 - 21.0;
            direct += (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
        }
    }
    assert!((y.sum() - direct).abs() < 1e-10);
}

#[test]
fn expand_counts() {
    let only_start = manifest_of(vec![record(&[(5.0, 5.0)], true)]);
    let ex = expand_scanpaths(&only_start).unwrap();
    assert_eq!(ex.len(), 1);
    assert!(ex[0].is_terminal());
    assert_eq!(ex[0].history.len(), 1);

    let pts = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (4.0, 4.0)];
    let ex = expand_scanpaths(&manifest_of(vec![record(&pts, true)])).unwrap();
    assert_eq!(ex.len(), 4);
    for (i, e) in ex[..3].iter().enumerate() {
        assert_eq!(e.history.len(), i + 1);
        assert_eq!(e.next.unwrap().x, pts[i + 1].0);
        assert_eq!(e.tau(), 0.0);
    }
    assert!(ex[3].is_terminal());
    assert_eq!(ex[3].history.len(), 4);
    assert_eq!(ex[3].tau(), 1.0);

    let ex = expand_scanpaths(&manifest_of(vec![record(&pts, false)])).unwrap();
    assert_eq!(ex.len(), 3);
    assert!(ex.iter().all(|e| !e.is_terminal()));
}

#[test]
fn omega_ratios() {
    let mut ex: Vec<_> = (0..30).map(|_| example(Some(Fixation::new(2.0, 2.0, 1)))).collect();
    ex.extend((0..10).map(|_| example(None)));
    assert_eq!(compute_omega(&ex).unwrap(), 3.0);
    let eq = vec![example(None), example(Some(Fixation::new(0.0, 0.0, 1)))];
    assert_eq!(compute_omega(&eq).unwrap(), 1.0);
    let none = vec![example(Some(Fixation::new(0.0, 0.0, 1)))];
    assert!(matches!(compute_omega(&none), Err(Error::Config(_))));
}

#[test]
fn synthetic_recounts() {
    for cond in [Condition::TP, Condition::TA, Condition::FV] {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&SynthParams::new(11, 6, cond, (64, 64)), dir.path()).unwrap();
        let ex = expand_scanpaths(&m).unwrap();
        let mut total = 0;
        let (mut neg, mut pos) = (0usize, 0usize);
        for r in &m.records {
            let n = r.fixations.len() - 1;
            total += n + r.terminated as usize;
            neg += n;
            pos += r.terminated as usize;
        }
        assert_eq!(ex.len(), total);
        assert_eq!(compute_omega(&ex).unwrap(), neg as f64 / pos as f64);
    }
}

#[test]
fn focal_loss_hand_cases() {
    let eps = 1e-7;
    let ones = Tensor::<f64>::full(&[4, 4], 1.0);
    let near = Tensor::<f64>::full(&[4, 4], 1.0 - eps);
    assert!(focal_loss(&near, &ones, 2.0, 4.0).unwrap() < 1e-5);

    let f = Fixation::new(0.0, 0.0, 0);
    let y: Tensor<f64> = make_gt_heatmap(&f, 2, 2, 1.0);
    let p = Tensor::<f64>::full(&[2, 2], 0.5);
    let l05 = 0.5f64.ln();
    let mut expected = 0.25 * l05;
    for k in 1..4 {
        expected += (1.0 - y.data()[k]).powi(4) * 0.25 * l05;
    }
    expected *= -0.25;
    assert!((focal_loss(&p, &y, 2.0, 4.0).unwrap() - expected).abs() < 1e-12);
}

struct SigmoidFocal(Tensor<f64>);

impl Objective for SigmoidFocal {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> hat::Result<Var> {
        let p = g.sigmoid(inputs[0]);
        g.focal_loss(p, &self.0.cast(), 2.0, 4.0)
    }
}

#[test]
fn focal_loss_gradient_check() {
    let y: Tensor<f64> = make_gt_heatmap(&Fixation::new(3.0, 2.0, 0), 5, 6, 1.5);
    let logits = Tensor::from_fn(&[5, 6], |k| ((k * 37 % 11) as f64 - 5.0) * 0.4);
    let report = grad_check(&SigmoidFocal(y), &[logits], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn termination_loss_hand_cases() {
    assert!((termination_loss(0.5, 0.0, 1.0).unwrap() - 2f64.ln()).abs() < 1e-9);
    assert!(termination_loss(1.0 - 1e-12, 1.0, 1.0).unwrap() < 1e-9);
    assert!((termination_loss(1.0, 1.0, 1.0).unwrap() + (1.0 - 1e-7f64).ln()).abs() < 1e-15);
    assert!((termination_loss(0.5, 1.0, 3.0).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-9);
}

#[test]
fn loss_params_validation() {
    assert!(LossParams::new(1.5, 2.0).validate().is_ok());
    assert!(LossParams::new(0.0, 2.0).validate().is_err());
    assert!(LossParams::new(1.0, 0.0).validate().is_err());
    let mut lp = LossParams::new(1.0, 1.0);
    lp.alpha = -1.0;
    assert!(lp.validate().is_err());
}

fn tiny_model(n_tasks: usize) -> Hat<f64> {
    let mut cfg = ModelConfig::new((32, 32), 8, n_tasks);
    cfg.mlp_hidden = 16;
    cfg.ffn_hidden = 16;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 2;
    cfg.seed = 5;
    Hat::new(cfg).unwrap()
}

fn tiny_image() -> hat::dataio::ImageRaster {
    let values = (0..3 * 32 * 32).map(|k| ((k * 7919) % 101) as f32 / 100.0).collect();
    hat::dataio::ImageRaster::new(32, 32, 3, values).unwrap()
}

#[test]
fn total_loss_components() {
    let model = tiny_model(2);
    let image = tiny_image();
    let lp = LossParams::new(2.5, 2.0);
    let history = fixations_from_xy(&[(16.0, 16.0), (5.0, 9.0)]);
    let term = TrainingExample {
        image: "img".into(),
        task: 1,
        subject: 0,
        history: history.clone(),
        next: None,
    };
    let c = total_loss(&model, &image, &term, &lp).unwrap();
    assert_eq!(c.fix, 0.0);
    assert_eq!(c.total, c.term);

    let next = Fixation::new(20.0, 25.0, 2);
    let ex = TrainingExample {
        next: Some(next),
        ..term
    };
    let c = total_loss(&model, &image, &ex, &lp).unwrap();
    let pred = model.forward(&image, &history, 1).unwrap();
    let y: Tensor<f64> = make_gt_heatmap(&next, 32, 32, 2.0);
    let fix = focal_loss(&pred.heatmap, &y, 2.0, 4.0).unwrap();
    let tl = termination_loss(pred.tau, 0.0, 2.5).unwrap();
    assert!((c.fix - fix).abs() < 1e-12);
    assert!((c.term - tl).abs() < 1e-12);
    assert!((c.total - (fix + tl)).abs() < 1e-12);
}

#[test]
fn non_target_outputs_receive_no_gradient() {
    let model = tiny_model(3);
    let image = tiny_image();
    let lp = LossParams::new(1.0, 2.0);
    let ex = TrainingExample {
        image: "img".into(),
        task: 1,
        subject: 0,
        history: fixations_from_xy(&[(16.0, 16.0)]),
        next: Some(Fixation::new(8.0, 8.0, 1)),
    };
    let mut g = Graph::new();
    let x = g.constant(model.image_tensor(&image).unwrap());
    let pv = model.pyramid_graph(&mut g, x).unwrap();
    let feats = model.image_features(&mut g, pv.p1, pv.p4).unwrap();
    let lv = example_loss(&mut g, &model, &feats, &ex, &lp).unwrap();
    let grads = g.backward(lv.total).unwrap();
    let heat = grads.get(lv.step.heat_low).unwrap();
    let tau = grads.get(lv.step.tau).unwrap();
    for t in [0, 2] {
        assert!(heat.row(t).iter().all(|&v| v == 0.0));
        assert_eq!(tau.row(t)[0], 0.0);
    }
    assert!(heat.row(1).iter().any(|&v| v != 0.0));
    assert!(tau.row(1)[0] != 0.0);
}

#[test]
fn adamw_zero_lr_is_identity() {
    let model = tiny_model(1).cast::<f32>();
    let mut params = model.params.clone();
    let cfg = AdamWConfig {
        lr: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(&params, cfg).unwrap();
    let grads: Vec<_> = params
        .ids()
        .map(|id| Some(Tensor::full(params.get(id).shape(), 0.3f32)))
        .collect();
    for _ in 0..3 {
        opt.step(&mut params, &grads).unwrap();
    }
    for id in params.ids() {
        assert_eq!(params.get(id), model.params.get(id));
    }
}

#[test]
fn adamw_matches_reference_update() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let cfg = AdamWConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut opt = AdamW::new(&store, cfg).unwrap();
    let gs = [[0.2, -0.4, 0.0], [0.1, 0.3, -0.5]];
    let mut p = [1.0, -2.0, 0.5];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for (t, g) in gs.iter().enumerate() {
        opt.step(&mut store, &[Some(Tensor::new(vec![3], g.to_vec()).unwrap())])
            .unwrap();
        let t = t as i32 + 1;
        for i in 0..3 {
            p[i] *= 1.0 - 0.1 * 0.01;
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.99f64.powi(t));
            p[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
    }
    for i in 0..3 {
        assert!((store.get(id).data()[i] - p[i]).abs() < 1e-14);
    }
    assert_eq!(opt.steps(), 2);
}

#[test]
fn adamw_skips_frozen() {
    let mut store = ParamStore::<f32>::new();
    store.add("enc.w", Tensor::full(&[2], 1.0));
    store.add("head.w", Tensor::full(&[2], 1.0));
    store.set_frozen("enc.", true);
    let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
    let g = Some(Tensor::full(&[2], 1.0f32));
    opt.step(&mut store, &[g.clone(), g]).unwrap();
    let ids: Vec<_> = store.ids().collect();
    assert_eq!(store.get(ids[0]).data(), &[1.0, 1.0]);
    assert!(store.get(ids[1]).data()[0] < 1.0);
}

fn small_run(dir: &std::path::Path, epochs: usize, lr: f64) -> hat::Result<hat::training::FitOutput> {
    let mut sp = SynthParams::new(3, 2, Condition::TP, (32, 32));
    sp.blob_radius = 3.0;
    let m = synth_dataset(&sp, dir)?;
    let mut mc = ModelConfig::new((32, 32), 8, 1);
    mc.mlp_hidden = 16;
    mc.ffn_hidden = 16;
    mc.encoder_layers = 1;
    mc.decoder_layers = 1;
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        optimizer: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    fit(&m, &mc, &cfg)
}

#[test]
fn fit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_run(dir.path(), 2, 1e-3).unwrap();
    let b = small_run(dir.path(), 2, 1e-3).unwrap();
    assert_eq!(a.log, b.log);
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    a.write_log(&pa).unwrap();
    b.write_log(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let text = std::fs::read_to_string(&pa).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "L_fix", "L_term", "L"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for rec in &a.log {
        assert!((rec.l - (rec.l_fix + rec.l_term)).abs() < 1e-12);
    }
    assert_eq!(a.epochs.len(), 2);
}

#[test]
fn fit_zero_lr_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path(), 1, 0.0).unwrap();
    let fresh: Hat<f32> = Hat::new(out.model.config().clone()).unwrap();
    for id in fresh.params.ids() {
        assert_eq!(fresh.params.get(id), out.model.params.get(id));
    }
}

#[test]
fn fit_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    match small_run(dir.path(), 5, 1e30) {
        Err(Error::Divergence { epoch, step, .. }) => assert!(epoch >= 1 && step >= 2),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn training_loss_decreases_over_thirty_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&SynthParams::new(7, 8, Condition::TP, (64, 64)), dir.path()).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        optimizer: AdamWConfig {
            lr: 3e-4,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = fit(&m, &ModelConfig::new((64, 64), 16, 1), &cfg).unwrap();
    let (first, last) = (out.epochs[0].l, out.epochs[29].l);
    assert!(last < first, "epoch 1 {first}, epoch 30 {last}");
}

#[test]
fn training_set_rescales_to_canvas() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&SynthParams::new(2, 2, Condition::TP, (64, 64)), dir.path()).unwrap();
    let set = TrainingSet::prepare(&m, (32, 32)).unwrap();
    assert_eq!(set.sigma_px, m.pixels_per_degree * 0.5);
    let raw = expand_scanpaths(&m).unwrap();
    assert_eq!(raw.len(), set.examples.len());
    for (a, b) in raw.iter().zip(&set.examples) {
        assert_eq!(b.history[0].x, a.history[0].x * 0.5);
    }
    assert!(set.images.values().all(|im| (im.height, im.width) == (32, 32)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn focal_loss_nonnegative(p in prop::collection::vec(0.0f64..1.0, 9), cx in 0usize..3, cy in 0usize..3) {
        let y: Tensor<f64> = make_gt_heatmap(&Fixation::new(cx as f64, cy as f64, 0), 3, 3, 0.8);
        let pred = Tensor::new(vec![3, 3], p).unwrap();
        prop_assert!(focal_loss(&pred, &y, 2.0, 4.0).unwrap() >= 0.0);
    }

    #[test]
    fn focal_loss_monotone_at_peak(base in prop::collection::vec(0.01f64..0.99, 9), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let y: Tensor<f64> = make_gt_heatmap(&Fixation::new(1.0, 1.0, 0), 3, 3, 0.8);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let mut p1 = base.clone();
        p1[4] = lo;
        let mut p2 = base;
        p2[4] = hi;
        let l1 = focal_loss(&Tensor::new(vec![3, 3], p1).unwrap(), &y, 2.0, 4.0).unwrap();
        let l2 = focal_loss(&Tensor::new(vec![3, 3], p2).unwrap(), &y, 2.0, 4.0).unwrap();
        prop_assert!(l2 <= l1 + 1e-15);
    }

    #[test]
    fn termination_loss_matches_formula(p in 0.001f64..0.999, omega in 0.1f64..10.0, pos in any::<bool>()) {
        let t = if pos { 1.0 } else { 0.0 };
        let expected = -omega * t * p.ln() - (1.0 - t) * (1.0 - p).ln();
        prop_assert!((termination_loss(p, t, omega).unwrap() - expected).abs() < 1e-12);
    }
}
