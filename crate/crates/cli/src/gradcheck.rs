//! Gradient checks over every differentiable op family and a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hat::dataio::{fixations_from_xy, ImageRaster};
use hat::model::{Hat, ModelConfig, ModelProbe};
use hat::numerics::nn::MultiHeadAttention;
use hat::numerics::{
    grad_check, grad_check_f32, grad_check_f32_sampled, grad_check_sampled, GradCheckReport, Graph, Objective, ParamId,
    ParamStore, Scalar, Tensor, Var,
};
use hat::Result;

/// Maximum relative error for any 32-bit check.
pub const F32_THRESHOLD: f64 = 1e-3;
/// Maximum relative error for 64-bit checks of single op families.
pub const F64_THRESHOLD: f64 = 1e-6;
/// Maximum relative error for the 64-bit toy-model check. The network has
/// ReLU kinks, so central differences are only first-order accurate there.
pub const F64_MODEL_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Clone, Debug, Serialize)]
pub struct FamilyResult {
    pub family: String,
    pub precision: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub checked: usize,
    pub worst_input: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub passed: bool,
    pub worst_family: String,
    pub worst_precision: String,
    pub worst_rel_error: f64,
    pub results: Vec<FamilyResult>,
}

enum Family {
    SumOfSquares,
    Elementwise,
    Matmul,
    Conv,
    Upsample,
    LayerNorm,
    Softmax,
    Structural,
    Attention(ParamStore<f64>, MultiHeadAttention, Vec<ParamId>),
    Focal(Tensor<f64>),
    Bce,
}

impl Family {
    fn name(&self) -> &'static str {
        match self {
            Family::SumOfSquares => "sum_of_squares",
            Family::Elementwise => "elementwise",
            Family::Matmul => "matmul",
            Family::Conv => "conv2d",
            Family::Upsample => "upsample",
            Family::LayerNorm => "layer_norm",
            Family::Softmax => "softmax",
            Family::Structural => "reshape_slice_concat_gather",
            Family::Attention(..) => "multi_head_attention",
            Family::Focal(_) => "focal_loss",
            Family::Bce => "weighted_bce",
        }
    }
}

impl Objective for Family {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        match self {
            Family::SumOfSquares => {
                let sq = g.mul(x[0], x[0])?;
                Ok(g.sum(sq))
            }
            Family::Elementwise => {
                let a = g.sigmoid(x[0]);
                let b = g.exp(x[1]);
                let c = g.mul(a, b)?;
                let d = g.sub(c, x[0])?;
                let e = g.relu(d);
                let s = g.scale(e, 0.5);
                let l = g.log(b);
                let t = g.add(s, l)?;
                Ok(g.mean(t))
            }
            Family::Matmul => {
                let m = g.matmul(x[0], x[1])?;
                let m = g.add_row(m, x[2])?;
                let w = g.mul(m, m)?;
                Ok(g.sum(w))
            }
            Family::Conv => {
                let c = g.conv2d(x[0], x[1], 2, 1)?;
                let c = g.add_channel(c, x[2])?;
                let sq = g.mul(c, c)?;
                Ok(g.sum(sq))
            }
            Family::Upsample => {
                let u = g.upsample(x[0], 2)?;
                let w = g.mul(u, x[1])?;
                Ok(g.sum(w))
            }
            Family::LayerNorm => {
                let n = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
                let w = g.mul(n, x[3])?;
                Ok(g.sum(w))
            }
            Family::Softmax => {
                let p = g.softmax_rows(x[0])?;
                let l = g.log(p);
                let w = g.mul(l, x[1])?;
                Ok(g.sum(w))
            }
            Family::Structural => {
                let r = g.reshape(x[0], &[6, 4])?;
                let t = g.transpose(r)?;
                let top = g.slice_rows(t, 0, 2)?;
                let bottom = g.slice_rows(t, 2, 2)?;
                let left = g.slice_cols(bottom, 0, 3)?;
                let right = g.slice_cols(bottom, 3, 3)?;
                let lr = g.concat_cols(&[right, left])?;
                let all = g.concat_rows(&[lr, top])?;
                let picked = g.gather_rows(all, &[3, 0, 3, 1])?;
                let w = g.mul(picked, x[1])?;
                Ok(g.sum(w))
            }
            Family::Attention(store, mha, ids) => {
                let store: ParamStore<T> = store.cast();
                for (&id, &v) in ids.iter().zip(&x[3..]) {
                    g.bind_param(id, v);
                }
                let (out, weights) = mha.forward(g, &store, x[0], x[1], x[2])?;
                let sq = g.mul(out, out)?;
                let a = g.sum(sq);
                let w = g.mul(weights, weights)?;
                let b = g.sum(w);
                g.add(a, b)
            }
            Family::Focal(y) => {
                let p = g.sigmoid(x[0]);
                g.focal_loss(p, &y.cast(), 2.0, 4.0)
            }
            Family::Bce => {
                let p = g.sigmoid(x[0]);
                let a = g.bce(p, 1.0, 3.0)?;
                let b = g.bce(p, 0.0, 3.0)?;
                g.add(a, b)
            }
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn families(seed: u64) -> Vec<(Family, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        (Family::SumOfSquares, vec![random(&[4, 5], r)]),
        (Family::Elementwise, vec![random(&[3, 4], r), random(&[3, 4], r)]),
        (
            Family::Matmul,
            vec![random(&[5, 7], r), random(&[7, 3], r), random(&[3], r)],
        ),
        (
            Family::Conv,
            vec![random(&[2, 6, 5], r), random(&[3, 2, 3, 3], r), random(&[3], r)],
        ),
        (Family::Upsample, vec![random(&[2, 3, 3], r), random(&[2, 6, 6], r)]),
        (
            Family::LayerNorm,
            vec![random(&[3, 6], r), random(&[6], r), random(&[6], r), random(&[3, 6], r)],
        ),
        (Family::Softmax, vec![random(&[3, 5], r), random(&[3, 5], r)]),
        (Family::Structural, vec![random(&[2, 3, 4], r), random(&[4, 6], r)]),
    ];

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, r).expect("valid attention width");
    let ids: Vec<ParamId> = store.ids().collect();
    let mut inputs = vec![random(&[2, 4], r), random(&[3, 4], r), random(&[3, 4], r)];
    for &id in &ids {
        let shape = store.get(id).shape().to_vec();
        inputs.push(random(&shape, r));
    }
    out.push((Family::Attention(store, mha, ids), inputs));

    let mut y = Tensor::from_fn(&[4, 4], |_| r.gen_range(0.0..0.9));
    y.data_mut()[5] = 1.0;
    out.push((Family::Focal(y), vec![random(&[4, 4], r)]));
    out.push((Family::Bce, vec![random(&[1], r)]));
    out
}

fn result(family: &str, precision: &str, threshold: f64, r: &GradCheckReport, input: String) -> FamilyResult {
    FamilyResult {
        family: family.to_string(),
        precision: precision.to_string(),
        max_rel_error: r.max_rel_error,
        threshold,
        passed: r.max_rel_error < threshold,
        checked: r.checked,
        worst_input: input,
        worst_index: r.worst_index,
        analytic: r.analytic,
        numeric: r.numeric,
    }
}

/// Options for [`run_gradcheck`].
#[derive(Clone, Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct GradCheckOptions {
    pub precision: Precision,
    pub seed: u64,
    /// Central-difference step for the 64-bit checks.
    pub eps_f64: f64,
    /// Central-difference step for the 32-bit checks.
    pub eps_f32: f64,
    /// Elements checked per toy-model input tensor.
    pub model_samples: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            precision: Precision::Both,
            seed: 0,
            eps_f64: 1e-5,
            eps_f32: 1e-5,
            model_samples: 24,
        }
    }
}

/// The toy model: a 32×32 input with C = 8 and two fixations.
fn toy_probe(seed: u64) -> Result<ModelProbe> {
    let mut cfg = ModelConfig::new((32, 32), 8, 2);
    cfg.mlp_hidden = 16;
    cfg.ffn_hidden = 16;
    cfg.seed = seed;
    let model = Hat::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let values = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = ImageRaster::new(32, 32, 3, values)?;
    let fix = fixations_from_xy(&[(16.0, 16.0), (5.3, 27.9)]);
    ModelProbe::new(&model, &image, &fix, 1, seed)
}

pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckSummary> {
    let do32 = opts.precision != Precision::F64;
    let do64 = opts.precision != Precision::F32;
    let mut results = Vec::new();
    for (family, inputs) in families(opts.seed) {
        let name = family.name();
        if do64 {
            let r = grad_check(&family, &inputs, opts.eps_f64)?;
            results.push(result(
                name,
                "f64",
                F64_THRESHOLD,
                &r,
                format!("input {}", r.worst_input),
            ));
        }
        if do32 {
            let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
            let r = grad_check_f32(&family, &inputs32, opts.eps_f32)?;
            results.push(result(
                name,
                "f32",
                F32_THRESHOLD,
                &r,
                format!("input {}", r.worst_input),
            ));
        }
    }
    let probe = toy_probe(opts.seed)?;
    let inputs = probe.inputs();
    if do64 {
        let r = grad_check_sampled(&probe, &inputs, opts.eps_f64, opts.model_samples)?;
        results.push(result(
            "toy_model",
            "f64",
            F64_MODEL_THRESHOLD,
            &r,
            probe.input_name(r.worst_input),
        ));
    }
    if do32 {
        let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
        let r = grad_check_f32_sampled(&probe, &inputs32, opts.eps_f32, opts.model_samples)?;
        results.push(result(
            "toy_model",
            "f32",
            F32_THRESHOLD,
            &r,
            probe.input_name(r.worst_input),
        ));
    }
    let worst = results
        .iter()
        .max_by(|a, b| (a.max_rel_error / a.threshold).total_cmp(&(b.max_rel_error / b.threshold)))
        .expect("at least one check");
    Ok(GradCheckSummary {
        passed: results.iter().all(|r| r.passed),
        worst_family: worst.family.clone(),
        worst_precision: worst.precision.clone(),
        worst_rel_error: worst.max_rel_error,
        results,
    })
}
