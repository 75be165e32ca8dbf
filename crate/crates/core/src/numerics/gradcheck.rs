//! Central-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Absolute floor in the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// Scale-relative floor: components smaller than this fraction of the
/// largest gradient in the check are judged by absolute error against it.
pub const SCALE_FLOOR: f64 = 1e-4;

/// A scalar-valued function of tensor inputs that can be evaluated at any
/// precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input tensor and element index of the worst disagreement.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Denominator floor used: `max(1e-8, 1e-4 · largest |gradient|)`.
    pub floor: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff gradients with central differences, both at precision
/// `T`. The step for element `x` is `eps * max(1, |x|)`.
pub fn grad_check<T: Scalar, F: Objective>(f: &F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport> {
    check::<T, T, F>(f, inputs, eps, None)
}

/// Compares 32-bit autodiff gradients with central differences evaluated in
/// 64-bit at the same input values, so the oracle's own roundoff does not
/// mask or fake a 32-bit backward error.
pub fn grad_check_f32<F: Objective>(f: &F, inputs: &[Tensor<f32>], eps: f64) -> Result<GradCheckReport> {
    check::<f32, f64, F>(f, inputs, eps, None)
}

/// [`grad_check`] on at most `per_input` evenly spaced elements of each input.
pub fn grad_check_sampled<T: Scalar, F: Objective>(
    f: &F,
    inputs: &[Tensor<T>],
    eps: f64,
    per_input: usize,
) -> Result<GradCheckReport> {
    check::<T, T, F>(f, inputs, eps, Some(per_input))
}

/// [`grad_check_f32`] on at most `per_input` evenly spaced elements of each input.
pub fn grad_check_f32_sampled<F: Objective>(
    f: &F,
    inputs: &[Tensor<f32>],
    eps: f64,
    per_input: usize,
) -> Result<GradCheckReport> {
    check::<f32, f64, F>(f, inputs, eps, Some(per_input))
}

fn sample_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < numel => (0..m).map(|s| s * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

fn check<A: Scalar, O: Scalar, F: Objective>(
    f: &F,
    inputs: &[Tensor<A>],
    eps: f64,
    per_input: Option<usize>,
) -> Result<GradCheckReport> {
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::Argument(format!("grad_check step {eps} must be positive")));
    }
    let analytic = autodiff(f, inputs)?;
    let oracle_inputs: Vec<Tensor<O>> = inputs.iter().map(Tensor::cast).collect();
    let mut pairs = Vec::new();
    for (ti, t) in oracle_inputs.iter().enumerate() {
        for j in sample_indices(t.numel(), per_input) {
            let x = t.data()[j].as_f64();
            let h = eps * x.abs().max(1.0);
            let plus = eval_perturbed(f, &oracle_inputs, ti, j, x + h)?;
            let minus = eval_perturbed(f, &oracle_inputs, ti, j, x - h)?;
            pairs.push((ti, j, analytic[ti].data()[j].as_f64(), (plus - minus) / (2.0 * h)));
        }
    }
    let scale = pairs.iter().map(|p| p.2.abs().max(p.3.abs())).fold(0.0, f64::max);
    let floor = REL_ERROR_FLOOR.max(SCALE_FLOOR * scale);
    let mut report = GradCheckReport {
        floor,
        ..Default::default()
    };
    for (ti, j, a, numeric) in pairs {
        let err = relative_error(a, numeric, floor);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_input = ti;
            report.worst_index = j;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

fn autodiff<T: Scalar, F: Objective>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f.eval(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn eval_perturbed<T: Scalar, F: Objective>(
    f: &F,
    inputs: &[Tensor<T>],
    which: usize,
    index: usize,
    value: f64,
) -> Result<f64> {
    let mut g = Graph::inference();
    let mut vars = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        if i == which {
            let mut p = t.clone();
            p.data_mut()[index] = T::of(value);
            vars.push(g.constant(p));
        } else {
            vars.push(g.constant(t.clone()));
        }
    }
    let out = f.eval(&mut g, &vars)?;
    let y = g.value(out).item().as_f64();
    if !y.is_finite() {
        return Err(Error::OracleFailure(format!(
            "non-finite objective {y} with input {which}[{index}] = {value}"
        )));
    }
    Ok(y)
}
