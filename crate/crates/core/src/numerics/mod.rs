//! Dense tensors, a reverse-mode autodiff tape, and the layers the model is
//! assembled from.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod nn;
mod params;
pub mod snapshot;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_f32, grad_check_f32_sampled, grad_check_sampled, GradCheckReport, Objective,
};
pub use graph::{sigmoid, Gradients, Graph, Var, PROB_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

/// Bilinear resize of a `[C×H×W]` tensor to an arbitrary size, using the
/// same half-pixel-center convention as [`Graph::upsample`].
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> crate::Result<Tensor<T>> {
    let (c, h, w) = t.dims3("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(crate::Error::Argument("resize target must be non-empty".into()));
    }
    let data = kernels::resample_forward(t.data(), c, (h, w), (out_h, out_w));
    Tensor::new(vec![c, out_h, out_w], data)
}
