//! Parameterized layers built from graph ops.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x · W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_ones(format!("{name}.gain"), &[dim]),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Two-layer perceptron with a rectifier between the layers.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Scaled dot-product attention over `heads` independent subspaces of the
/// model width, with learned input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// Returns `(out[n_q×C], weights[heads×n_q×n_k])`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        check_heads(self.dim, self.heads)?;
        let (n_q, cq) = g.value(q).dims2("multi_head_attention")?;
        let (n_k, ck) = g.value(k).dims2("multi_head_attention")?;
        let (n_v, cv) = g.value(v).dims2("multi_head_attention")?;
        if cq != self.dim || ck != self.dim || cv != self.dim || n_k != n_v {
            return Err(Error::dim(
                "multi_head_attention",
                format!("q [{n_q}x{cq}], k [{n_k}x{ck}], v [{n_v}x{cv}], width {}", self.dim),
            ));
        }
        let qp = self.query.forward(g, store, q)?;
        let kp = self.key.forward(g, store, k)?;
        let vp = self.value.forward(g, store, v)?;
        let d = self.dim / self.heads;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut head_out = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(qp, h * d, d)?;
            let kh = g.slice_cols(kp, h * d, d)?;
            let vh = g.slice_cols(vp, h * d, d)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt_d);
            let attn = g.softmax_rows(scores)?;
            head_out.push(g.matmul(attn, vh)?);
            head_weights.push(attn);
        }
        let merged = g.concat_cols(&head_out)?;
        let out = self.out.forward(g, store, merged)?;
        let stacked = g.concat_rows(&head_weights)?;
        let weights = g.reshape(stacked, &[self.heads, n_q, n_k])?;
        Ok((out, weights))
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "model width {dim} is not divisible by {heads} attention heads"
        )));
    }
    Ok(())
}

/// Convolution weight `[C_out×C_in×k×k]` and per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                c_in * kernel * kernel,
                rng,
            ),
            bias: store.add_zeros(format!("{name}.bias"), &[c_out]),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.add_channel(y, b)
    }
}
