use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Fixed 2-D sinusoidal position encodings for every pixel of an `H×W`
/// canvas. Row `(i, j)` is the 1-D encoding of `x = j` followed by the 1-D
/// encoding of `y = i`, each `C/2` wide with interleaved `sin, cos` pairs at
/// frequencies `10000^(-2k/(C/2))`.
///
/// Only the per-axis encodings are stored; a row is assembled on lookup.
#[derive(Clone, Debug)]
pub struct SpatialEmbeddingTable {
    height: usize,
    width: usize,
    channels: usize,
    x_enc: Vec<f64>,
    y_enc: Vec<f64>,
}

fn axis_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for k in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
            let a = pos as f64 * freq;
            out[pos * dim + 2 * k] = a.sin();
            out[pos * dim + 2 * k + 1] = a.cos();
        }
    }
    out
}

impl SpatialEmbeddingTable {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(Error::Config(format!(
                "spatial embedding width {channels} must be a positive multiple of 4"
            )));
        }
        let half = channels / 2;
        Ok(SpatialEmbeddingTable {
            height,
            width,
            channels,
            x_enc: axis_encoding(width, half),
            y_enc: axis_encoding(height, half),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// `G[i, j]`, the encoding of pixel row `i`, column `j`.
    pub fn row<T: Scalar>(&self, i: usize, j: usize) -> Vec<T> {
        debug_assert!(i < self.height && j < self.width);
        let half = self.channels / 2;
        self.x_enc[j * half..(j + 1) * half]
            .iter()
            .chain(&self.y_enc[i * half..(i + 1) * half])
            .map(|&v| T::of(v))
            .collect()
    }

    /// Encoding for cell `(i, j)` of a stride-`stride` feature map, read at
    /// `G[floor(i·S), floor(j·S)]`.
    pub fn lookup<T: Scalar>(&self, i: usize, j: usize, stride: usize) -> Vec<T> {
        self.row((i * stride).min(self.height - 1), (j * stride).min(self.width - 1))
    }

    /// Encodings of every cell of an `h×w` stride-`stride` map in row-major
    /// order, as `[h·w × C]`.
    pub fn grid<T: Scalar>(&self, h: usize, w: usize, stride: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(h * w * self.channels);
        for i in 0..h {
            for j in 0..w {
                data.extend(self.lookup::<T>(i, j, stride));
            }
        }
        Tensor::new(vec![h * w, self.channels], data).expect("grid shape")
    }

    /// The full `[H×W×C]` table.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.grid::<T>(self.height, self.width, 1)
            .reshape(&[self.height, self.width, self.channels])
            .expect("table shape")
    }
}
