//! Raw loops shared by the graph ops. No shape validation happens here.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + j] += acc;
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel tap `kk`, so
    /// that `o * stride + kk - pad` lands inside `[0, size)`.
    #[inline]
    fn valid_range(&self, kk: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // o*s + off >= 0  =>  o >= ceil(-off / s)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // o*s + off <= size - 1  =>  o <= floor((size - 1 - off) / s)
        let hi_num = size as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = (hi + 1).min(out as isize);
        let lo = lo.min(out as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.h_out * g.w_out];
    let k = g.k;
    for co in 0..g.c_out {
        let out_c = &mut out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let x_c = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
                for kx in 0..k {
                    let wv = wt[((co * g.c_in + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                        let o_row = &mut out_c[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            o_row[ox] += wv * x_row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and weight gradients of a convolution.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    g: &ConvGeom,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let k = g.k;
    let mut gx = gx;
    let mut gw = gw;
    for co in 0..g.c_out {
        let gy_c = &gy[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let x_off = ci * g.h * g.w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
                for kx in 0..k {
                    let widx = ((co * g.c_in + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = x_off + iy * g.w;
                        let gy_row = &gy_c[oy * g.w_out..(oy + 1) * g.w_out];
                        if let Some(gx) = gx.as_deref_mut() {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                gx[row + ix] += wv * gy_row[ox];
                            }
                        }
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            acc += gy_row[ox] * x[row + ix];
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// One axis of a bilinear resampling: for every output index, the two source
/// indices and the weight of the second.
///
/// Uses half-pixel centers: output index `o` samples source coordinate
/// `(o + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`. With equal sizes
/// every output index maps exactly onto its source index.
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            if i0 >= n_in - 1 {
                (n_in - 1, n_in - 1, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub(crate) fn resample_forward<T: Scalar>(
    x: &[T],
    c: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resample_backward<T: Scalar>(
    gy: &[T],
    gx: &mut [T],
    c: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for ch in 0..c {
        let g_out = &gy[ch * ho * wo..(ch + 1) * ho * wo];
        let g_in = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = g_out[oy * wo + ox];
                g_in[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                g_in[y0 * w + x1] += g * (T::one() - fy) * fx;
                g_in[y1 * w + x0] += g * fy * (T::one() - fx);
                g_in[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}
