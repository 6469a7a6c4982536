//! Dense tensor primitives: valid (unpadded) convolution in 2D/3D with
//! explicit forward, input-gradient and parameter-gradient passes, the
//! stride-1 transposed convolution, fully-connected layers, and the
//! pointwise activations.
//!
//! Layout conventions:
//! - feature tensors are `[batch, channels, depth, height, width]`,
//!   with `depth = 1` on pure-2D paths;
//! - convolution weights are `[c_in, c_out, k_d, k_h, k_w]`;
//! - all convolutions use depth stride 1; spatial strides are explicit.
//!
//! Convolutions lower to GEMM via im2col/col2im. Everything is generic
//! over the element type so gradient checks can run in `f64`.

use ndarray::{Array1, Array2, Array5};

use crate::error::{CpceError, Result};
use crate::scalar::Scalar;

pub type Tensor<T = f32> = Array5<T>;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

pub fn dims_of<T: Scalar>(x: &Tensor<T>) -> ConvDims {
    let s = x.shape();
    ConvDims {
        batch: s[0],
        c_in: s[1],
        depth: s[2],
        height: s[3],
        width: s[4],
    }
}

fn out_extent(n: usize, k: usize, s: usize) -> Option<usize> {
    if n < k {
        None
    } else {
        Some((n - k) / s + 1)
    }
}

fn as_slice<T: Scalar>(x: &Tensor<T>) -> &[T] {
    x.as_slice().expect("tensor must be in standard layout")
}

/// im2col: gathers every valid receptive-field window into a column.
/// Output is `[c_in*k_d*k_h*k_w, batch*od*oh*ow]`.
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kernel: (usize, usize, usize),
    stride: (usize, usize),
) -> Array2<T> {
    let d = dims_of(x);
    let (kd, kh, kw) = kernel;
    let (sh, sw) = stride;
    let od = d.depth - kd + 1;
    let oh = (d.height - kh) / sh + 1;
    let ow = (d.width - kw) / sw + 1;
    let nrows = d.c_in * kd * kh * kw;
    let ncols = d.batch * od * oh * ow;
    let xs = as_slice(x);
    let mut col = Array2::<T>::zeros((nrows, ncols));
    {
        let cs = col.as_slice_mut().unwrap();
        for r in 0..nrows {
            let pw = r % kw;
            let ph = (r / kw) % kh;
            let pd = (r / (kw * kh)) % kd;
            let ci = r / (kw * kh * kd);
            let row = &mut cs[r * ncols..(r + 1) * ncols];
            for bi in 0..d.batch {
                for z in 0..od {
                    for y in 0..oh {
                        let src =
                            (((bi * d.c_in + ci) * d.depth + z + pd) * d.height + y * sh + ph)
                                * d.width
                                + pw;
                        let dst = ((bi * od + z) * oh + y) * ow;
                        if sw == 1 {
                            row[dst..dst + ow].copy_from_slice(&xs[src..src + ow]);
                        } else {
                            for xx in 0..ow {
                                row[dst + xx] = xs[src + xx * sw];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// col2im: scatter-adds columns back into an input-shaped tensor
/// (adjoint of `im2col`).
fn col2im<T: Scalar>(
    col: &Array2<T>,
    d: ConvDims,
    kernel: (usize, usize, usize),
    stride: (usize, usize),
) -> Tensor<T> {
    let (kd, kh, kw) = kernel;
    let (sh, sw) = stride;
    let od = d.depth - kd + 1;
    let oh = (d.height - kh) / sh + 1;
    let ow = (d.width - kw) / sw + 1;
    let nrows = d.c_in * kd * kh * kw;
    let ncols = d.batch * od * oh * ow;
    let mut x = Tensor::<T>::zeros((d.batch, d.c_in, d.depth, d.height, d.width));
    {
        let xs = x.as_slice_mut().unwrap();
        let cs = col.as_slice().unwrap();
        for r in 0..nrows {
            let pw = r % kw;
            let ph = (r / kw) % kh;
            let pd = (r / (kw * kh)) % kd;
            let ci = r / (kw * kh * kd);
            let row = &cs[r * ncols..(r + 1) * ncols];
            for bi in 0..d.batch {
                for z in 0..od {
                    for y in 0..oh {
                        let dst =
                            (((bi * d.c_in + ci) * d.depth + z + pd) * d.height + y * sh + ph)
                                * d.width
                                + pw;
                        let src = ((bi * od + z) * oh + y) * ow;
                        for xx in 0..ow {
                            xs[dst + xx * sw] = xs[dst + xx * sw] + row[src + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Weight `[c_in, c_out, k_d, k_h, k_w]` as a GEMM matrix `[c_out, c_in*k]`.
fn weight_matrix<T: Scalar>(w: &Tensor<T>) -> Array2<T> {
    let s = w.shape();
    let (ci, co, kd, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = as_slice(w);
    let k = kd * kh * kw;
    let mut m = Array2::<T>::zeros((co, ci * k));
    {
        let ms = m.as_slice_mut().unwrap();
        for c_i in 0..ci {
            for c_o in 0..co {
                let src = (c_i * co + c_o) * k;
                let dst = c_o * ci * k + c_i * k;
                ms[dst..dst + k].copy_from_slice(&ws[src..src + k]);
            }
        }
    }
    m
}

/// Inverse of `weight_matrix`: `[c_out, c_in*k]` back to the 5D layout.
fn weight_from_matrix<T: Scalar>(
    m: &Array2<T>,
    ci: usize,
    kernel: (usize, usize, usize),
) -> Tensor<T> {
    let (kd, kh, kw) = kernel;
    let co = m.shape()[0];
    let k = kd * kh * kw;
    let mut w = Tensor::<T>::zeros((ci, co, kd, kh, kw));
    {
        let ws = w.as_slice_mut().unwrap();
        let ms = m.as_slice().unwrap();
        for c_i in 0..ci {
            for c_o in 0..co {
                let dst = (c_i * co + c_o) * k;
                let src = c_o * ci * k + c_i * k;
                ws[dst..dst + k].copy_from_slice(&ms[src..src + k]);
            }
        }
    }
    w
}

/// Reorders `[b, c_out, od, oh, ow]` into the GEMM layout `[c_out, b*od*oh*ow]`.
fn to_channel_major<T: Scalar>(y: &Tensor<T>) -> Array2<T> {
    let s = y.shape();
    let (b, co, n) = (s[0], s[1], s[2] * s[3] * s[4]);
    let ys = as_slice(y);
    let mut m = Array2::<T>::zeros((co, b * n));
    {
        let ms = m.as_slice_mut().unwrap();
        for bi in 0..b {
            for c_o in 0..co {
                let src = (bi * co + c_o) * n;
                let dst = c_o * b * n + bi * n;
                ms[dst..dst + n].copy_from_slice(&ys[src..src + n]);
            }
        }
    }
    m
}

fn from_channel_major<T: Scalar>(
    m: &Array2<T>,
    b: usize,
    od: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let co = m.shape()[0];
    let n = od * oh * ow;
    let mut y = Tensor::<T>::zeros((b, co, od, oh, ow));
    {
        let ys = y.as_slice_mut().unwrap();
        let ms = m.as_slice().unwrap();
        for bi in 0..b {
            for c_o in 0..co {
                let src = c_o * b * n + bi * n;
                let dst = (bi * co + c_o) * n;
                ys[dst..dst + n].copy_from_slice(&ms[src..src + n]);
            }
        }
    }
    y
}

/// Valid cross-correlation, depth stride 1, spatial stride `stride`.
pub fn conv_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Array1<T>>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let d = dims_of(x);
    let s = w.shape();
    let (ci, co, kd, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    if ci != d.c_in {
        return Err(CpceError::shape(format!(
            "conv input has {} channels, weight expects {ci}",
            d.c_in
        )));
    }
    let od = out_extent(d.depth, kd, 1)
        .ok_or_else(|| CpceError::shape(format!("depth {} < kernel depth {kd}", d.depth)))?;
    let oh = out_extent(d.height, kh, stride.0)
        .ok_or_else(|| CpceError::shape(format!("height {} < kernel {kh}", d.height)))?;
    let ow = out_extent(d.width, kw, stride.1)
        .ok_or_else(|| CpceError::shape(format!("width {} < kernel {kw}", d.width)))?;

    let col = im2col(x, (kd, kh, kw), stride);
    let wm = weight_matrix(w);
    let mut ym = wm.dot(&col);
    if let Some(bv) = bias {
        debug_assert_eq!(bv.len(), co);
        let n = col.shape()[1];
        let ys = ym.as_slice_mut().unwrap();
        for c_o in 0..co {
            let bval = bv[c_o];
            for v in &mut ys[c_o * n..(c_o + 1) * n] {
                *v = *v + bval;
            }
        }
    }
    Ok(from_channel_major(&ym, d.batch, od, oh, ow))
}

/// Gradient of the convolution output w.r.t. its input.
pub fn conv_input_grad<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    in_dims: ConvDims,
    stride: (usize, usize),
) -> Tensor<T> {
    let s = w.shape();
    let (ci, kd, kh, kw) = (s[0], s[2], s[3], s[4]);
    debug_assert_eq!(ci, in_dims.c_in);
    let dym = to_channel_major(dy);
    let wm = weight_matrix(w);
    let dcol = wm.t().dot(&dym);
    col2im(&dcol, in_dims, (kd, kh, kw), stride)
}

/// Gradients of the convolution output w.r.t. weight and bias.
pub fn conv_param_grad<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kernel: (usize, usize, usize),
    stride: (usize, usize),
) -> (Tensor<T>, Array1<T>) {
    let d = dims_of(x);
    let col = im2col(x, kernel, stride);
    let dym = to_channel_major(dy);
    let dwm = dym.dot(&col.t());
    let dw = weight_from_matrix(&dwm, d.c_in, kernel);
    let co = dy.shape()[1];
    let mut db = Array1::<T>::zeros(co);
    for bi in 0..dy.shape()[0] {
        for c_o in 0..co {
            db[c_o] = db[c_o]
                + dy.index_axis(ndarray::Axis(0), bi)
                    .index_axis(ndarray::Axis(0), c_o)
                    .sum();
        }
    }
    (dw, db)
}

/// Zero-pads height and width by `p` on every side.
pub fn pad_spatial<T: Scalar>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let d = dims_of(x);
    let mut y = Tensor::<T>::zeros((d.batch, d.c_in, d.depth, d.height + 2 * p, d.width + 2 * p));
    let (hh, ww) = (d.height, d.width);
    y.slice_mut(ndarray::s![.., .., .., p..p + hh, p..p + ww])
        .assign(x);
    y
}

fn flip_hw<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    w.slice(ndarray::s![.., .., .., ..;-1, ..;-1])
        .as_standard_layout()
        .to_owned()
}

pub fn transpose_io<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    w.clone()
        .permuted_axes([1, 0, 2, 3, 4])
        .as_standard_layout()
        .to_owned()
}

/// Stride-1 transposed convolution over height/width (depth must be 1).
/// Grows each spatial extent by `k - 1`.
pub fn deconv_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Array1<T>>,
) -> Result<Tensor<T>> {
    let s = w.shape();
    debug_assert_eq!(s[2], 1, "transposed convs are 2D");
    debug_assert_eq!(x.shape()[2], 1, "transposed conv input must have depth 1");
    let p = s[3] - 1;
    let xp = pad_spatial(x, p);
    conv_fwd(&xp, &flip_hw(w), bias, (1, 1))
}

pub fn deconv_input_grad<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    conv_fwd(dy, &transpose_io(w), None, (1, 1))
}

pub fn deconv_param_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Array1<T>) {
    let kh = dy.shape()[3] - x.shape()[3] + 1;
    // dw[ci,co,p,q] = sum_{i,j} x[ci,i,j] * dy[co,i+p,j+q]
    let (dwt, _) = conv_param_grad(dy, x, (1, kh, kh), (1, 1));
    let dw = transpose_io(&dwt);
    let co = dy.shape()[1];
    let mut db = Array1::<T>::zeros(co);
    for bi in 0..dy.shape()[0] {
        for c_o in 0..co {
            db[c_o] = db[c_o]
                + dy.index_axis(ndarray::Axis(0), bi)
                    .index_axis(ndarray::Axis(0), c_o)
                    .sum();
        }
    }
    (dw, db)
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    let zero = T::zero();
    for v in x.iter_mut() {
        if *v < zero {
            *v = zero;
        }
    }
}

/// Backward through ReLU using the post-activation values (valid because
/// ReLU preserves sign).
pub fn relu_bwd_inplace<T: Scalar>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    let zero = T::zero();
    for (g, &y) in dy.iter_mut().zip(out.iter()) {
        if y <= zero {
            *g = zero;
        }
    }
}

pub fn leaky_relu_inplace<T: Scalar>(x: &mut Tensor<T>, slope: T) {
    let zero = T::zero();
    for v in x.iter_mut() {
        if *v < zero {
            *v = *v * slope;
        }
    }
}

pub fn leaky_relu_bwd_inplace<T: Scalar>(dy: &mut Tensor<T>, out: &Tensor<T>, slope: T) {
    let zero = T::zero();
    for (g, &y) in dy.iter_mut().zip(out.iter()) {
        if y < zero {
            *g = *g * slope;
        }
    }
}

/// `y = x · Wᵀ + b` with `x: [batch, in]`, `w: [out, in]`.
pub fn fc_fwd<T: Scalar>(x: &Array2<T>, w: &Array2<T>, bias: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        row += bias;
    }
    y
}

pub fn fc_input_grad<T: Scalar>(dy: &Array2<T>, w: &Array2<T>) -> Array2<T> {
    dy.dot(w)
}

pub fn fc_param_grad<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(ndarray::Axis(0));
    (dw, db)
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
        .expect("channel concat: spatial dims must match")
        .as_standard_layout()
        .to_owned()
}

/// Extracts the middle depth plane, keeping a depth axis of extent 1.
pub fn center_depth<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.shape()[2];
    x.slice(ndarray::s![.., .., d / 2..d / 2 + 1, .., ..])
        .as_standard_layout()
        .to_owned()
}
