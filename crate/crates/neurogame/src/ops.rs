//! Layer math: convolution, pooling, dense affine maps, activations and
//! losses, together with the hand-written backward passes the models use.
//!
//! Convolution here follows the channel-averaging convention of the
//! architecture: each filter correlates with every input channel and the
//! per-channel results are reduced by their arithmetic mean, so one filter
//! always yields one 2-D map.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Valid (no padding) cross-correlation of an `[H,W,C]` input with `K`
/// filters of shape `[f,f,C]`, averaged over input channels:
/// output `[(H-f)/stride+1, (W-f)/stride+1, K]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, filters: &[Tensor<T>], stride: usize) -> Result<Tensor<T>> {
    let (h, w, c) = expect_3d(input, "conv2d")?;
    if filters.is_empty() {
        return Err(Error::EmptyInput("conv2d"));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let f = filters[0].dim(0);
    for flt in filters {
        if flt.shape() != [f, f, c] {
            return Err(Error::shape(
                "conv2d",
                format!("filter {:?} does not match [{f},{f},{c}]", flt.shape()),
            ));
        }
    }
    if f > h || f > w {
        return Err(Error::shape("conv2d", format!("kernel {f} exceeds input {h}x{w}")));
    }
    let oh = (h - f) / stride + 1;
    let ow = (w - f) / stride + 1;
    let k = filters.len();
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut out = vec![T::zero(); oh * ow * k];
    let x = input.data();
    for (kf, flt) in filters.iter().enumerate() {
        let fd = flt.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..f {
                    let row = ((oy * stride + i) * w + ox * stride) * c;
                    let frow = i * f * c;
                    for jc in 0..f * c {
                        acc += x[row + jc] * fd[frow + jc];
                    }
                }
                out[(oy * ow + ox) * k + kf] = acc * inv_c;
            }
        }
    }
    let t = Tensor::new(vec![oh, ow, k], out)?;
    Ok(t)
}

/// Gradients of [`conv2d`] with respect to the input and the filters.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    filters: &[Tensor<T>],
    stride: usize,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (h, w, c) = expect_3d(input, "conv2d_backward")?;
    let f = filters[0].dim(0);
    let k = filters.len();
    let oh = (h - f) / stride + 1;
    let ow = (w - f) / stride + 1;
    if upstream.shape() != [oh, ow, k] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?} vs [{oh},{ow},{k}]", upstream.shape()),
        ));
    }
    let inv_c = T::from_f64(1.0 / c as f64);
    let x = input.data();
    let dy = upstream.data();
    let mut dx = vec![T::zero(); h * w * c];
    let mut df: Vec<Vec<T>> = (0..k).map(|_| vec![T::zero(); f * f * c]).collect();
    for (kf, flt) in filters.iter().enumerate() {
        let fd = flt.data();
        let dfk = &mut df[kf];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(oy * ow + ox) * k + kf] * inv_c;
                if g == T::zero() {
                    continue;
                }
                for i in 0..f {
                    let row = ((oy * stride + i) * w + ox * stride) * c;
                    let frow = i * f * c;
                    for jc in 0..f * c {
                        dx[row + jc] += fd[frow + jc] * g;
                        dfk[frow + jc] += x[row + jc] * g;
                    }
                }
            }
        }
    }
    let dinput = Tensor::new(vec![h, w, c], dx)?;
    let dfilters = df
        .into_iter()
        .map(|d| Tensor::new(vec![f, f, c], d))
        .collect::<Result<Vec<_>>>()?;
    Ok((dinput, dfilters))
}

/// Max pooling with a square window and matching stride; trailing rows and
/// columns that do not fill a window are dropped. Returns the pooled map and
/// the flat input offset of each selected maximum (first occurrence wins).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = expect_3d(input, "maxpool2d")?;
    if size == 0 || size > h || size > w {
        return Err(Error::invalid("maxpool2d", format!("window {size} on {h}x{w}")));
    }
    let oh = h / size;
    let ow = w / size;
    let x = input.data();
    let mut out = vec![T::zero(); oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_at = 0;
                for i in 0..size {
                    for j in 0..size {
                        let off = ((oy * size + i) * w + ox * size + j) * c + ch;
                        if x[off] > best {
                            best = x[off];
                            best_at = off;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                arg[o] = best_at;
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    if argmax.len() != upstream.len() {
        return Err(Error::shape("maxpool2d_backward", "argmax/upstream length".to_string()));
    }
    for (&at, &g) in argmax.iter().zip(upstream.data()) {
        dx[at] += g;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Affine map of a vector: `input . weights + bias`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 1 || weights.rank() != 2 || bias.rank() != 1 {
        return Err(Error::shape(
            "dense",
            format!("{:?} . {:?} + {:?}", input.shape(), weights.shape(), bias.shape()),
        ));
    }
    let (n, m) = (weights.dim(0), weights.dim(1));
    if input.dim(0) != n || bias.dim(0) != m {
        return Err(Error::shape(
            "dense",
            format!("{:?} . {:?} + {:?}", input.shape(), weights.shape(), bias.shape()),
        ));
    }
    let row = input.reshape(vec![1, n])?;
    let out = row.matmul(weights)?;
    let mut data = out.into_data();
    for (d, &b) in data.iter_mut().zip(bias.data()) {
        *d += b;
    }
    let t = Tensor::new(vec![m], data)?;
    t.ensure_finite("dense")?;
    Ok(t)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(upstream, "relu_backward", |x, g| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(upstream, "sigmoid_backward", |y, g| g * y * (T::one() - y))
}

/// Softmax of a vector with max-subtraction; the result sums to one.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 1 || x.is_empty() {
        return Err(Error::shape("softmax", format!("{:?}", x.shape())));
    }
    let max = x
        .data()
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let exps: Vec<T> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let t = Tensor::new(x.shape().to_vec(), exps.iter().map(|&e| e / total).collect())?;
    Ok(t)
}

/// Backward through softmax given the forward output `y`:
/// `dx = y * (dy - sum(dy * y))`.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let dot: T = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&y, &g)| y * g)
        .sum();
    output.zip_map(upstream, "softmax_backward", |y, g| y * (g - dot))
}

#[inline]
fn clamp_unit<T: Scalar>(p: T) -> T {
    // 1e-12 at 64-bit; one epsilon at 32-bit where 1-1e-12 rounds to 1.
    let eps = T::from_f64(1e-12).max(T::epsilon());
    p.max(eps).min(T::one() - eps)
}

/// Mean binary cross-entropy; predictions clamped away from {0,1}.
pub fn binary_cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(pred, target, "binary_cross_entropy")?;
    let mut total = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = clamp_unit(p).as_f64();
        let t = t.as_f64();
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    finite_scalar(total / pred.len() as f64, "binary_cross_entropy")
}

/// Gradient of the mean BCE with respect to the predictions.
pub fn binary_cross_entropy_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "binary_cross_entropy")?;
    let n = T::from_f64(pred.len() as f64);
    pred.zip_map(target, "binary_cross_entropy", |p, t| {
        let p = clamp_unit(p);
        (-t / p + (T::one() - t) / (T::one() - p)) / n
    })
}

/// Mean absolute error.
pub fn mean_absolute_error<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(pred, target, "mean_absolute_error")?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    finite_scalar(total / pred.len() as f64, "mean_absolute_error")
}

pub fn mean_absolute_error_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "mean_absolute_error")?;
    let n = T::from_f64(pred.len() as f64);
    pred.zip_map(target, "mean_absolute_error", |p, t| {
        if p > t {
            T::one() / n
        } else if p < t {
            -T::one() / n
        } else {
            T::zero()
        }
    })
}

/// Categorical cross-entropy of probability rows `[B,K]` (or a single `[K]`
/// row) against one-hot targets: per-row sum, mean over rows.
pub fn categorical_cross_entropy<T: Scalar>(pred: &Tensor<T>, onehot: &Tensor<T>) -> Result<f64> {
    same_shape(pred, onehot, "categorical_cross_entropy")?;
    let rows = if pred.rank() == 2 { pred.dim(0) } else { 1 };
    let mut total = 0.0;
    for (&p, &t) in pred.data().iter().zip(onehot.data()) {
        total -= t.as_f64() * clamp_unit(p).as_f64().ln();
    }
    finite_scalar(total / rows as f64, "categorical_cross_entropy")
}

pub fn categorical_cross_entropy_grad<T: Scalar>(pred: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, onehot, "categorical_cross_entropy")?;
    let rows = if pred.rank() == 2 { pred.dim(0) } else { 1 };
    let inv = T::from_f64(1.0 / rows as f64);
    pred.zip_map(onehot, "categorical_cross_entropy", |p, t| {
        -t / clamp_unit(p) * inv
    })
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn finite_scalar(x: f64, op: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn expect_3d<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::shape(op, format!("expected [H,W,C], got {:?}", t.shape())));
    }
    Ok((t.dim(0), t.dim(1), t.dim(2)))
}
