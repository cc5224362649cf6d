//! Trainable layers with hand-written forward/backward passes, batched over
//! the leading dimension. Gradients accumulate into per-layer buffers and are
//! consumed by the optimizer through the model's parameter visitors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{
    apply_mask, channel_maps, compute_layer_mask, feature_vector, feature_vector_backward,
    LayerMask, Mode, NeurogameLayerConfig, NgDiagnostics,
};
use crate::ops;
use crate::tensor::{Scalar, Tensor};
use crate::util::parallel_map;

/// Per-call context threaded through every layer.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// Global optimizer step, starting at 1; drives the gate's temperature
    /// and threshold schedules.
    pub iteration: u64,
    /// Stream for dropout masks.
    pub rng: &'a mut ChaCha8Rng,
    /// When set, coalition-gate layers push one record per (sample, channel).
    pub diag: Option<&'a mut Vec<NgDiagnostics>>,
}

/// Uniform He-style initialization for layers feeding relu.
pub fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    random_uniform(shape, limit, rng)
}

/// Uniform Xavier-style initialization for layers feeding sigmoid.
pub fn xavier_uniform<T: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    random_uniform(shape, limit, rng)
}

fn random_uniform<T: Scalar>(shape: Vec<usize>, limit: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("finite init")
}

fn batch_dims<T: Scalar>(x: &Tensor<T>, want_rank: usize, op: &'static str) -> Result<Vec<usize>> {
    if x.rank() != want_rank {
        return Err(Error::shape(op, format!("expected rank {want_rank}, got {:?}", x.shape())));
    }
    Ok(x.shape().to_vec())
}

/// Copy sample `b` of a `[B, ...]` batch into its own tensor.
fn sample<T: Scalar>(x: &Tensor<T>, b: usize) -> Tensor<T> {
    let inner: Vec<usize> = x.shape()[1..].to_vec();
    let n: usize = inner.iter().product();
    let data = x.data()[b * n..(b + 1) * n].to_vec();
    Tensor::new(inner, data).expect("sample slice")
}

fn write_sample<T: Scalar>(out: &mut Tensor<T>, b: usize, s: &Tensor<T>) {
    let n = s.len();
    out.data_mut()[b * n..(b + 1) * n].copy_from_slice(s.data());
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub struct DenseLayer<T: Scalar> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let gw = Tensor::zeros(weights.shape().to_vec());
        let gb = Tensor::zeros(bias.shape().to_vec());
        DenseLayer {
            weights,
            bias,
            grad_weights: gw,
            grad_bias: gb,
            cached_input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_dims(x, 2, "dense")?;
        let mut y = x.matmul(&self.weights)?;
        let m = self.bias.len();
        for row in y.data_mut().chunks_mut(m) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::invalid("dense", "backward before forward"))?;
        let dw = x.transpose()?.matmul(dy)?;
        self.grad_weights = self.grad_weights.add(&dw)?;
        let m = self.bias.len();
        for row in dy.data().chunks(m) {
            for (g, &v) in self.grad_bias.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        dy.matmul(&self.weights.transpose()?)
    }
}

// ---------------------------------------------------------------------------
// Convolution (channel-averaging kernel from ops::conv2d)
// ---------------------------------------------------------------------------

pub struct ConvLayer<T: Scalar> {
    pub filters: Vec<Tensor<T>>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub grad_filters: Vec<Tensor<T>>,
    pub grad_bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(filters: Vec<Tensor<T>>, bias: Tensor<T>, stride: usize) -> Self {
        let gf = filters.iter().map(|f| Tensor::zeros(f.shape().to_vec())).collect();
        let gb = Tensor::zeros(bias.shape().to_vec());
        ConvLayer {
            filters,
            bias,
            stride,
            grad_filters: gf,
            grad_bias: gb,
            cached_input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = batch_dims(x, 4, "conv")?;
        let batch = dims[0];
        let k = self.filters.len();
        let mut out: Option<Tensor<T>> = None;
        for b in 0..batch {
            let s = sample(x, b);
            let mut y = ops::conv2d(&s, &self.filters, self.stride)?;
            for chunk in y.data_mut().chunks_mut(k) {
                for (v, &bias) in chunk.iter_mut().zip(self.bias.data()) {
                    *v += bias;
                }
            }
            let out_t = out.get_or_insert_with(|| {
                let mut shape = vec![batch];
                shape.extend_from_slice(y.shape());
                Tensor::zeros(shape)
            });
            write_sample(out_t, b, &y);
        }
        self.cached_input = Some(x.clone());
        Ok(out.expect("batch >= 1"))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::invalid("conv", "backward before forward"))?;
        let batch = x.dim(0);
        let k = self.filters.len();
        let mut dx = Tensor::zeros(x.shape().to_vec());
        for b in 0..batch {
            let xs = sample(x, b);
            let dys = sample(dy, b);
            let (dxs, dfs) = ops::conv2d_backward(&xs, &self.filters, self.stride, &dys)?;
            write_sample(&mut dx, b, &dxs);
            for (acc, df) in self.grad_filters.iter_mut().zip(dfs) {
                *acc = acc.add(&df)?;
            }
            for chunk in dys.data().chunks(k) {
                for (g, &v) in self.grad_bias.data_mut().iter_mut().zip(chunk) {
                    *g += v;
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over a [B, n] feature batch
// ---------------------------------------------------------------------------

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
    cache: Option<BnCache<T>>,
}

struct BnCache<T: Scalar> {
    input: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(features: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(vec![features], T::one()),
            beta: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::filled(vec![features], T::one()),
            grad_gamma: Tensor::zeros(vec![features]),
            grad_beta: Tensor::zeros(vec![features]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let dims = batch_dims(x, 2, "batchnorm")?;
        let (b, n) = (dims[0], dims[1]);
        if n != self.gamma.len() {
            return Err(Error::shape(
                "batchnorm",
                format!("{n} features, layer has {}", self.gamma.len()),
            ));
        }
        let eps = T::from_f64(BATCHNORM_EPS);
        let mut y = Tensor::zeros(vec![b, n]);
        match mode {
            Mode::Train => {
                let inv_b = T::from_f64(1.0 / b as f64);
                let mut mean = vec![T::zero(); n];
                for row in x.data().chunks(n) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v * inv_b;
                    }
                }
                let mut var = vec![T::zero(); n];
                for row in x.data().chunks(n) {
                    for ((va, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *va += d * d * inv_b;
                    }
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for (yrow, xrow) in y.data_mut().chunks_mut(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        let xhat = (xrow[j] - mean[j]) * inv_std[j];
                        yrow[j] = self.gamma.data()[j] * xhat + self.beta.data()[j];
                    }
                }
                let momentum = T::from_f64(BATCHNORM_MOMENTUM);
                let rest = T::one() - momentum;
                for j in 0..n {
                    self.running_mean.data_mut()[j] =
                        momentum * self.running_mean.data()[j] + rest * mean[j];
                    self.running_var.data_mut()[j] =
                        momentum * self.running_var.data()[j] + rest * var[j];
                }
                self.cache = Some(BnCache {
                    input: x.clone(),
                    mean,
                    inv_std,
                });
            }
            Mode::Infer => {
                for (yrow, xrow) in y.data_mut().chunks_mut(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        let inv = T::one() / (self.running_var.data()[j] + eps).sqrt();
                        let xhat = (xrow[j] - self.running_mean.data()[j]) * inv;
                        yrow[j] = self.gamma.data()[j] * xhat + self.beta.data()[j];
                    }
                }
                self.cache = None;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("batchnorm", "backward without a train-mode forward"))?;
        let n = self.gamma.len();
        let b = dy.dim(0);
        let inv_b = T::from_f64(1.0 / b as f64);
        let x = &cache.input;
        let mut dx = Tensor::zeros(vec![b, n]);
        let mut sum_dy = vec![T::zero(); n];
        let mut sum_dy_xhat = vec![T::zero(); n];
        for (dyrow, xrow) in dy.data().chunks(n).zip(x.data().chunks(n)) {
            for j in 0..n {
                let xhat = (xrow[j] - cache.mean[j]) * cache.inv_std[j];
                sum_dy[j] += dyrow[j];
                sum_dy_xhat[j] += dyrow[j] * xhat;
            }
        }
        for j in 0..n {
            self.grad_beta.data_mut()[j] += sum_dy[j];
            self.grad_gamma.data_mut()[j] += sum_dy_xhat[j];
        }
        for ((dxrow, dyrow), xrow) in dx
            .data_mut()
            .chunks_mut(n)
            .zip(dy.data().chunks(n))
            .zip(x.data().chunks(n))
        {
            for j in 0..n {
                let xhat = (xrow[j] - cache.mean[j]) * cache.inv_std[j];
                let g = self.gamma.data()[j];
                dxrow[j] = g * cache.inv_std[j]
                    * (dyrow[j] - inv_b * sum_dy[j] - xhat * inv_b * sum_dy_xhat[j]);
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling, identity at inference)
// ---------------------------------------------------------------------------

pub struct DropoutLayer<T: Scalar> {
    pub rate: f64,
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> DropoutLayer<T> {
    pub fn new(rate: f64) -> Self {
        DropoutLayer { rate, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        if ctx.mode == Mode::Infer || self.rate == 0.0 {
            self.mask = None;
            return Ok(x.clone());
        }
        let scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mask = x.map(|_| {
            if ctx.rng.random::<f64>() >= self.rate {
                scale
            } else {
                T::zero()
            }
        });
        let y = x.mul_elem(&mask)?;
        self.mask = Some(mask);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.mask {
            Some(mask) => dy.mul_elem(mask),
            None => Ok(dy.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct ReluLayer<T: Scalar> {
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> ReluLayer<T> {
    pub fn new() -> Self {
        ReluLayer { cached_input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.cached_input = Some(x.clone());
        Ok(ops::relu(x))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::invalid("relu", "backward before forward"))?;
        ops::relu_backward(x, dy)
    }
}

#[derive(Default)]
pub struct SigmoidLayer<T: Scalar> {
    cached_output: Option<Tensor<T>>,
}

impl<T: Scalar> SigmoidLayer<T> {
    pub fn new() -> Self {
        SigmoidLayer { cached_output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::sigmoid(x);
        self.cached_output = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self
            .cached_output
            .as_ref()
            .ok_or_else(|| Error::invalid("sigmoid", "backward before forward"))?;
        ops::sigmoid_backward(y, dy)
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

pub struct MaxPoolLayer {
    pub size: usize,
    cache: Option<(Vec<usize>, Vec<Vec<usize>>)>,
}

impl MaxPoolLayer {
    pub fn new(size: usize) -> Self {
        MaxPoolLayer { size, cache: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = batch_dims(x, 4, "maxpool")?;
        let batch = dims[0];
        let mut out: Option<Tensor<T>> = None;
        let mut args = Vec::with_capacity(batch);
        for b in 0..batch {
            let s = sample(x, b);
            let (y, arg) = ops::maxpool2d(&s, self.size)?;
            args.push(arg);
            let out_t = out.get_or_insert_with(|| {
                let mut shape = vec![batch];
                shape.extend_from_slice(y.shape());
                Tensor::zeros(shape)
            });
            write_sample(out_t, b, &y);
        }
        self.cache = Some((dims[1..].to_vec(), args));
        Ok(out.expect("batch >= 1"))
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_shape, args) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("maxpool", "backward before forward"))?;
        let batch = dy.dim(0);
        let mut shape = vec![batch];
        shape.extend_from_slice(in_shape);
        let mut dx = Tensor::zeros(shape);
        for b in 0..batch {
            let dys = sample(dy, b);
            let dxs = ops::maxpool2d_backward(in_shape, &args[b], &dys)?;
            write_sample(&mut dx, b, &dxs);
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Reshapes
// ---------------------------------------------------------------------------

/// Row-major flatten `[B,H,W,C] -> [B, H*W*C]`; the memory order already
/// matches, so this is a reshape.
#[derive(Default)]
pub struct FlattenLayer {
    cached_shape: Option<Vec<usize>>,
}

impl FlattenLayer {
    pub fn new() -> Self {
        FlattenLayer { cached_shape: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = batch_dims(x, 4, "flatten")?;
        self.cached_shape = Some(dims.clone());
        x.reshape(vec![dims[0], dims[1] * dims[2] * dims[3]])
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .cached_shape
            .as_ref()
            .ok_or_else(|| Error::invalid("flatten", "backward before forward"))?;
        dy.reshape(shape.clone())
    }
}

/// Channel-major feature vector `[B,H,W,C] -> [B, C*H*W]`; dropped positions
/// stay as zeros so the length is input-independent.
#[derive(Default)]
pub struct FeatureVectorLayer {
    cached_shape: Option<Vec<usize>>,
}

impl FeatureVectorLayer {
    pub fn new() -> Self {
        FeatureVectorLayer { cached_shape: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = batch_dims(x, 4, "feature_vector")?;
        let batch = dims[0];
        let n = dims[1] * dims[2] * dims[3];
        let mut out = Tensor::zeros(vec![batch, n]);
        for b in 0..batch {
            let v = feature_vector(&sample(x, b))?;
            write_sample(&mut out, b, &v);
        }
        self.cached_shape = Some(dims);
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self
            .cached_shape
            .as_ref()
            .ok_or_else(|| Error::invalid("feature_vector", "backward before forward"))?;
        let batch = dims[0];
        let mut dx = Tensor::zeros(dims.clone());
        for b in 0..batch {
            let g = feature_vector_backward(&sample(dy, b), dims[1], dims[2], dims[3])?;
            write_sample(&mut dx, b, &g);
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Coalition gate
// ---------------------------------------------------------------------------

/// The coalition-gated layer as a model node: computes a keep/drop mask per
/// sample and channel, multiplies it in, and reuses it for the backward pass.
/// `frozen` pins the masks of the first forward until unfrozen (used by
/// finite-difference gradient checks, which must differentiate at a fixed
/// selection).
pub struct NgGate {
    pub cfg: NeurogameLayerConfig,
    /// Index among the model's gated layers, used to label diagnostics.
    pub tag: usize,
    pub frozen: bool,
    cached: Option<Vec<LayerMask>>,
    last_masks: Option<Vec<LayerMask>>,
}

impl NgGate {
    pub fn new(cfg: NeurogameLayerConfig, tag: usize) -> Self {
        NgGate {
            cfg,
            tag,
            frozen: false,
            cached: None,
            last_masks: None,
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if !frozen {
            self.cached = None;
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let dims = batch_dims(x, 4, "neurogame_gate")?;
        let (batch, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
        if self.cfg.pass_through || (ctx.mode == Mode::Infer && self.cfg.infer_identity) {
            self.last_masks = Some(vec![LayerMask::all_ones(h, w, c, ctx.iteration); batch]);
            return Ok(x.clone());
        }
        let masks: Vec<LayerMask> = if self.frozen && self.cached.as_ref().is_some_and(|m| m.len() == batch)
        {
            self.cached.clone().expect("checked above")
        } else {
            let cfg = &self.cfg;
            let tag = self.tag;
            let iteration = ctx.iteration;
            let computed: Vec<Result<LayerMask>> = if ctx.diag.is_some() {
                // Diagnostics sinks are not shared across workers; collect
                // sequentially when records are requested.
                let mut out = Vec::with_capacity(batch);
                for b in 0..batch {
                    let maps = channel_maps(&sample(x, b))?;
                    let mut records = Vec::new();
                    let mask =
                        compute_layer_mask(&maps, cfg, iteration, tag, b as u64, Some(&mut records))?;
                    if let Some(sink) = ctx.diag.as_deref_mut() {
                        sink.append(&mut records);
                    }
                    out.push(Ok(mask));
                }
                out
            } else {
                parallel_map(batch, |b| {
                    let maps = channel_maps(&sample(x, b))?;
                    compute_layer_mask(&maps, cfg, iteration, tag, b as u64, None)
                })
            };
            let masks = computed.into_iter().collect::<Result<Vec<_>>>()?;
            if self.frozen {
                self.cached = Some(masks.clone());
            }
            masks
        };
        let mut out = Tensor::zeros(dims.clone());
        for (b, mask) in masks.iter().enumerate() {
            let gated = apply_mask(&sample(x, b), mask, self.cfg.rescale_kept)?;
            write_sample(&mut out, b, &gated);
        }
        self.last_masks = Some(masks);
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let masks = self
            .last_masks
            .as_ref()
            .ok_or_else(|| Error::invalid("neurogame_gate", "backward before forward"))?;
        let mut dx = Tensor::zeros(dy.shape().to_vec());
        for (b, mask) in masks.iter().enumerate() {
            let gated = apply_mask(&sample(dy, b), mask, self.cfg.rescale_kept)?;
            write_sample(&mut dx, b, &gated);
        }
        Ok(dx)
    }

    pub fn last_masks(&self) -> Option<&[LayerMask]> {
        self.last_masks.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ctx_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    #[test]
    fn dense_batch_matches_single_rows() {
        let mut rng = ctx_rng();
        let w: Tensor<f64> = he_uniform(vec![3, 2], 3, &mut rng);
        let b: Tensor<f64> = he_uniform(vec![2], 3, &mut rng);
        let mut layer = DenseLayer::new(w.clone(), b.clone());
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        for row in 0..2 {
            let xr = Tensor::new(vec![3], x.data()[row * 3..(row + 1) * 3].to_vec()).unwrap();
            let want = ops::dense(&xr, &w, &b).unwrap();
            for j in 0..2 {
                assert!((y.at(&[row, j]) - want.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_infer_is_identity_and_train_scales() {
        let x = Tensor::filled(vec![4, 100], 1.0f64);
        let mut layer = DropoutLayer::new(0.5);
        let mut rng = ctx_rng();
        let mut ctx = ForwardCtx {
            mode: Mode::Infer,
            iteration: 1,
            rng: &mut rng,
            diag: None,
        };
        assert_eq!(layer.forward(&x, &mut ctx).unwrap(), x);

        let mut rng = ctx_rng();
        let mut ctx = ForwardCtx {
            mode: Mode::Train,
            iteration: 1,
            rng: &mut rng,
            diag: None,
        };
        let y = layer.forward(&x, &mut ctx).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(kept > 130 && kept < 270, "kept {kept} of 400");
    }

    #[test]
    fn batchnorm_normalizes_batch_statistics() {
        let mut layer = BatchNormLayer::<f64>::new(2);
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let y = layer.forward(&x, Mode::Train).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|b| y.at(&[b, j])).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn flatten_keeps_memory_order_and_restores_shape() {
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let mut layer = FlattenLayer::new();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8]);
        assert_eq!(y.data(), x.data());
        let back = layer.backward(&y).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn gate_freezing_reuses_the_mask() {
        let mut gate = NgGate::new(NeurogameLayerConfig::default(), 0);
        let x = Tensor::new(
            vec![1, 4, 4, 1],
            (0..16).map(|i| 0.1 + (i as f64) * 0.07).collect(),
        )
        .unwrap();
        gate.set_frozen(true);
        let mut r1 = ctx_rng();
        let mut ctx = ForwardCtx {
            mode: Mode::Train,
            iteration: 3,
            rng: &mut r1,
            diag: None,
        };
        let y1 = gate.forward(&x, &mut ctx).unwrap();
        let masks = gate.last_masks().unwrap().to_vec();
        // A different input under a frozen gate reuses the same masks.
        let x2 = x.map(|v| v * 0.1 + 0.01);
        let mut r2 = ctx_rng();
        let mut ctx = ForwardCtx {
            mode: Mode::Train,
            iteration: 3,
            rng: &mut r2,
            diag: None,
        };
        let y2 = gate.forward(&x2, &mut ctx).unwrap();
        assert_eq!(gate.last_masks().unwrap(), &masks[..]);
        for i in 0..16 {
            let kept = y1.data()[i] != 0.0;
            assert_eq!(y2.data()[i] != 0.0, kept);
        }
        // Unfreezing recomputes from the live input.
        gate.set_frozen(false);
        let mut r3 = ctx_rng();
        let mut ctx = ForwardCtx {
            mode: Mode::Train,
            iteration: 3,
            rng: &mut r3,
            diag: None,
        };
        gate.forward(&x2, &mut ctx).unwrap();
    }
}
