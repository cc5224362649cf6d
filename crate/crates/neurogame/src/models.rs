//! Model specifications, the four reference architectures, the runtime model
//! (forward/backward over layer nodes, one or two output heads), and the
//! checkpoint container.
//!
//! Checkpoints are a text header (JSON: spec, precision, iteration, blob
//! manifest, caller metadata) followed by the named tensors as little-endian
//! 32-bit floats; save/load round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::NeurogameLayerConfig;
use crate::nn::{
    he_uniform, xavier_uniform, BatchNormLayer, ConvLayer, DenseLayer, DropoutLayer,
    FeatureVectorLayer, FlattenLayer, ForwardCtx, MaxPoolLayer, NgGate, ReluLayer, SigmoidLayer,
};
use crate::optim::Adam;
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GENDER_INPUT: [usize; 3] = [64, 64, 3];
pub const AGE_GENDER_INPUT: [usize; 3] = [128, 128, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Flatten,
    FeatureVector,
    Dense { units: usize },
    Relu,
    Sigmoid,
    BatchNorm,
    Dropout { rate: f64 },
    Conv { filters: usize, kernel: usize, stride: usize },
    MaxPool { size: usize },
    Neurogame { cfg: NeurogameLayerConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BinaryCrossEntropy,
    MeanAbsoluteError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDesc {
    pub name: String,
    pub layers: Vec<LayerDesc>,
    pub loss: LossKind,
}

/// Ordered layer descriptors plus the output heads; everything needed to
/// instantiate, walk, or persist a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: [usize; 3],
    pub trunk: Vec<LayerDesc>,
    pub heads: Vec<HeadDesc>,
}

fn apply_desc(shape: &[usize], desc: &LayerDesc) -> Result<Vec<usize>> {
    let need_map = |op: &'static str| -> Result<(usize, usize, usize)> {
        if shape.len() != 3 {
            return Err(Error::shape(op, format!("needs [H,W,C], got {shape:?}")));
        }
        Ok((shape[0], shape[1], shape[2]))
    };
    match desc {
        LayerDesc::Flatten | LayerDesc::FeatureVector => {
            let (h, w, c) = need_map("flatten")?;
            Ok(vec![h * w * c])
        }
        LayerDesc::Dense { units } => {
            if shape.len() != 1 {
                return Err(Error::shape("dense", format!("needs [N], got {shape:?}")));
            }
            Ok(vec![*units])
        }
        LayerDesc::Relu | LayerDesc::Sigmoid | LayerDesc::Dropout { .. } => Ok(shape.to_vec()),
        LayerDesc::BatchNorm => {
            if shape.len() != 1 {
                return Err(Error::shape("batchnorm", format!("needs [N], got {shape:?}")));
            }
            Ok(shape.to_vec())
        }
        LayerDesc::Conv { filters, kernel, stride } => {
            let (h, w, c) = need_map("conv")?;
            if *kernel > h || *kernel > w || *stride == 0 {
                return Err(Error::shape(
                    "conv",
                    format!("kernel {kernel} stride {stride} on {h}x{w}x{c}"),
                ));
            }
            Ok(vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, *filters])
        }
        LayerDesc::MaxPool { size } => {
            let (h, w, c) = need_map("maxpool")?;
            if *size == 0 || h / size == 0 || w / size == 0 {
                return Err(Error::shape("maxpool", format!("window {size} on {h}x{w}")));
            }
            Ok(vec![h / size, w / size, c])
        }
        LayerDesc::Neurogame { cfg } => {
            let (h, w, _) = need_map("neurogame")?;
            cfg.validate()?;
            if cfg.block.0 > h || cfg.block.1 > w {
                return Err(Error::BlockTooLarge {
                    block_rows: cfg.block.0,
                    block_cols: cfg.block.1,
                    rows: h,
                    cols: w,
                });
            }
            Ok(shape.to_vec())
        }
    }
}

fn desc_params(in_shape: &[usize], desc: &LayerDesc) -> u64 {
    match desc {
        LayerDesc::Dense { units } => (in_shape[0] * units + units) as u64,
        LayerDesc::Conv { filters, kernel, .. } => {
            (filters * (kernel * kernel * in_shape[2]) + filters) as u64
        }
        LayerDesc::BatchNorm => 2 * in_shape[0] as u64,
        _ => 0,
    }
}

impl ModelSpec {
    /// Shapes after every trunk layer; validates that the whole spec
    /// composes, heads included.
    pub fn walk(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        let mut trace = Vec::with_capacity(self.trunk.len());
        for desc in &self.trunk {
            shape = apply_desc(&shape, desc)?;
            trace.push(shape.clone());
        }
        for head in &self.heads {
            let mut hs = shape.clone();
            for desc in &head.layers {
                hs = apply_desc(&hs, desc)?;
            }
        }
        Ok(trace)
    }

    pub fn head_output_shape(&self, head: &HeadDesc) -> Result<Vec<usize>> {
        let mut shape = self.input.to_vec();
        for desc in &self.trunk {
            shape = apply_desc(&shape, desc)?;
        }
        for desc in &head.layers {
            shape = apply_desc(&shape, desc)?;
        }
        Ok(shape)
    }

    /// Trainable parameter count (dense, conv, batchnorm gamma/beta).
    pub fn param_count(&self) -> Result<u64> {
        let mut shape = self.input.to_vec();
        let mut total = 0;
        for desc in &self.trunk {
            total += desc_params(&shape, desc);
            shape = apply_desc(&shape, desc)?;
        }
        for head in &self.heads {
            let mut hs = shape.clone();
            for desc in &head.layers {
                total += desc_params(&hs, desc);
                hs = apply_desc(&hs, desc)?;
            }
        }
        Ok(total)
    }

    pub fn has_gates(&self) -> bool {
        let in_layers = |layers: &[LayerDesc]| layers.iter().any(|d| matches!(d, LayerDesc::Neurogame { .. }));
        in_layers(&self.trunk) || self.heads.iter().any(|h| in_layers(&h.layers))
    }

    pub fn gate_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.layers.iter()))
            .filter(|d| matches!(d, LayerDesc::Neurogame { .. }))
            .count()
    }
}

fn dense_relu_block(units: usize, dropout: f64) -> Vec<LayerDesc> {
    vec![
        LayerDesc::Dense { units },
        LayerDesc::Relu,
        LayerDesc::BatchNorm,
        LayerDesc::Dropout { rate: dropout },
    ]
}

/// Gender baseline: flattened input through three dense/relu/batchnorm/
/// dropout blocks (256, 128, 64) into a sigmoid unit.
pub fn build_mlp_gender(input: [usize; 3]) -> ModelSpec {
    let mut trunk = vec![LayerDesc::Flatten];
    for units in [256, 128, 64] {
        trunk.extend(dense_relu_block(units, 0.5));
    }
    ModelSpec {
        name: "mlp-gender".to_string(),
        input,
        trunk,
        heads: vec![HeadDesc {
            name: "gender".to_string(),
            layers: vec![LayerDesc::Dense { units: 1 }, LayerDesc::Sigmoid],
            loss: LossKind::BinaryCrossEntropy,
        }],
    }
}

/// Gender model with the coalition gate: a three-filter 3x3 convolution
/// generates feature maps, the gate filters them, and the surviving
/// activations feed the same dense stack as the baseline.
pub fn build_neurogame_gender(input: [usize; 3], gate: NeurogameLayerConfig) -> ModelSpec {
    let mut trunk = vec![
        LayerDesc::Conv {
            filters: 3,
            kernel: 3,
            stride: 1,
        },
        LayerDesc::Relu,
        LayerDesc::Neurogame { cfg: gate },
        LayerDesc::FeatureVector,
    ];
    for units in [256, 128, 64] {
        trunk.extend(dense_relu_block(units, 0.5));
    }
    ModelSpec {
        name: "neurogame-gender".to_string(),
        input,
        trunk,
        heads: vec![HeadDesc {
            name: "gender".to_string(),
            layers: vec![LayerDesc::Dense { units: 1 }, LayerDesc::Sigmoid],
            loss: LossKind::BinaryCrossEntropy,
        }],
    }
}

fn age_gender_heads() -> Vec<HeadDesc> {
    vec![
        HeadDesc {
            name: "gender".to_string(),
            layers: vec![LayerDesc::Dense { units: 1 }, LayerDesc::Sigmoid],
            loss: LossKind::BinaryCrossEntropy,
        },
        HeadDesc {
            name: "age".to_string(),
            layers: vec![LayerDesc::Dense { units: 1 }, LayerDesc::Relu],
            loss: LossKind::MeanAbsoluteError,
        },
    ]
}

/// Age/gender CNN with a configurable conv stack and dense width; the
/// reference architecture uses filters [32, 64, 128, 256] and 256-unit dense
/// layers.
pub fn build_cnn_age_gender_sized(input: [usize; 3], conv_filters: &[usize], dense_units: usize) -> ModelSpec {
    let mut trunk = Vec::new();
    for &filters in conv_filters {
        trunk.push(LayerDesc::Conv {
            filters,
            kernel: 3,
            stride: 1,
        });
        trunk.push(LayerDesc::Relu);
        trunk.push(LayerDesc::MaxPool { size: 2 });
    }
    trunk.push(LayerDesc::Flatten);
    for _ in 0..2 {
        trunk.push(LayerDesc::Dense { units: dense_units });
        trunk.push(LayerDesc::Relu);
        trunk.push(LayerDesc::Dropout { rate: 0.5 });
    }
    ModelSpec {
        name: "cnn-agegender".to_string(),
        input,
        trunk,
        heads: age_gender_heads(),
    }
}

pub fn build_cnn_age_gender(input: [usize; 3]) -> ModelSpec {
    build_cnn_age_gender_sized(input, &[32, 64, 128, 256], 256)
}

/// Age/gender model with coalition gates: the baseline skeleton with a gate
/// after each conv/relu pair, before pooling. The gates add no trainable
/// parameters, so the count matches the baseline exactly.
pub fn build_neurogame_age_gender_sized(
    input: [usize; 3],
    conv_filters: &[usize],
    dense_units: usize,
    gate: NeurogameLayerConfig,
) -> ModelSpec {
    let mut trunk = Vec::new();
    for &filters in conv_filters {
        trunk.push(LayerDesc::Conv {
            filters,
            kernel: 3,
            stride: 1,
        });
        trunk.push(LayerDesc::Relu);
        trunk.push(LayerDesc::Neurogame { cfg: gate.clone() });
        trunk.push(LayerDesc::MaxPool { size: 2 });
    }
    trunk.push(LayerDesc::Flatten);
    for _ in 0..2 {
        trunk.push(LayerDesc::Dense { units: dense_units });
        trunk.push(LayerDesc::Relu);
        trunk.push(LayerDesc::Dropout { rate: 0.5 });
    }
    ModelSpec {
        name: "neurogame-agegender".to_string(),
        input,
        trunk,
        heads: age_gender_heads(),
    }
}

pub fn build_neurogame_age_gender(input: [usize; 3], gate: NeurogameLayerConfig) -> ModelSpec {
    build_neurogame_age_gender_sized(input, &[32, 64, 128, 256], 256, gate)
}

// ---------------------------------------------------------------------------
// Runtime model
// ---------------------------------------------------------------------------

pub enum Node<T: Scalar> {
    Dense(DenseLayer<T>),
    Conv(ConvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    Dropout(DropoutLayer<T>),
    Relu(ReluLayer<T>),
    Sigmoid(SigmoidLayer<T>),
    MaxPool(MaxPoolLayer),
    Flatten(FlattenLayer),
    FeatureVector(FeatureVectorLayer),
    Gate(NgGate),
}

impl<T: Scalar> Node<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        match self {
            Node::Dense(l) => l.forward(x),
            Node::Conv(l) => l.forward(x),
            Node::BatchNorm(l) => l.forward(x, ctx.mode),
            Node::Dropout(l) => l.forward(x, ctx),
            Node::Relu(l) => l.forward(x),
            Node::Sigmoid(l) => l.forward(x),
            Node::MaxPool(l) => l.forward(x),
            Node::Flatten(l) => l.forward(x),
            Node::FeatureVector(l) => l.forward(x),
            Node::Gate(l) => l.forward(x, ctx),
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Node::Dense(l) => l.backward(dy),
            Node::Conv(l) => l.backward(dy),
            Node::BatchNorm(l) => l.backward(dy),
            Node::Dropout(l) => l.backward(dy),
            Node::Relu(l) => l.backward(dy),
            Node::Sigmoid(l) => l.backward(dy),
            Node::MaxPool(l) => l.backward(dy),
            Node::Flatten(l) => l.backward(dy),
            Node::FeatureVector(l) => l.backward(dy),
            Node::Gate(l) => l.backward(dy),
        }
    }
}

pub struct Head<T: Scalar> {
    pub name: String,
    pub loss: LossKind,
    pub nodes: Vec<Node<T>>,
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub trunk: Vec<Node<T>>,
    pub heads: Vec<Head<T>>,
    /// Global optimizer step count, starting at 1; persisted in checkpoints
    /// so resumed runs continue the cooling schedule.
    pub iteration: u64,
}

/// Whether the next activation after position `at` is a sigmoid (drives the
/// init scheme of the preceding dense/conv layer).
fn feeds_sigmoid(descs: &[LayerDesc], at: usize) -> bool {
    for desc in &descs[at + 1..] {
        match desc {
            LayerDesc::Sigmoid => return true,
            LayerDesc::Relu => return false,
            LayerDesc::BatchNorm | LayerDesc::Dropout { .. } => continue,
            _ => return false,
        }
    }
    false
}

fn build_nodes<T: Scalar>(
    descs: &[LayerDesc],
    start_shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
    gate_tag: &mut usize,
) -> Result<(Vec<Node<T>>, Vec<usize>)> {
    let mut nodes = Vec::with_capacity(descs.len());
    let mut shape = start_shape;
    for (i, desc) in descs.iter().enumerate() {
        let node = match desc {
            LayerDesc::Flatten => Node::Flatten(FlattenLayer::new()),
            LayerDesc::FeatureVector => Node::FeatureVector(FeatureVectorLayer::new()),
            LayerDesc::Relu => Node::Relu(ReluLayer::new()),
            LayerDesc::Sigmoid => Node::Sigmoid(SigmoidLayer::new()),
            LayerDesc::BatchNorm => Node::BatchNorm(BatchNormLayer::new(shape[0])),
            LayerDesc::Dropout { rate } => Node::Dropout(DropoutLayer::new(*rate)),
            LayerDesc::MaxPool { size } => Node::MaxPool(MaxPoolLayer::new(*size)),
            LayerDesc::Dense { units } => {
                let n = shape[0];
                let weights = if feeds_sigmoid(descs, i) {
                    xavier_uniform(vec![n, *units], n, *units, rng)
                } else {
                    he_uniform(vec![n, *units], n, rng)
                };
                Node::Dense(DenseLayer::new(weights, Tensor::zeros(vec![*units])))
            }
            LayerDesc::Conv { filters, kernel, stride } => {
                let c = shape[2];
                let fan_in = kernel * kernel * c;
                let flts = (0..*filters)
                    .map(|_| he_uniform(vec![*kernel, *kernel, c], fan_in, rng))
                    .collect();
                Node::Conv(ConvLayer::new(flts, Tensor::zeros(vec![*filters]), *stride))
            }
            LayerDesc::Neurogame { cfg } => {
                let gate = NgGate::new(cfg.clone(), *gate_tag);
                *gate_tag += 1;
                Node::Gate(gate)
            }
        };
        shape = apply_desc(&shape, desc)?;
        nodes.push(node);
    }
    Ok((nodes, shape))
}

impl<T: Scalar> Model<T> {
    /// Instantiate a spec with deterministically seeded weights.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.walk()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1217]));
        let mut gate_tag = 0;
        let (trunk, trunk_shape) = build_nodes(&spec.trunk, spec.input.to_vec(), &mut rng, &mut gate_tag)?;
        let mut heads = Vec::with_capacity(spec.heads.len());
        for hd in &spec.heads {
            let (nodes, _) = build_nodes(&hd.layers, trunk_shape.clone(), &mut rng, &mut gate_tag)?;
            heads.push(Head {
                name: hd.name.clone(),
                loss: hd.loss,
                nodes,
            });
        }
        Ok(Model {
            spec,
            trunk,
            heads,
            iteration: 1,
        })
    }

    /// Forward a `[B, H, W, C]` batch; returns one output per head, in spec
    /// order.
    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Vec<Tensor<T>>> {
        if x.rank() != 4 || x.shape()[1..] != self.spec.input {
            return Err(Error::shape(
                "model::forward",
                format!("input {:?} vs spec {:?}", x.shape(), self.spec.input),
            ));
        }
        let mut cur = x.clone();
        for node in &mut self.trunk {
            cur = node.forward(&cur, ctx)?;
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &mut self.heads {
            let mut h = cur.clone();
            for node in &mut head.nodes {
                h = node.forward(&h, ctx)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Backpropagate per-head output gradients; parameter gradients
    /// accumulate in the layers.
    pub fn backward(&mut self, head_grads: &[Tensor<T>]) -> Result<()> {
        if head_grads.len() != self.heads.len() {
            return Err(Error::invalid("model::backward", "one gradient per head"));
        }
        let mut trunk_grad: Option<Tensor<T>> = None;
        for (head, dy) in self.heads.iter_mut().zip(head_grads) {
            let mut g = dy.clone();
            for node in head.nodes.iter_mut().rev() {
                g = node.backward(&g)?;
            }
            trunk_grad = Some(match trunk_grad {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
        }
        let mut g = trunk_grad.ok_or_else(|| Error::invalid("model::backward", "no heads"))?;
        for node in self.trunk.iter_mut().rev() {
            g = node.backward(&g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        let zero = |t: &mut Tensor<T>| {
            for v in t.data_mut() {
                *v = T::zero();
            }
        };
        self.visit_params_infallible(&mut |_, _, grad| zero(grad));
    }

    fn visit_params_infallible(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>, &mut Tensor<T>)) {
        self.visit_params(&mut |name, value, grad| {
            f(name, value, grad);
            Ok(())
        })
        .expect("infallible visitor");
    }

    /// Visit every trainable parameter as (name, value, gradient), in a
    /// stable order.
    pub fn visit_params(
        &mut self,
        f: &mut impl FnMut(&str, &mut Tensor<T>, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        visit_nodes_params("trunk", &mut self.trunk, f)?;
        for head in &mut self.heads {
            visit_nodes_params(&format!("head.{}", head.name), &mut head.nodes, f)?;
        }
        Ok(())
    }

    /// Visit non-trainable state tensors (batchnorm running statistics).
    pub fn visit_state(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>) -> Result<()>) -> Result<()> {
        visit_nodes_state("trunk", &mut self.trunk, f)?;
        for head in &mut self.heads {
            visit_nodes_state(&format!("head.{}", head.name), &mut head.nodes, f)?;
        }
        Ok(())
    }

    pub fn apply_adam(&mut self, adam: &mut Adam<T>) -> Result<()> {
        let mut index = 0;
        self.visit_params(&mut |_, value, grad| {
            adam.update(index, value, grad)?;
            index += 1;
            Ok(())
        })
    }

    /// Freeze or unfreeze every coalition gate's mask (gradient-check hook).
    pub fn set_gates_frozen(&mut self, frozen: bool) {
        let set = |nodes: &mut Vec<Node<T>>| {
            for node in nodes {
                if let Node::Gate(g) = node {
                    g.set_frozen(frozen);
                }
            }
        };
        set(&mut self.trunk);
        for head in &mut self.heads {
            set(&mut head.nodes);
        }
    }

    /// Round every parameter and state tensor through 32-bit, so an
    /// immediately following save/eval pair sees exactly the checkpointed
    /// values.
    pub fn quantize_f32(&mut self) {
        self.visit_params_infallible(&mut |_, value, _| value.quantize_f32());
        self.visit_state(&mut |_, value| {
            value.quantize_f32();
            Ok(())
        })
        .expect("infallible visitor");
    }

    pub fn param_count(&self) -> Result<u64> {
        self.spec.param_count()
    }

    pub fn save_checkpoint(&mut self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut params = Vec::new();
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        self.visit_params(&mut |name, value, _| {
            params.push(TensorInfo {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            });
            blobs.push(blob_of(value));
            Ok(())
        })?;
        let mut state = Vec::new();
        self.visit_state(&mut |name, value| {
            state.push(TensorInfo {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            });
            blobs.push(blob_of(value));
            Ok(())
        })?;
        let header = CheckpointHeader {
            version: 1,
            model: self.spec.clone(),
            precision: T::NAME.to_string(),
            iteration: self.iteration,
            params,
            state,
            meta,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for blob in blobs {
            file.write_all(&blob)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short".to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".to_string()));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        if header.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut model = Model::<T>::build(header.model.clone(), 0)?;
        model.iteration = header.iteration;
        let mut infos = header.params.iter();
        model.visit_params(&mut |name, value, _| {
            let info = infos
                .next()
                .ok_or_else(|| Error::Checkpoint("missing parameter blob".to_string()))?;
            fill_from_blob(name, value, info, &mut file)
        })?;
        let mut infos = header.state.iter();
        model.visit_state(&mut |name, value| {
            let info = infos
                .next()
                .ok_or_else(|| Error::Checkpoint("missing state blob".to_string()))?;
            fill_from_blob(name, value, info, &mut file)
        })?;
        Ok((model, header))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NGCKPT1\n";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub precision: String,
    pub iteration: u64,
    pub params: Vec<TensorInfo>,
    pub state: Vec<TensorInfo>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_of<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn fill_from_blob<T: Scalar>(
    name: &str,
    value: &mut Tensor<T>,
    info: &TensorInfo,
    file: &mut std::fs::File,
) -> Result<()> {
    if info.name != name || info.shape != value.shape() {
        return Err(Error::Checkpoint(format!(
            "blob {} {:?} does not match tensor {} {:?}",
            info.name,
            info.shape,
            name,
            value.shape()
        )));
    }
    let mut bytes = vec![0u8; value.len() * 4];
    file.read_exact(&mut bytes)?;
    for (v, chunk) in value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
        let f = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        *v = T::from_f64(f as f64);
    }
    Ok(())
}

fn visit_nodes_params<T: Scalar>(
    prefix: &str,
    nodes: &mut [Node<T>],
    f: &mut impl FnMut(&str, &mut Tensor<T>, &mut Tensor<T>) -> Result<()>,
) -> Result<()> {
    for (i, node) in nodes.iter_mut().enumerate() {
        match node {
            Node::Dense(l) => {
                f(&format!("{prefix}.{i}.w"), &mut l.weights, &mut l.grad_weights)?;
                f(&format!("{prefix}.{i}.b"), &mut l.bias, &mut l.grad_bias)?;
            }
            Node::Conv(l) => {
                for (k, (flt, g)) in l.filters.iter_mut().zip(&mut l.grad_filters).enumerate() {
                    f(&format!("{prefix}.{i}.f{k}"), flt, g)?;
                }
                f(&format!("{prefix}.{i}.b"), &mut l.bias, &mut l.grad_bias)?;
            }
            Node::BatchNorm(l) => {
                f(&format!("{prefix}.{i}.gamma"), &mut l.gamma, &mut l.grad_gamma)?;
                f(&format!("{prefix}.{i}.beta"), &mut l.beta, &mut l.grad_beta)?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn visit_nodes_state<T: Scalar>(
    prefix: &str,
    nodes: &mut [Node<T>],
    f: &mut impl FnMut(&str, &mut Tensor<T>) -> Result<()>,
) -> Result<()> {
    for (i, node) in nodes.iter_mut().enumerate() {
        if let Node::BatchNorm(l) = node {
            f(&format!("{prefix}.{i}.running_mean"), &mut l.running_mean)?;
            f(&format!("{prefix}.{i}.running_var"), &mut l.running_var)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Mode;

    fn ctx<'a>(rng: &'a mut ChaCha8Rng, mode: Mode) -> ForwardCtx<'a> {
        ForwardCtx {
            mode,
            iteration: 1,
            rng,
            diag: None,
        }
    }

    #[test]
    fn mlp_parameter_count_matches_arithmetic() {
        let spec = build_mlp_gender(GENDER_INPUT);
        // Dense stack plus the sigmoid unit.
        let dense: u64 = (64 * 64 * 3 * 256 + 256) + (256 * 128 + 128) + (128 * 64 + 64) + (64 + 1);
        let batchnorm: u64 = 2 * (256 + 128 + 64);
        assert_eq!(dense, 3_187_201);
        assert_eq!(batchnorm, 896);
        assert_eq!(spec.param_count().unwrap(), dense + batchnorm);
    }

    #[test]
    fn cnn_spatial_trace_matches_hand_walk() {
        let spec = build_cnn_age_gender(AGE_GENDER_INPUT);
        let trace = spec.walk().unwrap();
        let spatial: Vec<usize> = trace
            .iter()
            .filter(|s| s.len() == 3)
            .map(|s| s[0])
            .collect();
        // conv/relu/pool per block: 126,126,63, 61,61,30, 28,28,14, 12,12,6
        assert_eq!(spatial, vec![126, 126, 63, 61, 61, 30, 28, 28, 14, 12, 12, 6]);
        let flat = trace.iter().find(|s| s.len() == 1).unwrap();
        assert_eq!(flat[0], 6 * 6 * 256);
    }

    #[test]
    fn gated_variants_do_not_add_parameters() {
        let gate = NeurogameLayerConfig::default();
        let mlp = build_mlp_gender(GENDER_INPUT);
        let ng = build_neurogame_gender(GENDER_INPUT, gate.clone());
        assert!(ng.param_count().unwrap() <= mlp.param_count().unwrap());

        let cnn = build_cnn_age_gender(AGE_GENDER_INPUT);
        let ng_cnn = build_neurogame_age_gender(AGE_GENDER_INPUT, gate);
        assert_eq!(ng_cnn.param_count().unwrap(), cnn.param_count().unwrap());
        assert_eq!(ng_cnn.gate_count(), 4);
    }

    #[test]
    fn all_specs_walk_and_forward_with_finite_outputs() {
        let gate = NeurogameLayerConfig::default();
        let specs = [
            build_mlp_gender([16, 16, 1]),
            build_neurogame_gender([16, 16, 1], gate.clone()),
            build_cnn_age_gender_sized([16, 16, 1], &[4, 8], 16),
            build_neurogame_age_gender_sized([16, 16, 1], &[4, 8], 16, gate),
        ];
        for spec in specs {
            spec.walk().unwrap();
            let heads = spec.heads.len();
            let mut model = Model::<f64>::build(spec, 7).unwrap();
            let x = Tensor::zeros(vec![2, 16, 16, 1]);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let outs = model.forward(&x, &mut ctx(&mut rng, Mode::Train)).unwrap();
            assert_eq!(outs.len(), heads);
            for out in &outs {
                assert_eq!(out.shape(), &[2, 1]);
                out.ensure_finite("test").unwrap();
            }
            // Gender head is a probability.
            for &p in outs[0].data() {
                assert!(p > 0.0 && p < 1.0);
            }
            if outs.len() == 2 {
                for &a in outs[1].data() {
                    assert!(a >= 0.0);
                }
            }
        }
    }

    #[test]
    fn pass_through_gate_reproduces_the_baseline_forward() {
        let gate = NeurogameLayerConfig {
            pass_through: true,
            ..NeurogameLayerConfig::default()
        };
        let base = build_cnn_age_gender_sized([20, 20, 1], &[4, 8], 16);
        let gated = build_neurogame_age_gender_sized([20, 20, 1], &[4, 8], 16, gate);
        let mut m1 = Model::<f64>::build(base, 11).unwrap();
        let mut m2 = Model::<f64>::build(gated, 11).unwrap();
        let x = Tensor::new(
            vec![2, 20, 20, 1],
            (0..800).map(|i| (i as f64 * 0.7).sin() * 0.5 + 0.5).collect(),
        )
        .unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let o1 = m1.forward(&x, &mut ctx(&mut r1, Mode::Infer)).unwrap();
        let o2 = m2.forward(&x, &mut ctx(&mut r2, Mode::Infer)).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = build_cnn_age_gender_sized([12, 12, 1], &[4], 8);
        let mut model = Model::<f32>::build(spec, 3).unwrap();
        model.iteration = 42;
        let path1 = dir.path().join("a.ckpt");
        let path2 = dir.path().join("b.ckpt");
        model
            .save_checkpoint(&path1, serde_json::json!({"note": "test"}))
            .unwrap();
        let (mut loaded, header) = Model::<f32>::load_checkpoint(&path1).unwrap();
        assert_eq!(header.iteration, 42);
        assert_eq!(header.precision, "f32");
        loaded
            .save_checkpoint(&path2, serde_json::json!({"note": "test"}))
            .unwrap();
        let a = std::fs::read(&path1).unwrap();
        let b = std::fs::read(&path2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_step_keeps_parameters_finite() {
        use crate::ops;
        let gate = NeurogameLayerConfig::default();
        let specs = [
            build_mlp_gender([12, 12, 1]),
            build_neurogame_gender([12, 12, 1], gate.clone()),
            build_cnn_age_gender_sized([12, 12, 1], &[4], 8),
            build_neurogame_age_gender_sized([12, 12, 1], &[4], 8, gate),
        ];
        for spec in specs {
            let mut model = Model::<f64>::build(spec, 5).unwrap();
            let mut adam = Adam::new(1e-3);
            let x = Tensor::new(
                vec![4, 12, 12, 1],
                (0..576).map(|i| ((i * 37 % 100) as f64) / 100.0).collect(),
            )
            .unwrap();
            let gender = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
            let age = Tensor::new(vec![4, 1], vec![20.0, 35.0, 60.0, 8.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let outs = model.forward(&x, &mut ctx(&mut rng, Mode::Train)).unwrap();
            let mut grads = vec![ops::binary_cross_entropy_grad(&outs[0], &gender).unwrap()];
            if outs.len() == 2 {
                grads.push(ops::mean_absolute_error_grad(&outs[1], &age).unwrap());
            }
            model.zero_grads();
            model.backward(&grads).unwrap();
            model.apply_adam(&mut adam).unwrap();
            model
                .visit_params(&mut |name, value, _| {
                    value
                        .ensure_finite("post-update")
                        .map_err(|_| Error::invalid("test", name.to_string()))
                })
                .unwrap();
        }
    }
}
