//! Architecture descriptors and their parameter / FLOP counts.
//!
//! A descriptor is an ordered layer list over a small DAG. Node 0 is the
//! network input and node `i + 1` is the output of layer `i`; a layer with no
//! explicit `inputs` reads the node right before it.
//!
//! Counting conventions: one multiply-accumulate is two FLOPs; a bias add,
//! batch-norm, ReLU and residual add each cost one FLOP per output element,
//! global average pooling one per input element; concatenation is free. Parameters are weights, biases
//! and the two affine batch-norm vectors (running statistics are buffers).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchError {
    #[error("layer {layer}: expected {expected} input channels, got {got}")]
    ChannelMismatch { layer: String, expected: usize, got: usize },
    #[error("layer {layer}: {reason}")]
    Shape { layer: String, reason: String },
    #[error("layer {layer}: input node {node} does not precede it")]
    BadInput { layer: String, node: usize },
    #[error("WRN depth {0} is invalid: (depth - 4) must be a positive multiple of 6")]
    InvalidDepth(usize),
    #[error("descriptor has no layers")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Op {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    #[serde(rename = "batchnorm")]
    BatchNorm { ch: usize },
    Relu,
    /// Residual add of exactly two inputs.
    Add,
    GlobalAvgPool,
    Dense { in_features: usize, out_features: usize, bias: bool },
    /// Channel concatenation.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
}

impl Layer {
    /// Node ids this layer (at position `index`) reads.
    pub fn sources(&self, index: usize) -> Vec<usize> {
        if self.inputs.is_empty() {
            vec![index]
        } else {
            self.inputs.clone()
        }
    }
}

/// Cost of one layer. `macs` count multiply-accumulates; `elementwise`
/// counts the one-FLOP-per-element work (including bias adds).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl ArchitectureDescriptor {
    /// Shape of every node (input first), or the first inconsistency found.
    pub fn shapes(&self) -> Result<Vec<Shape>, ArchError> {
        if self.layers.is_empty() {
            return Err(ArchError::Empty);
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input);
        for (i, layer) in self.layers.iter().enumerate() {
            let srcs = layer.sources(i);
            if let Some(&bad) = srcs.iter().find(|&&s| s > i) {
                return Err(ArchError::BadInput { layer: layer.name.clone(), node: bad });
            }
            let ins: Vec<Shape> = srcs.iter().map(|&s| shapes[s]).collect();
            let out = output_shape(layer, &ins)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape, ArchError> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    pub fn layer_costs(&self) -> Result<Vec<LayerCost>, ArchError> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let first_in = shapes[l.sources(i)[0]];
                layer_cost(&l.op, first_in, shapes[i + 1])
            })
            .collect())
    }

    pub fn count_params(&self) -> Result<u64, ArchError> {
        Ok(self.layer_costs()?.iter().map(|c| c.params).sum())
    }

    /// FLOPs at the declared input size.
    pub fn count_flops(&self) -> Result<u64, ArchError> {
        Ok(self.layer_costs()?.iter().map(LayerCost::flops).sum())
    }

    /// FLOPs with the input spatial size replaced by `h × w`.
    pub fn count_flops_at(&self, h: usize, w: usize) -> Result<u64, ArchError> {
        let mut d = self.clone();
        d.input.h = h;
        d.input.w = w;
        d.count_flops()
    }

    pub fn cost(&self) -> Result<Cost, ArchError> {
        let costs = self.layer_costs()?;
        Ok(Cost { params: costs.iter().map(|c| c.params).sum(), flops: costs.iter().map(LayerCost::flops).sum() })
    }
}

fn shape_err(layer: &Layer, reason: String) -> ArchError {
    ArchError::Shape { layer: layer.name.clone(), reason }
}

fn output_shape(layer: &Layer, ins: &[Shape]) -> Result<Shape, ArchError> {
    let single = || -> Result<Shape, ArchError> {
        match ins {
            [s] => Ok(*s),
            _ => Err(shape_err(layer, format!("expects one input, got {}", ins.len()))),
        }
    };
    match layer.op {
        Op::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
            let s = single()?;
            if s.c != in_ch {
                return Err(ArchError::ChannelMismatch { layer: layer.name.clone(), expected: in_ch, got: s.c });
            }
            if kernel == 0 || stride == 0 || out_ch == 0 {
                return Err(shape_err(layer, "kernel, stride and out_ch must be positive".to_string()));
            }
            if s.h + 2 * padding < kernel || s.w + 2 * padding < kernel {
                return Err(shape_err(layer, format!("kernel {kernel} larger than padded input {}x{}", s.h, s.w)));
            }
            Ok(Shape::new(out_ch, (s.h + 2 * padding - kernel) / stride + 1, (s.w + 2 * padding - kernel) / stride + 1))
        }
        Op::BatchNorm { ch } => {
            let s = single()?;
            if s.c != ch {
                return Err(ArchError::ChannelMismatch { layer: layer.name.clone(), expected: ch, got: s.c });
            }
            Ok(s)
        }
        Op::Relu => single(),
        Op::GlobalAvgPool => {
            let s = single()?;
            Ok(Shape::new(s.c, 1, 1))
        }
        Op::Dense { in_features, out_features, .. } => {
            let s = single()?;
            if s.numel() != in_features {
                return Err(ArchError::ChannelMismatch { layer: layer.name.clone(), expected: in_features, got: s.numel() });
            }
            Ok(Shape::new(out_features, 1, 1))
        }
        Op::Add => match ins {
            [a, b] if a == b => Ok(*a),
            [a, b] => Err(shape_err(layer, format!("add of {:?} and {:?}", a, b))),
            _ => Err(shape_err(layer, format!("add expects two inputs, got {}", ins.len()))),
        },
        Op::Concat => {
            let first = ins.first().ok_or_else(|| shape_err(layer, "concat of nothing".to_string()))?;
            if ins.iter().any(|s| s.h != first.h || s.w != first.w) {
                return Err(shape_err(layer, "concat inputs differ in spatial size".to_string()));
            }
            Ok(Shape::new(ins.iter().map(|s| s.c).sum(), first.h, first.w))
        }
    }
}

fn layer_cost(op: &Op, input: Shape, out: Shape) -> LayerCost {
    let spatial = (out.h * out.w) as u64;
    let elems = out.numel() as u64;
    match *op {
        Op::Conv2d { in_ch, out_ch, kernel, bias, .. } => {
            let per_out = (kernel * kernel * in_ch) as u64;
            LayerCost {
                params: per_out * out_ch as u64 + if bias { out_ch as u64 } else { 0 },
                macs: per_out * out_ch as u64 * spatial,
                elementwise: if bias { elems } else { 0 },
            }
        }
        Op::BatchNorm { ch } => LayerCost { params: 2 * ch as u64, macs: 0, elementwise: elems },
        Op::Relu | Op::Add => LayerCost { params: 0, macs: 0, elementwise: elems },
        Op::GlobalAvgPool => LayerCost { params: 0, macs: 0, elementwise: input.numel() as u64 },
        Op::Dense { in_features, out_features, bias } => LayerCost {
            params: (in_features * out_features) as u64 + if bias { out_features as u64 } else { 0 },
            macs: (in_features * out_features) as u64,
            elementwise: if bias { out_features as u64 } else { 0 },
        },
        Op::Concat => LayerCost::default(),
    }
}

/// Incremental descriptor construction. Every method returns the node id of
/// the layer it appended.
#[derive(Debug, Clone)]
pub struct DescriptorBuilder {
    desc: ArchitectureDescriptor,
    shapes: Vec<Shape>,
}

impl DescriptorBuilder {
    pub fn new(input: Shape) -> Self {
        Self { desc: ArchitectureDescriptor { input, layers: Vec::new() }, shapes: vec![input] }
    }

    pub fn last(&self) -> usize {
        self.desc.layers.len()
    }

    pub fn shape(&self, node: usize) -> Shape {
        self.shapes[node]
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: &[usize]) -> Result<usize, ArchError> {
        let index = self.desc.layers.len();
        let inputs = if inputs == [index] { Vec::new() } else { inputs.to_vec() };
        let layer = Layer { name: name.into(), op, inputs };
        let srcs = layer.sources(index);
        if let Some(&bad) = srcs.iter().find(|&&s| s > index) {
            return Err(ArchError::BadInput { layer: layer.name, node: bad });
        }
        let ins: Vec<Shape> = srcs.iter().map(|&s| self.shapes[s]).collect();
        let out = output_shape(&layer, &ins)?;
        self.desc.layers.push(layer);
        self.shapes.push(out);
        Ok(index + 1)
    }

    pub fn conv(&mut self, name: &str, from: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool) -> Result<usize, ArchError> {
        let in_ch = self.shapes[from].c;
        self.push(name, Op::Conv2d { in_ch, out_ch, kernel, stride, padding: kernel / 2, bias }, &[from])
    }

    pub fn bn(&mut self, name: &str, from: usize) -> Result<usize, ArchError> {
        let ch = self.shapes[from].c;
        self.push(name, Op::BatchNorm { ch }, &[from])
    }

    pub fn relu(&mut self, name: &str, from: usize) -> Result<usize, ArchError> {
        self.push(name, Op::Relu, &[from])
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> Result<usize, ArchError> {
        self.push(name, Op::Add, &[a, b])
    }

    pub fn pool(&mut self, name: &str, from: usize) -> Result<usize, ArchError> {
        self.push(name, Op::GlobalAvgPool, &[from])
    }

    pub fn dense(&mut self, name: &str, from: usize, out_features: usize, bias: bool) -> Result<usize, ArchError> {
        let in_features = self.shapes[from].numel();
        self.push(name, Op::Dense { in_features, out_features, bias }, &[from])
    }

    pub fn concat(&mut self, name: &str, inputs: &[usize]) -> Result<usize, ArchError> {
        self.push(name, Op::Concat, inputs)
    }

    pub fn finish(self) -> ArchitectureDescriptor {
        self.desc
    }
}

/// Pre-activation wide-residual backbone: a 3×3 stem followed by three groups
/// of basic blocks with strides 1, 2, 2, closed by batch-norm and ReLU.
/// Returns the builder positioned at the final ReLU.
pub fn wrn_backbone(depth: usize, stem: usize, widths: [usize; 3], input: Shape) -> Result<DescriptorBuilder, ArchError> {
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(ArchError::InvalidDepth(depth));
    }
    let blocks = (depth - 4) / 6;
    let mut b = DescriptorBuilder::new(input);
    let mut x = b.conv("conv0", 0, stem, 3, 1, false)?;
    for (g, (&width, stride)) in widths.iter().zip([1usize, 2, 2]).enumerate() {
        for k in 0..blocks {
            let stride = if k == 0 { stride } else { 1 };
            let p = format!("g{g}.b{k}");
            let in_ch = b.shape(x).c;
            let bn1 = b.bn(&format!("{p}.bn1"), x)?;
            let act = b.relu(&format!("{p}.relu1"), bn1)?;
            let shortcut = if in_ch == width && stride == 1 {
                x
            } else {
                b.conv(&format!("{p}.shortcut"), act, width, 1, stride, false)?
            };
            let c1 = b.conv(&format!("{p}.conv1"), act, width, 3, stride, false)?;
            let bn2 = b.bn(&format!("{p}.bn2"), c1)?;
            let r2 = b.relu(&format!("{p}.relu2"), bn2)?;
            let c2 = b.conv(&format!("{p}.conv2"), r2, width, 3, 1, false)?;
            x = b.add(&format!("{p}.add"), c2, shortcut)?;
        }
    }
    let bn = b.bn("bn_final", x)?;
    b.relu("relu_final", bn)?;
    Ok(b)
}

/// WRN-`depth`-`width_mult` classifier with groups `[16w, 32w, 64w]`.
pub fn wrn(depth: usize, width_mult: usize, n_classes: usize, input_hw: usize) -> Result<ArchitectureDescriptor, ArchError> {
    let w = width_mult;
    let mut b = wrn_backbone(depth, 16, [16 * w, 32 * w, 64 * w], Shape::new(3, input_hw, input_hw))?;
    let pooled = b.pool("pool", b.last())?;
    b.dense("fc", pooled, n_classes, true)?;
    Ok(b.finish())
}

/// A student backbone; instantiating it for a partition of size `p` appends
/// a bias-free 1×1 adapter to `p` channels and a global average pool, so the
/// student's output is a `p`-vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTemplate {
    pub backbone: ArchitectureDescriptor,
}

impl StudentTemplate {
    /// 16-layer wide-residual student for 32×32 RGB input with groups
    /// `[32, 64, 80]`: under 0.43M parameters and 167M FLOPs for adapters up
    /// to 46 channels.
    pub fn cifar10() -> Self {
        let b = wrn_backbone(16, 16, [32, 64, 80], Shape::new(3, 32, 32)).expect("valid depth");
        Self { backbone: b.finish() }
    }

    pub fn instantiate(&self, partition_size: usize) -> Result<ArchitectureDescriptor, ArchError> {
        let mut desc = self.backbone.clone();
        if partition_size == 0 {
            return Ok(desc);
        }
        let c = desc.output_shape()?.c;
        desc.layers.push(Layer {
            name: "adapter".to_string(),
            op: Op::Conv2d { in_ch: c, out_ch: partition_size, kernel: 1, stride: 1, padding: 0, bias: false },
            inputs: Vec::new(),
        });
        desc.layers.push(Layer { name: "pool".to_string(), op: Op::GlobalAvgPool, inputs: Vec::new() });
        Ok(desc)
    }

    /// `(params, flops)` of the student serving a partition of `partition_size` filters.
    pub fn student_cost(&self, partition_size: usize) -> Result<Cost, ArchError> {
        self.instantiate(partition_size)?.cost()
    }
}
