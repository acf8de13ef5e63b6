//! A small forward-only executor for [`ArchitectureDescriptor`] programs.
//!
//! Batch-norm layers that directly consume a convolution (and are its only
//! consumer) are folded into that convolution at load. The remaining
//! batch-norms run as a per-channel affine. Every kernel walks its data in a
//! fixed order, so results do not depend on the caller.
//!
//! Weight naming: `{layer}.weight` and `{layer}.bias` for convolutions
//! (`[out, in, k, k]`) and dense layers (`[out, in]`); `{layer}.gamma`,
//! `{layer}.beta`, `{layer}.mean`, `{layer}.var` for batch-norm.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchitectureDescriptor, Op, Shape};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("missing weight {0}")]
    MissingWeight(String),
    #[error("weight {name} has shape {got:?}, expected {expected:?}")]
    WeightShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("weight {name} holds {got} values for shape {shape:?}")]
    WeightLength { name: String, shape: Vec<usize>, got: usize },
    #[error("program output has width {actual}, manifest declares {declared}")]
    OutputWidth { declared: usize, actual: usize },
    #[error("input has shape {got:?}, program expects {expected:?}")]
    InputShape { expected: Shape, got: Shape },
    #[error("tensor shape {shape:?} does not match {len} values")]
    TensorLength { shape: Shape, len: usize },
    #[error("{0}")]
    Hook(String),
}

/// A single image in CHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, EngineError> {
        if shape.numel() != data.len() {
            return Err(EngineError::TensorLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.numel()] }
    }

    /// Channels `lo..hi` as a new tensor.
    pub fn channels(&self, lo: usize, hi: usize) -> Tensor {
        let plane = self.shape.h * self.shape.w;
        Tensor { shape: Shape::new(hi - lo, self.shape.h, self.shape.w), data: self.data[lo * plane..hi * plane].to_vec() }
    }

    /// Concatenates along channels; all parts must share `h × w`.
    pub fn concat_channels(parts: &[Tensor]) -> Tensor {
        let first = parts[0].shape;
        let c = parts.iter().map(|p| p.shape.c).sum();
        let mut data = Vec::with_capacity(c * first.h * first.w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor { shape: Shape::new(c, first.h, first.w), data }
    }
}

/// A named weight array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }
}

/// Executed operation counts: multiply-accumulates and one-FLOP elementwise
/// operations (logical batch-norm work is counted even when folded).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub macs: u64,
    pub elementwise: u64,
}

impl OpCounter {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

/// A convolution with any following batch-norm already folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    /// Elementwise ops charged per output element (descriptor bias plus any
    /// folded batch-norm).
    elementwise_per_out: u64,
}

impl ConvKernel {
    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(
            self.out_ch,
            (input.h + 2 * self.padding - self.kernel) / self.stride + 1,
            (input.w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Output channels `lo..hi` only. Each channel is computed identically
    /// regardless of the range requested.
    pub fn forward_channels(&self, input: &Tensor, lo: usize, hi: usize, counter: &mut OpCounter) -> Tensor {
        let out_shape = self.output_shape(input.shape);
        let (oh, ow) = (out_shape.h, out_shape.w);
        let k = self.kernel;
        let p = self.padding;
        let (ph, pw) = (input.shape.h + 2 * p, input.shape.w + 2 * p);
        let padded = if p == 0 {
            input.data.clone()
        } else {
            let mut buf = vec![0.0f32; self.in_ch * ph * pw];
            for c in 0..self.in_ch {
                for y in 0..input.shape.h {
                    let src = (c * input.shape.h + y) * input.shape.w;
                    let dst = (c * ph + y + p) * pw + p;
                    buf[dst..dst + input.shape.w].copy_from_slice(&input.data[src..src + input.shape.w]);
                }
            }
            buf
        };
        let mut out = vec![0.0f32; (hi - lo) * oh * ow];
        for (o_rel, o) in (lo..hi).enumerate() {
            let wo = &self.weight[o * self.in_ch * k * k..(o + 1) * self.in_ch * k * k];
            let b = self.bias.as_ref().map_or(0.0, |b| b[o]);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f32;
                    for c in 0..self.in_ch {
                        for ky in 0..k {
                            let row = (c * ph + y * self.stride + ky) * pw + x * self.stride;
                            let wrow = (c * k + ky) * k;
                            for kx in 0..k {
                                acc += wo[wrow + kx] * padded[row + kx];
                            }
                        }
                    }
                    out[(o_rel * oh + y) * ow + x] = acc + b;
                }
            }
        }
        let n_out = ((hi - lo) * oh * ow) as u64;
        counter.macs += n_out * (self.in_ch * k * k) as u64;
        counter.elementwise += n_out * self.elementwise_per_out;
        Tensor { shape: Shape::new(hi - lo, oh, ow), data: out }
    }

    pub fn forward(&self, input: &Tensor, counter: &mut OpCounter) -> Tensor {
        self.forward_channels(input, 0, self.out_ch, counter)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kernel {
    Conv(ConvKernel),
    Affine { scale: Vec<f32>, shift: Vec<f32> },
    Relu,
    Add,
    Pool,
    Dense { in_features: usize, out_features: usize, weight: Vec<f32>, bias: Option<Vec<f32>> },
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
struct Step {
    /// Descriptor layer index.
    layer: usize,
    kernel: Kernel,
    inputs: Vec<usize>,
    output: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub shapes: Vec<Shape>,
    pub output_width: usize,
    pub params: u64,
    pub folded_batchnorms: usize,
}

/// Descriptor plus weights, compiled for execution at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorProgram {
    descriptor: ArchitectureDescriptor,
    weights: BTreeMap<String, WeightArray>,
    output_width: usize,
    shapes: Vec<Shape>,
    steps: Vec<Step>,
    /// Node whose buffer holds each node's value (folded batch-norms alias
    /// their convolution).
    alias: Vec<usize>,
    folded: usize,
}

fn fetch<'a>(weights: &'a BTreeMap<String, WeightArray>, name: &str, shape: &[usize]) -> Result<&'a [f32], EngineError> {
    let w = weights.get(name).ok_or_else(|| EngineError::MissingWeight(String::from(name)))?;
    if w.shape != shape {
        return Err(EngineError::WeightShape { name: String::from(name), expected: shape.to_vec(), got: w.shape.clone() });
    }
    if w.data.len() != shape.iter().product::<usize>() {
        return Err(EngineError::WeightLength { name: String::from(name), shape: w.shape.clone(), got: w.data.len() });
    }
    Ok(&w.data)
}

fn bn_affine(weights: &BTreeMap<String, WeightArray>, name: &str, ch: usize) -> Result<(Vec<f64>, Vec<f64>), EngineError> {
    let gamma = fetch(weights, &format!("{name}.gamma"), &[ch])?;
    let beta = fetch(weights, &format!("{name}.beta"), &[ch])?;
    let mean = fetch(weights, &format!("{name}.mean"), &[ch])?;
    let var = fetch(weights, &format!("{name}.var"), &[ch])?;
    let scale: Vec<f64> = (0..ch).map(|c| gamma[c] as f64 / libm::sqrt(var[c] as f64 + BN_EPS)).collect();
    let shift: Vec<f64> = (0..ch).map(|c| beta[c] as f64 - mean[c] as f64 * scale[c]).collect();
    Ok((scale, shift))
}

impl TensorProgram {
    pub fn new(
        descriptor: ArchitectureDescriptor,
        weights: BTreeMap<String, WeightArray>,
        output_width: usize,
    ) -> Result<Self, EngineError> {
        let shapes = descriptor.shapes()?;
        let actual = shapes.last().expect("non-empty").numel();
        if actual != output_width {
            return Err(EngineError::OutputWidth { declared: output_width, actual });
        }
        let n_nodes = shapes.len();
        let mut consumers = vec![0usize; n_nodes];
        for (i, layer) in descriptor.layers.iter().enumerate() {
            for s in layer.sources(i) {
                consumers[s] += 1;
            }
        }

        let mut alias: Vec<usize> = (0..n_nodes).collect();
        let mut steps: Vec<Step> = Vec::with_capacity(descriptor.layers.len());
        // node -> index in `steps` of the conv that produced it
        let mut conv_step: BTreeMap<usize, usize> = BTreeMap::new();
        let mut folded = 0;
        for (i, layer) in descriptor.layers.iter().enumerate() {
            let node = i + 1;
            let inputs: Vec<usize> = layer.sources(i).iter().map(|&s| alias[s]).collect();
            let name = layer.name.as_str();
            let kernel = match layer.op {
                Op::Conv2d { in_ch, out_ch, kernel, stride, padding, bias } => {
                    let weight = fetch(&weights, &format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel])?.to_vec();
                    let bias_v = if bias { Some(fetch(&weights, &format!("{name}.bias"), &[out_ch])?.to_vec()) } else { None };
                    conv_step.insert(node, steps.len());
                    Kernel::Conv(ConvKernel {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                        weight,
                        bias: bias_v,
                        elementwise_per_out: bias as u64,
                    })
                }
                Op::BatchNorm { ch } => {
                    let (scale, shift) = bn_affine(&weights, name, ch)?;
                    let src = layer.sources(i)[0];
                    let foldable = consumers[src] == 1 && alias[src] == src;
                    match conv_step.get(&src) {
                        Some(&si) if foldable => {
                            let Kernel::Conv(conv) = &mut steps[si].kernel else { unreachable!() };
                            let per = conv.in_ch * conv.kernel * conv.kernel;
                            for o in 0..conv.out_ch {
                                for w in &mut conv.weight[o * per..(o + 1) * per] {
                                    *w = (*w as f64 * scale[o]) as f32;
                                }
                            }
                            let old = conv.bias.take().unwrap_or_else(|| vec![0.0; conv.out_ch]);
                            conv.bias = Some((0..conv.out_ch).map(|o| (old[o] as f64 * scale[o] + shift[o]) as f32).collect());
                            conv.elementwise_per_out += 1;
                            alias[node] = src;
                            folded += 1;
                            continue;
                        }
                        _ => Kernel::Affine {
                            scale: scale.iter().map(|&s| s as f32).collect(),
                            shift: shift.iter().map(|&s| s as f32).collect(),
                        },
                    }
                }
                Op::Relu => Kernel::Relu,
                Op::Add => Kernel::Add,
                Op::GlobalAvgPool => Kernel::Pool,
                Op::Concat => Kernel::Concat,
                Op::Dense { in_features, out_features, bias } => Kernel::Dense {
                    in_features,
                    out_features,
                    weight: fetch(&weights, &format!("{name}.weight"), &[out_features, in_features])?.to_vec(),
                    bias: if bias { Some(fetch(&weights, &format!("{name}.bias"), &[out_features])?.to_vec()) } else { None },
                },
            };
            steps.push(Step { layer: i, kernel, inputs, output: node });
        }
        Ok(Self { descriptor, weights, output_width, shapes, steps, alias, folded })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn weights(&self) -> &BTreeMap<String, WeightArray> {
        &self.weights
    }

    pub fn input_shape(&self) -> Shape {
        self.descriptor.input
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn validate(&self) -> Result<ShapeReport, EngineError> {
        Ok(ShapeReport {
            shapes: self.shapes.clone(),
            output_width: self.output_width,
            params: self.descriptor.count_params()?,
            folded_batchnorms: self.folded,
        })
    }

    /// Output channel counts of every convolution, in execution order.
    pub fn conv_layers(&self) -> Vec<(usize, Shape)> {
        self.steps
            .iter()
            .filter(|s| matches!(s.kernel, Kernel::Conv(_)))
            .map(|s| (s.layer, self.shapes[s.output]))
            .collect()
    }

    pub fn infer(&self, input: &Tensor) -> Result<Vec<f32>, EngineError> {
        Ok(self.infer_counted(input)?.0)
    }

    pub fn infer_counted(&self, input: &Tensor) -> Result<(Vec<f32>, OpCounter), EngineError> {
        let mut counter = OpCounter::default();
        let out = self.run(input, &mut counter, &mut |_, conv, x, counter| Ok(conv.forward(x, counter)))?;
        Ok((out, counter))
    }

    /// Runs the program, delegating every convolution to `conv_hook`, which
    /// receives the descriptor layer index, the folded kernel and its input,
    /// and must return the full output.
    pub fn run<F>(&self, input: &Tensor, counter: &mut OpCounter, conv_hook: &mut F) -> Result<Vec<f32>, EngineError>
    where
        F: FnMut(usize, &ConvKernel, &Tensor, &mut OpCounter) -> Result<Tensor, EngineError>,
    {
        if input.shape != self.descriptor.input {
            return Err(EngineError::InputShape { expected: self.descriptor.input, got: input.shape });
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.shapes.len()];
        values[0] = Some(input.clone());
        let mut remaining = vec![0usize; self.shapes.len()];
        for s in &self.steps {
            for &i in &s.inputs {
                remaining[i] += 1;
            }
        }
        let last = self.alias[self.shapes.len() - 1];
        for step in &self.steps {
            let arg = |k: usize| values[step.inputs[k]].as_ref().expect("computed before use");
            let out = match &step.kernel {
                Kernel::Conv(conv) => {
                    let out = conv_hook(step.layer, conv, arg(0), counter)?;
                    let expected = conv.output_shape(arg(0).shape);
                    if out.shape != expected || out.data.len() != expected.numel() {
                        return Err(EngineError::Hook(format!("conv hook returned {:?}, expected {:?}", out.shape, expected)));
                    }
                    out
                }
                Kernel::Affine { scale, shift } => {
                    let x = arg(0);
                    let plane = x.shape.h * x.shape.w;
                    let data = x.data.iter().enumerate().map(|(i, v)| v * scale[i / plane] + shift[i / plane]).collect();
                    counter.elementwise += x.data.len() as u64;
                    Tensor { shape: x.shape, data }
                }
                Kernel::Relu => {
                    let x = arg(0);
                    counter.elementwise += x.data.len() as u64;
                    Tensor { shape: x.shape, data: x.data.iter().map(|v| v.max(0.0)).collect() }
                }
                Kernel::Add => {
                    let (a, b) = (arg(0), arg(1));
                    counter.elementwise += a.data.len() as u64;
                    Tensor { shape: a.shape, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() }
                }
                Kernel::Pool => {
                    let x = arg(0);
                    let plane = x.shape.h * x.shape.w;
                    counter.elementwise += x.data.len() as u64;
                    let data = (0..x.shape.c)
                        .map(|c| {
                            let mut acc = 0.0f32;
                            for v in &x.data[c * plane..(c + 1) * plane] {
                                acc += v;
                            }
                            acc / plane as f32
                        })
                        .collect();
                    Tensor { shape: Shape::new(x.shape.c, 1, 1), data }
                }
                Kernel::Dense { in_features, out_features, weight, bias } => {
                    let x = arg(0);
                    counter.macs += (in_features * out_features) as u64;
                    if bias.is_some() {
                        counter.elementwise += *out_features as u64;
                    }
                    let data = (0..*out_features)
                        .map(|o| {
                            let mut acc = 0.0f32;
                            for (w, v) in weight[o * in_features..(o + 1) * in_features].iter().zip(&x.data) {
                                acc += w * v;
                            }
                            acc + bias.as_ref().map_or(0.0, |b| b[o])
                        })
                        .collect();
                    Tensor { shape: Shape::new(*out_features, 1, 1), data }
                }
                Kernel::Concat => {
                    let parts: Vec<Tensor> = (0..step.inputs.len()).map(|k| arg(k).clone()).collect();
                    Tensor::concat_channels(&parts)
                }
            };
            for &i in &step.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 && i != last {
                    values[i] = None;
                }
            }
            values[step.output] = Some(out);
        }
        Ok(values[last].take().expect("output computed").data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::DescriptorBuilder;

    fn weights(entries: &[(&str, Vec<usize>, Vec<f32>)]) -> BTreeMap<String, WeightArray> {
        entries.iter().map(|(n, s, d)| (String::from(*n), WeightArray::new(s.clone(), d.clone()))).collect()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut b = DescriptorBuilder::new(Shape::new(3, 4, 4));
        b.conv("c", 0, 3, 1, 1, false).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let prog = TensorProgram::new(b.finish(), weights(&[("c.weight", vec![3, 3, 1, 1], w)]), 48).unwrap();
        let input = Tensor::new(Shape::new(3, 4, 4), (0..48).map(|i| i as f32 * 0.37 - 4.0).collect()).unwrap();
        assert_eq!(prog.infer(&input).unwrap(), input.data);
    }

    #[test]
    fn zero_dense_returns_bias() {
        let mut b = DescriptorBuilder::new(Shape::new(2, 3, 3));
        let p = b.pool("p", 0).unwrap();
        b.dense("fc", p, 3, true).unwrap();
        let prog = TensorProgram::new(
            b.finish(),
            weights(&[("fc.weight", vec![3, 2], vec![0.0; 6]), ("fc.bias", vec![3], vec![0.5, -1.0, 2.0])]),
            3,
        )
        .unwrap();
        let input = Tensor::new(Shape::new(2, 3, 3), vec![1.5; 18]).unwrap();
        assert_eq!(prog.infer(&input).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn missing_and_misshaped_weights() {
        let mut b = DescriptorBuilder::new(Shape::new(2, 3, 3));
        b.conv("c", 0, 4, 3, 1, true).unwrap();
        let d = b.finish();
        let err = TensorProgram::new(d.clone(), weights(&[("c.weight", vec![4, 2, 3, 3], vec![0.0; 72])]), 36).unwrap_err();
        assert_eq!(err, EngineError::MissingWeight("c.bias".into()));
        let err = TensorProgram::new(d.clone(), weights(&[("c.weight", vec![4, 2, 1, 1], vec![0.0; 8])]), 36).unwrap_err();
        assert!(matches!(err, EngineError::WeightShape { .. }));
        let ok = weights(&[("c.weight", vec![4, 2, 3, 3], vec![0.0; 72]), ("c.bias", vec![4], vec![0.0; 4])]);
        let err = TensorProgram::new(d, ok, 35).unwrap_err();
        assert_eq!(err, EngineError::OutputWidth { declared: 35, actual: 36 });
    }

    #[test]
    fn conv_channel_mismatch_is_named() {
        let d = ArchitectureDescriptor {
            input: Shape::new(3, 4, 4),
            layers: vec![crate::arch::Layer {
                name: "stem".into(),
                op: Op::Conv2d { in_ch: 2, out_ch: 1, kernel: 1, stride: 1, padding: 0, bias: false },
                inputs: vec![],
            }],
        };
        let err = TensorProgram::new(d, BTreeMap::new(), 16).unwrap_err();
        assert_eq!(err, EngineError::Arch(ArchError::ChannelMismatch { layer: "stem".into(), expected: 2, got: 3 }));
    }

    #[test]
    fn input_shape_checked() {
        let mut b = DescriptorBuilder::new(Shape::new(1, 2, 2));
        b.relu("r", 0).unwrap();
        let prog = TensorProgram::new(b.finish(), BTreeMap::new(), 4).unwrap();
        assert!(matches!(prog.infer(&Tensor::zeros(Shape::new(1, 3, 3))), Err(EngineError::InputShape { .. })));
    }

    #[test]
    fn folded_bn_matches_explicit_affine() {
        // conv -> bn (foldable) and input -> bn (not foldable)
        let mut b = DescriptorBuilder::new(Shape::new(2, 3, 3));
        let bn0 = b.bn("bn0", 0).unwrap();
        let c = b.conv("c", bn0, 2, 3, 1, false).unwrap();
        b.bn("bn1", c).unwrap();
        let d = b.finish();
        let w: Vec<f32> = (0..36).map(|i| ((i * 7) % 11) as f32 * 0.1 - 0.5).collect();
        let ws = weights(&[
            ("bn0.gamma", vec![2], vec![1.5, 0.5]),
            ("bn0.beta", vec![2], vec![0.1, -0.2]),
            ("bn0.mean", vec![2], vec![0.3, 0.0]),
            ("bn0.var", vec![2], vec![2.0, 0.25]),
            ("c.weight", vec![2, 2, 3, 3], w.clone()),
            ("bn1.gamma", vec![2], vec![2.0, -1.0]),
            ("bn1.beta", vec![2], vec![0.5, 0.25]),
            ("bn1.mean", vec![2], vec![0.1, -0.1]),
            ("bn1.var", vec![2], vec![1.0, 4.0]),
        ]);
        let prog = TensorProgram::new(d.clone(), ws, 18).unwrap();
        assert_eq!(prog.validate().unwrap().folded_batchnorms, 1);
        let input = Tensor::new(Shape::new(2, 3, 3), (0..18).map(|i| (i as f32 - 9.0) * 0.2).collect()).unwrap();
        let (out, counter) = prog.infer_counted(&input).unwrap();
        assert_eq!(counter.flops(), d.count_flops().unwrap());

        // Naive f64 evaluation.
        let bn = |x: f64, g: f64, be: f64, m: f64, v: f64| (x - m) / (v + BN_EPS).sqrt() * g + be;
        let g0 = [(1.5, 0.1, 0.3, 2.0), (0.5, -0.2, 0.0, 0.25)];
        let g1 = [(2.0, 0.5, 0.1, 1.0), (-1.0, 0.25, -0.1, 4.0)];
        let x0: Vec<f64> = (0..18).map(|i| {
            let (g, be, m, v) = g0[i / 9];
            bn(input.data[i] as f64, g, be, m, v)
        }).collect();
        for o in 0..2 {
            for y in 0..3i32 {
                for xx in 0..3i32 {
                    let mut acc = 0.0f64;
                    for ci in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                if (0..3).contains(&iy) && (0..3).contains(&ix) {
                                    acc += w[((o * 2 + ci) * 3 + ky as usize) * 3 + kx as usize] as f64
                                        * x0[ci * 9 + (iy * 3 + ix) as usize];
                                }
                            }
                        }
                    }
                    let (g, be, m, v) = g1[o];
                    let expect = bn(acc, g, be, m, v);
                    let got = out[o * 9 + (y * 3 + xx) as usize] as f64;
                    assert!((expect - got).abs() < 1e-5, "{expect} vs {got}");
                }
            }
        }
    }

    #[test]
    fn channel_slices_match_full_conv() {
        let mut b = DescriptorBuilder::new(Shape::new(3, 5, 5));
        b.conv("c", 0, 4, 3, 2, true).unwrap();
        let w: Vec<f32> = (0..108).map(|i| ((i * 13) % 17) as f32 * 0.05 - 0.4).collect();
        let prog = TensorProgram::new(
            b.finish(),
            weights(&[("c.weight", vec![4, 3, 3, 3], w), ("c.bias", vec![4], vec![0.1, 0.2, 0.3, 0.4])]),
            36,
        )
        .unwrap();
        let input = Tensor::new(Shape::new(3, 5, 5), (0..75).map(|i| (i as f32).sin()).collect()).unwrap();
        let full = prog.infer(&input).unwrap();
        let mut counter = OpCounter::default();
        let split = prog
            .run(&input, &mut counter, &mut |_, conv, x, c| {
                let a = conv.forward_channels(x, 0, 2, c);
                let b = conv.forward_channels(x, 2, 4, c);
                Ok(Tensor::concat_channels(&[a, b]))
            })
            .unwrap();
        assert_eq!(full, split);
    }
}
