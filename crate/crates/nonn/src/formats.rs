//! On-disk formats. All binary formats are little-endian and start with a
//! four-byte magic followed by a `u32` version.
//!
//! * `NNTR` activation trace: `n_filters, n_images, n_classes`, then
//!   activities `f32[n_images × n_filters]`, labels `u32[n_images]`, head
//!   weights `f32[n_classes × n_filters]`, head bias `f32[n_classes]`.
//! * `NNCT` contribution trace: `n_students, n_images, n_classes`, widths
//!   `u32[n_students]`, outputs `f32[n_images × Σw]`, labels, head weights
//!   `f32[n_classes × Σw]`, head bias.
//! * `NNIM` image set: `n, c, h, w`, pixels `f32[n × c × h × w]`, labels.
//! * `NNFC` classifier head: `n_classes, width`, weights, bias.
//! * Program package: a directory holding `manifest.json` (descriptor and
//!   weight index) and `weights.bin` (raw f32, byte offsets from the index).
//! * Network export: `network.json` manifest plus an f32 upper-triangle dump.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nonn_core::arch::{ArchitectureDescriptor, Shape};
use nonn_core::engine::{EngineError, Tensor, TensorProgram, WeightArray};
use nonn_core::graph::{FilterNetwork, Rule};
use nonn_core::robustness::{ContributionTrace, RobustnessError};
use nonn_core::trace::{ActivationTrace, FcHead, TraceError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_MAGIC: &[u8; 4] = b"NNTR";
pub const CONTRIB_MAGIC: &[u8; 4] = b"NNCT";
pub const IMAGES_MAGIC: &[u8; 4] = b"NNIM";
pub const HEAD_MAGIC: &[u8; 4] = b"NNFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("byte {offset}: {field}: {reason}")]
    Malformed { offset: usize, field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| FormatError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Cursor over a byte buffer that reports offsets in its errors.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| FormatError::Malformed {
            offset: self.pos,
            field,
            reason: format!("needs {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(FormatError::Malformed {
                offset: at,
                field: "magic",
                reason: format!("expected {:?}, got {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(got)),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    pub fn version(&mut self) -> Result<(), FormatError> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(FormatError::Malformed { offset: at, field: "version", reason: format!("unsupported version {v}") });
        }
        Ok(())
    }

    pub fn dim(&mut self, field: &'static str) -> Result<usize, FormatError> {
        Ok(self.u32(field)? as usize)
    }

    /// Reads `n` f32 values, rejecting non-finite ones by offset.
    pub fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>, FormatError> {
        let len = n.checked_mul(4).ok_or_else(|| FormatError::Malformed { offset: self.pos, field, reason: "size overflow".into() })?;
        let start = self.pos;
        let raw = self.take(len, field)?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::Malformed { offset: start + 4 * i, field, reason: "non-finite value".into() });
        }
        Ok(values)
    }

    pub fn u32s(&mut self, n: usize, field: &'static str) -> Result<(usize, Vec<u32>), FormatError> {
        let len = n.checked_mul(4).ok_or_else(|| FormatError::Malformed { offset: self.pos, field, reason: "size overflow".into() })?;
        let start = self.pos;
        let raw = self.take(len, field)?;
        Ok((start, raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()))
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::Malformed {
                offset: self.pos,
                field: "trailer",
                reason: format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn dim(&mut self, v: usize) -> &mut Self {
        self.u32(u32::try_from(v).expect("dimension fits in u32"))
    }

    pub fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn u32s(&mut self, vs: &[u32]) -> &mut Self {
        for v in vs {
            self.u32(*v);
        }
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

fn check_labels(offset: usize, labels: &[u32], n_classes: usize) -> Result<(), FormatError> {
    if let Some(i) = labels.iter().position(|&l| l as usize >= n_classes) {
        return Err(FormatError::Malformed {
            offset: offset + 4 * i,
            field: "labels",
            reason: format!("label {} not below n_classes = {n_classes}", labels[i]),
        });
    }
    Ok(())
}

/// A loaded trace and the number of negative activities clamped to zero.
#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub trace: ActivationTrace,
    pub clamped: usize,
}

pub fn decode_trace(bytes: &[u8]) -> Result<LoadedTrace, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(TRACE_MAGIC)?;
    r.version()?;
    let header_at = r.offset();
    let n_filters = r.dim("n_filters")?;
    let n_images = r.dim("n_images")?;
    let n_classes = r.dim("n_classes")?;
    if n_filters < 2 || n_images < 1 || n_classes < 1 {
        return Err(FormatError::Malformed {
            offset: header_at,
            field: "header",
            reason: format!("need n_filters >= 2, n_images >= 1, n_classes >= 1; got {n_filters}, {n_images}, {n_classes}"),
        });
    }
    let activities = r.f32s(n_images * n_filters, "activities")?;
    let (labels_at, labels) = r.u32s(n_images, "labels")?;
    check_labels(labels_at, &labels, n_classes)?;
    let weights = r.f32s(n_classes * n_filters, "fc_weights")?;
    let bias = r.f32s(n_classes, "fc_bias")?;
    r.finish()?;
    let fc = FcHead::new(n_classes, n_filters, weights, bias)?;
    let (trace, clamped) = ActivationTrace::new(n_filters, n_images, activities, labels, fc)?;
    Ok(LoadedTrace { trace, clamped })
}

pub fn encode_trace(trace: &ActivationTrace) -> Vec<u8> {
    let mut w = Writer::new(TRACE_MAGIC);
    w.dim(trace.n_filters()).dim(trace.n_images()).dim(trace.n_classes());
    w.f32s(trace.activities()).u32s(trace.labels()).f32s(&trace.fc().weights).f32s(&trace.fc().bias);
    w.into_bytes()
}

pub fn load_trace(path: &Path) -> Result<LoadedTrace, FormatError> {
    decode_trace(&read_file(path)?)
}

pub fn save_trace(path: &Path, trace: &ActivationTrace) -> Result<(), FormatError> {
    write_file(path, &encode_trace(trace))
}

pub fn decode_contributions(bytes: &[u8]) -> Result<ContributionTrace, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CONTRIB_MAGIC)?;
    r.version()?;
    let n_students = r.dim("n_students")?;
    let n_images = r.dim("n_images")?;
    let n_classes = r.dim("n_classes")?;
    let (_, widths) = r.u32s(n_students, "widths")?;
    let widths: Vec<usize> = widths.into_iter().map(|w| w as usize).collect();
    let total: usize = widths.iter().sum();
    let outputs = r.f32s(n_images * total, "outputs")?;
    let (labels_at, labels) = r.u32s(n_images, "labels")?;
    check_labels(labels_at, &labels, n_classes)?;
    let weights = r.f32s(n_classes * total, "fc_weights")?;
    let bias = r.f32s(n_classes, "fc_bias")?;
    r.finish()?;
    let fc = FcHead::new(n_classes, total, weights, bias)?;
    Ok(ContributionTrace::new(widths, n_images, outputs, labels, fc)?)
}

pub fn encode_contributions(trace: &ContributionTrace) -> Vec<u8> {
    let mut w = Writer::new(CONTRIB_MAGIC);
    w.dim(trace.n_students()).dim(trace.n_images()).dim(trace.fc().n_classes);
    for &width in trace.widths() {
        w.dim(width);
    }
    w.f32s(trace.outputs()).u32s(trace.labels()).f32s(&trace.fc().weights).f32s(&trace.fc().bias);
    w.into_bytes()
}

pub fn load_contributions(path: &Path) -> Result<ContributionTrace, FormatError> {
    decode_contributions(&read_file(path)?)
}

pub fn save_contributions(path: &Path, trace: &ContributionTrace) -> Result<(), FormatError> {
    write_file(path, &encode_contributions(trace))
}

/// Labelled images sharing one CHW shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub shape: Shape,
    pub pixels: Vec<f32>,
    pub labels: Vec<u32>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, n: usize) -> Tensor {
        let size = self.shape.numel();
        Tensor { shape: self.shape, data: self.pixels[n * size..(n + 1) * size].to_vec() }
    }

    /// The first `n` images.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { shape: self.shape, pixels: self.pixels[..n * self.shape.numel()].to_vec(), labels: self.labels[..n].to_vec() }
    }
}

pub fn decode_images(bytes: &[u8]) -> Result<ImageSet, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(IMAGES_MAGIC)?;
    r.version()?;
    let n = r.dim("n_images")?;
    let shape = Shape::new(r.dim("channels")?, r.dim("height")?, r.dim("width")?);
    let pixels = r.f32s(n * shape.numel(), "pixels")?;
    let (_, labels) = r.u32s(n, "labels")?;
    r.finish()?;
    Ok(ImageSet { shape, pixels, labels })
}

pub fn encode_images(images: &ImageSet) -> Vec<u8> {
    let mut w = Writer::new(IMAGES_MAGIC);
    w.dim(images.len()).dim(images.shape.c).dim(images.shape.h).dim(images.shape.w);
    w.f32s(&images.pixels).u32s(&images.labels);
    w.into_bytes()
}

pub fn load_images(path: &Path) -> Result<ImageSet, FormatError> {
    decode_images(&read_file(path)?)
}

pub fn save_images(path: &Path, images: &ImageSet) -> Result<(), FormatError> {
    write_file(path, &encode_images(images))
}

pub fn decode_head(bytes: &[u8]) -> Result<FcHead, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(HEAD_MAGIC)?;
    r.version()?;
    let n_classes = r.dim("n_classes")?;
    let width = r.dim("width")?;
    let weights = r.f32s(n_classes * width, "fc_weights")?;
    let bias = r.f32s(n_classes, "fc_bias")?;
    r.finish()?;
    Ok(FcHead::new(n_classes, width, weights, bias)?)
}

pub fn encode_head(head: &FcHead) -> Vec<u8> {
    let mut w = Writer::new(HEAD_MAGIC);
    w.dim(head.n_classes).dim(head.width).f32s(&head.weights).f32s(&head.bias);
    w.into_bytes()
}

pub fn load_head(path: &Path) -> Result<FcHead, FormatError> {
    decode_head(&read_file(path)?)
}

pub fn save_head(path: &Path, head: &FcHead) -> Result<(), FormatError> {
    write_file(path, &encode_head(head))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramManifest {
    pub format: String,
    pub version: u32,
    pub descriptor: ArchitectureDescriptor,
    pub output_width: usize,
    pub weights: Vec<WeightEntry>,
}

pub const PROGRAM_FORMAT: &str = "nonn-program";

/// Manifest and weight blob for a program, with weights laid out in name order.
pub fn encode_program(program: &TensorProgram) -> (ProgramManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, w) in program.weights() {
        entries.push(WeightEntry { name: name.clone(), shape: w.shape.clone(), offset: blob.len(), len: w.data.len() });
        for v in &w.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ProgramManifest {
        format: PROGRAM_FORMAT.into(),
        version: VERSION,
        descriptor: program.descriptor().clone(),
        output_width: program.output_width(),
        weights: entries,
    };
    (manifest, blob)
}

pub fn decode_program(manifest: ProgramManifest, blob: &[u8]) -> Result<TensorProgram, FormatError> {
    if manifest.format != PROGRAM_FORMAT || manifest.version != VERSION {
        return Err(FormatError::Invalid(format!("unsupported program format {} v{}", manifest.format, manifest.version)));
    }
    let mut weights = BTreeMap::new();
    for e in manifest.weights {
        let end = e.len.checked_mul(4).and_then(|b| b.checked_add(e.offset)).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(FormatError::Malformed { offset: e.offset, field: "weights", reason: format!("{} runs past the blob", e.name) });
        };
        let mut r = Reader::new(&blob[e.offset..end]);
        let data = r.f32s(e.len, "weights").map_err(|err| match err {
            FormatError::Malformed { offset, field, reason } => FormatError::Malformed { offset: e.offset + offset, field, reason },
            other => other,
        })?;
        weights.insert(e.name, WeightArray::new(e.shape, data));
    }
    Ok(TensorProgram::new(manifest.descriptor, weights, manifest.output_width)?)
}

pub fn save_program(dir: &Path, program: &TensorProgram) -> Result<(), FormatError> {
    let (manifest, blob) = encode_program(program);
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_file(&dir.join("weights.bin"), &blob)
}

pub fn load_program(dir: &Path) -> Result<TensorProgram, FormatError> {
    let manifest: ProgramManifest = read_json(&dir.join("manifest.json"))?;
    let blob = read_file(&dir.join("weights.bin"))?;
    decode_program(manifest, &blob)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub n_nodes: usize,
    pub rule: Rule,
    pub eps_act: f64,
    /// File holding `n_nodes · (n_nodes − 1) / 2` little-endian f32 values,
    /// row-major over `i < j`.
    pub weights_file: String,
}

/// Writes `network.json` and `network.bin` into `dir`.
pub fn save_network(dir: &Path, net: &FilterNetwork) -> Result<NetworkManifest, FormatError> {
    let manifest = NetworkManifest { n_nodes: net.n_nodes(), rule: net.rule, eps_act: net.eps_act, weights_file: "network.bin".into() };
    let mut blob = Vec::new();
    for w in net.upper_triangle() {
        blob.extend_from_slice(&(w as f32).to_le_bytes());
    }
    write_file(&dir.join(&manifest.weights_file), &blob)?;
    write_json(&dir.join("network.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_network(dir: &Path) -> Result<FilterNetwork, FormatError> {
    let manifest: NetworkManifest = read_json(&dir.join("network.json"))?;
    let blob = read_file(&dir.join(&manifest.weights_file))?;
    let n = manifest.n_nodes;
    let mut r = Reader::new(&blob);
    let upper: Vec<f64> = r.f32s(n * n.saturating_sub(1) / 2, "weights")?.into_iter().map(f64::from).collect();
    r.finish()?;
    FilterNetwork::from_upper_triangle(n, &upper, manifest.rule, manifest.eps_act)
        .ok_or_else(|| FormatError::Invalid("network weights must be non-negative".into()))
}
