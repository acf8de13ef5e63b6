//! Analytic latency and energy model for distributed deployments.
//!
//! Per image, latency is the slowest device's compute time plus the
//! serialized time of every transfer (`bytes / bandwidth + messages ·
//! overhead`), optionally discounted by an overlap factor. Energy is charged
//! per FLOP and per byte sent or received on each node.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchitectureDescriptor, Op};

/// Bytes of framing in front of every wire message.
pub const FRAME_HEADER_BYTES: u64 = 9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("layer {layer} has {out_ch} output channels, not divisible by {n_devices}")]
    Indivisible { layer: String, out_ch: usize, n_devices: usize },
    #[error("deployment references device {0} but only {1} profiles were given")]
    MissingProfile(usize, usize),
    #[error("profile {0} has a non-positive field")]
    BadProfile(String),
    #[error("calibration target leaves no time for payload transfer")]
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub flops_per_second: f64,
    /// Bytes per second.
    pub link_bandwidth: f64,
    /// Seconds per message.
    pub per_message_overhead: f64,
    pub joules_per_flop: f64,
    pub joules_per_byte: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            self.flops_per_second,
            self.link_bandwidth,
            self.per_message_overhead,
            self.joules_per_flop,
            self.joules_per_byte,
        ];
        if fields.iter().all(|f| *f > 0.0 && f.is_finite()) {
            Ok(())
        } else {
            Err(SimError::BadProfile(self.name.clone()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommPattern {
    Nonn,
    HorizontalSplit,
}

/// Node 0 is the coordinator; devices are `1..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub bytes: u64,
    pub messages: u64,
}

/// Per-image work: FLOPs on each node (coordinator first) and the transfers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub pattern: CommPattern,
    pub node_flops: Vec<u64>,
    pub transfers: Vec<Transfer>,
}

impl Deployment {
    /// One student per device. The coordinator broadcasts the input and
    /// applies the head to the concatenated student outputs.
    pub fn nonn(student_flops: &[u64], input_bytes: u64, output_widths: &[usize], head_flops: u64) -> Self {
        let mut node_flops = vec![head_flops];
        node_flops.extend_from_slice(student_flops);
        let mut transfers = Vec::new();
        for (i, &w) in output_widths.iter().enumerate() {
            transfers.push(Transfer { from: 0, to: i + 1, bytes: input_bytes, messages: 1 });
            transfers.push(Transfer { from: i + 1, to: 0, bytes: 4 * w as u64, messages: 1 });
        }
        Self { pattern: CommPattern::Nonn, node_flops, transfers }
    }

    /// Channel-wise split of every layer over `n_devices`; compute divides
    /// evenly and each convolution output is exchanged all-to-all.
    pub fn horizontal_split(desc: &ArchitectureDescriptor, n_devices: usize) -> Result<Self, SimError> {
        let flops = desc.count_flops()?;
        let mut node_flops = vec![0];
        node_flops.extend(core::iter::repeat(flops / n_devices as u64).take(n_devices));
        let input_bytes = 4 * desc.input.numel() as u64;
        let mut transfers: Vec<Transfer> = (0..n_devices).map(|d| Transfer { from: 0, to: d + 1, bytes: input_bytes, messages: 1 }).collect();
        for layer in split_exchange(desc, n_devices)? {
            for from in 0..n_devices {
                for to in 0..n_devices {
                    if from != to {
                        transfers.push(Transfer { from: from + 1, to: to + 1, bytes: layer.bytes_per_pair, messages: 1 });
                    }
                }
            }
        }
        let out = desc.output_shape()?.numel() as u64;
        transfers.push(Transfer { from: 1, to: 0, bytes: 4 * out, messages: 1 });
        Ok(Self { pattern: CommPattern::HorizontalSplit, node_flops, transfers })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_flops.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.bytes).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.transfers.iter().map(|t| t.messages).sum()
    }
}

/// Channel-slice traffic after one convolution of a horizontal split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitExchange {
    pub layer: String,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    /// `(out_ch / n) · h · w · 4`, sent by each device to each other device.
    pub bytes_per_pair: u64,
    /// `n · (n − 1) · bytes_per_pair`.
    pub total_bytes: u64,
}

/// Per-convolution exchange volume for an `n_devices`-way horizontal split.
pub fn split_exchange(desc: &ArchitectureDescriptor, n_devices: usize) -> Result<Vec<SplitExchange>, SimError> {
    let shapes = desc.shapes()?;
    let n = n_devices as u64;
    let mut out = Vec::new();
    for (i, layer) in desc.layers.iter().enumerate() {
        if let Op::Conv2d { out_ch, .. } = layer.op {
            if out_ch % n_devices != 0 {
                return Err(SimError::Indivisible { layer: layer.name.clone(), out_ch, n_devices });
            }
            let s = shapes[i + 1];
            let bytes_per_pair = (out_ch / n_devices * s.h * s.w * 4) as u64;
            out.push(SplitExchange {
                layer: layer.name.clone(),
                out_ch,
                h: s.h,
                w: s.w,
                bytes_per_pair,
                total_bytes: n * (n - 1) * bytes_per_pair,
            });
        }
    }
    Ok(out)
}

/// Upstream bytes one image costs in NoNN mode: every student returns its
/// output vector as f32 in one framed message.
pub fn nonn_response_bytes(widths: &[usize]) -> u64 {
    widths.iter().map(|&w| 4 * w as u64 + FRAME_HEADER_BYTES).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBreakdown {
    pub compute_seconds: f64,
    pub comm_seconds: f64,
    pub bytes: u64,
    pub energy_joules: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Per batch.
    pub latency_seconds: f64,
    pub compute_seconds: f64,
    pub comm_seconds: f64,
    pub nodes: Vec<NodeBreakdown>,
    pub total_energy_joules: f64,
    /// Node with the longest compute time.
    pub bottleneck: usize,
    pub images: u64,
}

/// `profiles[i]` describes node `i` (coordinator first). `overlap` in
/// `[0, 1]` hides that fraction of communication behind compute.
pub fn estimate(deployment: &Deployment, profiles: &[DeviceProfile], images: u64, overlap: f64) -> Result<Estimate, SimError> {
    let n = deployment.n_nodes();
    if profiles.len() < n {
        return Err(SimError::MissingProfile(n - 1, profiles.len()));
    }
    for p in &profiles[..n] {
        p.validate()?;
    }
    let overlap = overlap.clamp(0.0, 1.0);
    let mut nodes: Vec<NodeBreakdown> = deployment
        .node_flops
        .iter()
        .zip(profiles)
        .map(|(&f, p)| NodeBreakdown {
            compute_seconds: f as f64 / p.flops_per_second,
            comm_seconds: 0.0,
            bytes: 0,
            energy_joules: f as f64 * p.joules_per_flop,
        })
        .collect();
    let mut comm = 0.0;
    for t in &deployment.transfers {
        if t.from >= n || t.to >= n {
            return Err(SimError::MissingProfile(t.from.max(t.to), n));
        }
        let (a, b) = (&profiles[t.from], &profiles[t.to]);
        let seconds = t.bytes as f64 / a.link_bandwidth.min(b.link_bandwidth)
            + t.messages as f64 * a.per_message_overhead.max(b.per_message_overhead);
        comm += seconds;
        for (end, p) in [(t.from, a), (t.to, b)] {
            nodes[end].comm_seconds += seconds;
            nodes[end].bytes += t.bytes;
            nodes[end].energy_joules += t.bytes as f64 * p.joules_per_byte;
        }
    }
    let (bottleneck, compute) = nodes
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bc), (i, nd)| if nd.compute_seconds > bc { (i, nd.compute_seconds) } else { (bi, bc) });
    let per_image = compute + (1.0 - overlap) * comm;
    let images_f = images as f64;
    for nd in nodes.iter_mut() {
        nd.energy_joules *= images_f;
    }
    Ok(Estimate {
        latency_seconds: per_image * images_f,
        compute_seconds: compute * images_f,
        comm_seconds: comm * images_f,
        total_energy_joules: nodes.iter().map(|n| n.energy_joules).sum(),
        nodes,
        bottleneck,
        images,
    })
}

/// Profile under which `deployment`'s slowest node computes in
/// `compute_seconds` and its transfers take `comm_seconds` in total, with
/// the given per-message overhead. Energy coefficients are copied from `base`.
pub fn calibrate(
    deployment: &Deployment,
    compute_seconds: f64,
    comm_seconds: f64,
    per_message_overhead: f64,
    base: &DeviceProfile,
) -> Result<DeviceProfile, SimError> {
    let max_flops = deployment.node_flops.iter().copied().max().unwrap_or(0) as f64;
    let payload_seconds = comm_seconds - deployment.total_messages() as f64 * per_message_overhead;
    if !(payload_seconds > 0.0) || !(compute_seconds > 0.0) {
        return Err(SimError::Infeasible);
    }
    Ok(DeviceProfile {
        name: base.name.clone(),
        flops_per_second: max_flops / compute_seconds,
        link_bandwidth: deployment.total_bytes() as f64 / payload_seconds,
        per_message_overhead,
        joules_per_flop: base.joules_per_flop,
        joules_per_byte: base.joules_per_byte,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Students moved to the big device.
    pub on_big: usize,
    pub latency_seconds: f64,
    pub energy_joules: f64,
    /// Slowest device latency, excluding the coordinator term.
    pub slowest_device_seconds: f64,
    /// `"big"`, `"small"`, or `"none"`.
    pub bottleneck: String,
}

/// Inputs for moving students from small devices onto one big device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_students: usize,
    pub student_flops: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub head_flops: u64,
    pub small: DeviceProfile,
    pub big: DeviceProfile,
    pub coordinator: DeviceProfile,
}

/// For `s = 0..=n_students`, the big device runs `s` students back to back
/// and each of the remaining small devices runs one. A device's latency is
/// its compute plus its own transfers; total latency adds the coordinator's
/// head computation to the slowest device.
pub fn heterogeneous_sweep(cfg: &SweepConfig) -> Vec<SweepPoint> {
    let link = |p: &DeviceProfile, q: &DeviceProfile, bytes: u64| {
        bytes as f64 / p.link_bandwidth.min(q.link_bandwidth) + p.per_message_overhead.max(q.per_message_overhead)
    };
    let per_student_comm = |p: &DeviceProfile| link(p, &cfg.coordinator, cfg.input_bytes) + link(p, &cfg.coordinator, cfg.output_bytes);
    let per_student_bytes = cfg.input_bytes + cfg.output_bytes;
    let coordinator_seconds = cfg.head_flops as f64 / cfg.coordinator.flops_per_second;
    (0..=cfg.n_students)
        .map(|s| {
            let small_n = cfg.n_students - s;
            let small_lat = cfg.student_flops as f64 / cfg.small.flops_per_second + per_student_comm(&cfg.small);
            let big_lat = s as f64 * (cfg.student_flops as f64 / cfg.big.flops_per_second + per_student_comm(&cfg.big));
            let small_lat = if small_n > 0 { small_lat } else { 0.0 };
            let (slowest, bottleneck) = if s == 0 && small_n == 0 {
                (0.0, "none")
            } else if big_lat >= small_lat {
                (big_lat, "big")
            } else {
                (small_lat, "small")
            };
            let energy = |p: &DeviceProfile, students: usize| {
                students as f64 * (cfg.student_flops as f64 * p.joules_per_flop + per_student_bytes as f64 * p.joules_per_byte)
            };
            let coordinator_energy = cfg.head_flops as f64 * cfg.coordinator.joules_per_flop
                + (cfg.n_students as u64 * per_student_bytes) as f64 * cfg.coordinator.joules_per_byte;
            SweepPoint {
                on_big: s,
                latency_seconds: slowest + coordinator_seconds,
                energy_joules: energy(&cfg.small, small_n) + energy(&cfg.big, s) + coordinator_energy,
                slowest_device_seconds: slowest,
                bottleneck: String::from(bottleneck),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::wrn;

    fn profile(fps: f64, bw: f64, overhead: f64) -> DeviceProfile {
        DeviceProfile {
            name: "dev".into(),
            flops_per_second: fps,
            link_bandwidth: bw,
            per_message_overhead: overhead,
            joules_per_flop: 1e-9,
            joules_per_byte: 1e-8,
        }
    }

    #[test]
    fn split_exchange_formula() {
        let mut b = crate::arch::DescriptorBuilder::new(crate::arch::Shape::new(16, 8, 8));
        b.conv("c", 0, 64, 3, 1, false).unwrap();
        let ex = split_exchange(&b.finish(), 2).unwrap();
        assert_eq!(ex[0].total_bytes, 16_384);
        assert_eq!(ex[0].bytes_per_pair, 32 * 8 * 8 * 4);
    }

    #[test]
    fn indivisible_split_rejected() {
        let d = wrn(16, 2, 10, 32).unwrap();
        assert!(matches!(split_exchange(&d, 3), Err(SimError::Indivisible { .. })));
    }

    #[test]
    fn single_device_is_compute_only() {
        let d = Deployment { pattern: CommPattern::Nonn, node_flops: vec![0, 1_000_000], transfers: vec![] };
        let e = estimate(&d, &[profile(1e9, 1e6, 1e-3), profile(1e9, 1e6, 1e-3)], 1, 0.0).unwrap();
        assert_eq!(e.latency_seconds, 1e-3);
        assert_eq!(e.comm_seconds, 0.0);
        assert_eq!(e.bottleneck, 1);
    }

    #[test]
    fn nonn_response_framing() {
        assert_eq!(nonn_response_bytes(&[34; 8]), 8 * (34 * 4) + 8 * 9);
    }

    #[test]
    fn sweep_endpoints() {
        let cfg = SweepConfig {
            n_students: 8,
            student_flops: 1_000_000,
            input_bytes: 0,
            output_bytes: 0,
            head_flops: 0,
            small: profile(1e6, 1e9, 1e-12),
            big: profile(4e6, 1e9, 1e-12),
            coordinator: profile(1e9, 1e9, 1e-12),
        };
        let pts = heterogeneous_sweep(&cfg);
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0].bottleneck, "small");
        assert_eq!(pts[8].bottleneck, "big");
        assert!((pts[8].slowest_device_seconds - 2.0).abs() < 1e-6);
    }
}
