use nonn_core::arch::{wrn, StudentTemplate};
use nonn_core::robustness::ContributionTrace;
use nonn_core::simulator::{
    calibrate, estimate, heterogeneous_sweep, split_exchange, CommPattern, Deployment, DeviceProfile, SweepConfig, Transfer,
};
use nonn_core::trace::FcHead;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn profile(fps: f64, bw: f64, overhead: f64) -> DeviceProfile {
    DeviceProfile {
        name: "dev".into(),
        flops_per_second: fps,
        link_bandwidth: bw,
        per_message_overhead: overhead,
        joules_per_flop: 2e-10,
        joules_per_byte: 5e-9,
    }
}

#[test]
fn split_calibration_reproduces_measured_total() {
    let teacher = wrn(40, 4, 10, 32).unwrap();
    let split = Deployment::horizontal_split(&teacher, 2).unwrap();
    let p = calibrate(&split, 0.086, 0.920, 1e-4, &profile(1.0, 1.0, 0.0)).unwrap();
    let e = estimate(&split, &vec![p; 3], 1, 0.0).unwrap();
    assert!((e.latency_seconds - 1.006).abs() <= 0.01 * 1.006, "{}", e.latency_seconds);
    assert!((e.compute_seconds - 0.086).abs() < 1e-9);
    assert!((e.comm_seconds - 0.920).abs() < 1e-9);
}

#[test]
fn split_bytes_follow_per_layer_formula() {
    let teacher = wrn(16, 2, 10, 32).unwrap();
    let layers = split_exchange(&teacher, 2).unwrap();
    let shapes = teacher.shapes().unwrap();
    let mut want = 0u64;
    for (i, l) in teacher.layers.iter().enumerate() {
        if let nonn_core::Op::Conv2d { out_ch, .. } = l.op {
            let s = shapes[i + 1];
            want += 2 * (out_ch as u64 / 2) * (s.h * s.w) as u64 * 4;
        }
    }
    assert_eq!(layers.iter().map(|l| l.total_bytes).sum::<u64>(), want);
}

#[test]
fn more_students_add_communication_not_compute() {
    let t = StudentTemplate::cifar10();
    let f = t.student_cost(40).unwrap().flops;
    let p = profile(1e10, 1e6, 1e-3);
    let two = Deployment::nonn(&[f; 2], 12288, &[40; 2], 1000);
    let eight = Deployment::nonn(&[f; 8], 12288, &[40; 8], 1000);
    let e2 = estimate(&two, &vec![p.clone(); 9], 1, 0.0).unwrap();
    let e8 = estimate(&eight, &vec![p; 9], 1, 0.0).unwrap();
    assert_eq!(e2.compute_seconds, e8.compute_seconds);
    assert!((e8.comm_seconds - 4.0 * e2.comm_seconds).abs() < 1e-12);
}

fn sweep_config() -> SweepConfig {
    SweepConfig {
        n_students: 8,
        student_flops: 167_000_000,
        input_bytes: 12288,
        output_bytes: 136,
        head_flops: 1000,
        small: profile(1e9, 1e12, 0.0),
        big: profile(4e9, 1e12, 0.0),
        coordinator: profile(1e10, 1e12, 0.0),
    }
}

#[test]
fn four_times_faster_big_device_is_flat_then_rising() {
    let pts = heterogeneous_sweep(&sweep_config());
    assert_eq!(pts.len(), 9);
    for s in 1..=4 {
        assert!((pts[s].latency_seconds - pts[0].latency_seconds).abs() < 1e-6 * pts[0].latency_seconds, "s={s}");
    }
    for s in 5..=8 {
        assert!(pts[s].latency_seconds > pts[s - 1].latency_seconds);
        assert_eq!(pts[s].bottleneck, "big");
    }
    assert_eq!(pts[0].bottleneck, "small");
}

proptest! {
    #[test]
    fn estimate_is_monotone_and_conserves_energy(
        flops in prop::collection::vec(0u64..1_000_000_000, 3),
        transfers in prop::collection::vec((0usize..3, 0usize..3, 0u64..1_000_000, 1u64..4), 0..8),
        which in 0usize..2,
        bump in 1u64..1_000_000,
    ) {
        let profiles = vec![profile(1e9, 1e7, 1e-4), profile(2e9, 5e6, 2e-4), profile(5e8, 2e7, 5e-5)];
        let transfers: Vec<Transfer> = transfers.into_iter().map(|(from, to, bytes, messages)| Transfer { from, to, bytes, messages }).collect();
        let d = Deployment { pattern: CommPattern::Nonn, node_flops: flops.clone(), transfers: transfers.clone() };
        let base = estimate(&d, &profiles, 3, 0.0).unwrap();

        let mut bigger = d.clone();
        if which == 0 || bigger.transfers.is_empty() {
            bigger.node_flops[bump as usize % 3] += bump;
        } else {
            bigger.transfers[bump as usize % transfers.len()].bytes += bump;
        }
        prop_assert!(estimate(&bigger, &profiles, 3, 0.0).unwrap().latency_seconds >= base.latency_seconds);

        let mut energy = 0.0;
        for (f, p) in flops.iter().zip(&profiles) {
            energy += *f as f64 * p.joules_per_flop;
        }
        for t in &transfers {
            energy += t.bytes as f64 * (profiles[t.from].joules_per_byte + profiles[t.to].joules_per_byte);
        }
        prop_assert!((base.total_energy_joules - 3.0 * energy).abs() <= 1e-9 * (1.0 + energy));
    }

    #[test]
    fn failure_curve_counts_are_binomial(n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths: Vec<usize> = (0..n).map(|_| rng.random_range(1..4)).collect();
        let total: usize = widths.iter().sum();
        let images = 12;
        let outputs = (0..images * total).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let labels = (0..images).map(|_| rng.random_range(0..3u32)).collect();
        let fc = FcHead::new(3, total, (0..3 * total).map(|_| rng.random_range(-1.0f32..1.0)).collect(), vec![0.1, 0.0, -0.1]).unwrap();
        let t = ContributionTrace::new(widths, images, outputs, labels, fc).unwrap();
        let rows = t.failure_curve().unwrap();
        let mut binom = vec![1u64];
        for _ in 0..n {
            let mut next = vec![1u64; binom.len() + 1];
            for i in 1..binom.len() {
                next[i] = binom[i - 1] + binom[i];
            }
            binom = next;
        }
        prop_assert_eq!(rows.iter().map(|r| r.count).collect::<Vec<_>>(), binom);
        for r in &rows {
            prop_assert!(r.min <= r.mean + 1e-12 && r.mean <= r.max + 1e-12);
        }
        let full: Vec<usize> = (0..n).collect();
        prop_assert_eq!(rows[n].mean, t.subset_accuracy(&full).unwrap());
        let bias_class = t.fc().bias_class() as u32;
        let freq = t.labels().iter().filter(|&&l| l == bias_class).count() as f64 / images as f64;
        prop_assert_eq!(t.subset_accuracy(&[]).unwrap(), freq);
    }
}
