use std::collections::BTreeMap;
use std::path::PathBuf;

use nonn::core::arch::{DescriptorBuilder, Shape};
use nonn::core::engine::{TensorProgram, WeightArray};
use nonn::core::graph::{build_ah, Rule};
use nonn::core::robustness::ContributionTrace;
use nonn::core::trace::{ActivationTrace, FcHead};
use nonn::formats::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn head(rng: &mut ChaCha8Rng, n_classes: usize, width: usize) -> FcHead {
    let w = (0..n_classes * width).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let b = (0..n_classes).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FcHead::new(n_classes, width, w, b).unwrap()
}

fn trace(seed: u64, nf: usize, ni: usize, nc: usize, negatives: bool) -> ActivationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = if negatives { -1.0 } else { 0.0 };
    let acts = (0..nf * ni).map(|_| rng.random_range(lo..3.0f32)).collect();
    let labels = (0..ni).map(|_| rng.random_range(0..nc as u32)).collect();
    let fc = head(&mut rng, nc, nf);
    ActivationTrace::new(nf, ni, acts, labels, fc).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trace_load_save_load_is_byte_identical(seed in any::<u64>(), nf in 2usize..16, ni in 1usize..16, nc in 1usize..5) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acts: Vec<f32> = (0..nf * ni).map(|_| rng.random_range(-1.0f32..3.0)).collect();
        let labels: Vec<u32> = (0..ni).map(|_| rng.random_range(0..nc as u32)).collect();
        let fc = head(&mut rng, nc, nf);
        // written directly so negative activities reach the file
        let mut w = Writer::new(TRACE_MAGIC);
        w.dim(nf).dim(ni).dim(nc).f32s(&acts).u32s(&labels).f32s(&fc.weights).f32s(&fc.bias);
        let a = dir.path().join("a.nntr");
        std::fs::write(&a, w.into_bytes()).unwrap();

        let first = load_trace(&a).unwrap();
        prop_assert_eq!(first.clamped, acts.iter().filter(|&&v| v < 0.0).count());
        prop_assert!(first.trace.activities().iter().all(|&v| v >= 0.0));
        let b = dir.path().join("b.nntr");
        save_trace(&b, &first.trace).unwrap();
        let second = load_trace(&b).unwrap();
        prop_assert_eq!(second.clamped, 0);
        prop_assert_eq!(&second.trace, &first.trace);
        let c = dir.path().join("c.nntr");
        save_trace(&c, &second.trace).unwrap();
        prop_assert_eq!(std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn contributions_round_trip(seed in any::<u64>(), widths in prop::collection::vec(1usize..6, 1..5), ni in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = widths.iter().sum();
        let outputs = (0..ni * total).map(|_| rng.random_range(0.0f32..2.0)).collect();
        let labels = (0..ni).map(|_| rng.random_range(0..3u32)).collect();
        let fc = head(&mut rng, 3, total);
        let t = ContributionTrace::new(widths, ni, outputs, labels, fc).unwrap();
        let bytes = encode_contributions(&t);
        let back = decode_contributions(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(encode_contributions(&back), bytes);
    }

    #[test]
    fn images_and_head_round_trip(seed in any::<u64>(), n in 0usize..5, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(c, h, w);
        let set = ImageSet {
            shape,
            pixels: (0..n * shape.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..10u32)).collect(),
        };
        prop_assert_eq!(decode_images(&encode_images(&set)).unwrap(), set);
        let fc = head(&mut rng, c, h * w);
        prop_assert_eq!(decode_head(&encode_head(&fc)).unwrap(), fc);
    }

    #[test]
    fn network_round_trips_at_f32(seed in any::<u64>(), nf in 2usize..12, ni in 1usize..12) {
        let t = trace(seed, nf, ni, 2, false);
        let net = build_ah(&t, 0.0);
        let dir = tempfile::tempdir().unwrap();
        save_network(dir.path(), &net).unwrap();
        let back = load_network(dir.path()).unwrap();
        prop_assert_eq!(back.n_nodes(), nf);
        prop_assert_eq!(back.rule, Rule::Ah);
        for (a, b) in back.upper_triangle().into_iter().zip(net.upper_triangle()) {
            prop_assert_eq!(a, b as f32 as f64);
        }
    }
}

fn small_program(seed: u64) -> TensorProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = DescriptorBuilder::new(Shape::new(2, 4, 4));
    let c = b.conv("c", 0, 3, 3, 1, true).unwrap();
    let bn = b.bn("bn", c).unwrap();
    let r = b.relu("r", bn).unwrap();
    b.pool("p", r).unwrap();
    let d = b.finish();
    let mut w = BTreeMap::new();
    let mut put = |name: &str, shape: Vec<usize>, lo: f32| {
        let n = shape.iter().product();
        w.insert(name.to_string(), WeightArray::new(shape, (0..n).map(|_| rng.random_range(lo..1.0)).collect()));
    };
    put("c.weight", vec![3, 2, 3, 3], -1.0);
    put("c.bias", vec![3], -1.0);
    put("bn.gamma", vec![3], 0.5);
    put("bn.beta", vec![3], -1.0);
    put("bn.mean", vec![3], -1.0);
    put("bn.var", vec![3], 0.5);
    TensorProgram::new(d, w, 3).unwrap()
}

#[test]
fn program_package_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_program(4);
    save_program(&dir.path().join("a"), &p).unwrap();
    let back = load_program(&dir.path().join("a")).unwrap();
    assert_eq!(back, p);
    save_program(&dir.path().join("b"), &back).unwrap();
    for f in ["manifest.json", "weights.bin"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn program_blob_overrun_is_reported() {
    let (mut manifest, blob) = encode_program(&small_program(5));
    manifest.weights[0].len += 1000;
    let err = decode_program(manifest, &blob).unwrap_err();
    assert!(matches!(err, FormatError::Malformed { field: "weights", .. }), "{err}");
}

#[test]
fn program_missing_weight_is_named() {
    let (mut manifest, blob) = encode_program(&small_program(6));
    manifest.weights.retain(|e| e.name != "bn.var");
    let err = decode_program(manifest, &blob).unwrap_err();
    assert!(err.to_string().contains("bn.var"), "{err}");
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let bytes = encode_head(&head(&mut ChaCha8Rng::seed_from_u64(1), 2, 3));
    assert!(matches!(decode_head(&bytes[..bytes.len() - 1]), Err(FormatError::Malformed { .. })));
    assert!(matches!(decode_images(&bytes), Err(FormatError::Malformed { field: "magic", .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_head(&long), Err(FormatError::Malformed { .. })));
}

#[test]
fn fixture_artifacts_load_and_round_trip() {
    let f = fixtures();
    let t = load_trace(&f.join("trace.nntr")).unwrap();
    assert_eq!(encode_trace(&t.trace), std::fs::read(f.join("trace.nntr")).unwrap());
    let imgs = load_images(&f.join("test_images.nnim")).unwrap();
    assert_eq!(imgs.len(), 64);
    assert_eq!(encode_images(&imgs), std::fs::read(f.join("test_images.nnim")).unwrap());
    for s in ["nonn_2s", "nonn_8s"] {
        let c = load_contributions(&f.join(s).join("contributions.nnct")).unwrap();
        assert_eq!(encode_contributions(&c), std::fs::read(f.join(s).join("contributions.nnct")).unwrap());
        let fc = load_head(&f.join(s).join("fc.nnfc")).unwrap();
        assert_eq!(fc.width, c.widths().iter().sum::<usize>());
    }
    let teacher = load_program(&f.join("teacher")).unwrap();
    assert_eq!(teacher.input_shape(), imgs.shape);
    let dir = tempfile::tempdir().unwrap();
    save_program(dir.path(), &teacher).unwrap();
    assert_eq!(std::fs::read(dir.path().join("weights.bin")).unwrap(), std::fs::read(f.join("teacher/weights.bin")).unwrap());
    assert_eq!(std::fs::read(dir.path().join("manifest.json")).unwrap(), std::fs::read(f.join("teacher/manifest.json")).unwrap());
}
