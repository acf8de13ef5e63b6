//! Regenerates `crates/nonn/fixtures/`.
//!
//! A small teacher CNN with deliberately dead final-layer filters, students
//! for a two-way partition and an eight-way replication, and goldens
//! computed by an f64 reference forward pass that shares no code with the
//! engine. Weights are random; batch-norm statistics and all linear read-outs
//! are fitted in closed form, so generation is fast and fully seeded.
//!
//! Run with `cargo run --release -p nonn --example gen_fixtures [OUT_DIR]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use nonn::config::{PipelineConfig, ProfilesConfig};
use nonn::formats::{save_contributions, save_head, save_images, save_program, save_trace, write_json, ImageSet};
use nonn_core::arch::{ArchitectureDescriptor, DescriptorBuilder, Op, Shape, StudentTemplate};
use nonn_core::community::detect;
use nonn_core::engine::{TensorProgram, WeightArray, BN_EPS};
use nonn_core::graph::{build, default_eps_act, Rule};
use nonn_core::partition::{replicate_with_shuffle, solve_with_assignment, Budgets};
use nonn_core::robustness::ContributionTrace;
use nonn_core::simulator::DeviceProfile;
use nonn_core::trace::{ActivationTrace, FcHead};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

const SEED: u64 = 20_181_114;
const SIDE: usize = 16;
const N_CLASSES: usize = 8;
const N_TRAIN: usize = 512;
const N_VAL: usize = 256;
const N_TEST: usize = 64;
const FCONV: usize = 32;
const N_DEAD: usize = 12;
const DEAD_BETA: f32 = -0.1;
const RIDGE: f64 = 1e-3;
const MIN_SPLIT_FACTOR: u64 = 50;

type Weights = BTreeMap<String, WeightArray>;

fn main() {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    std::fs::create_dir_all(&out).expect("create output dir");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);

    let train = dataset(&mut rng, N_TRAIN);
    let val = dataset(&mut rng, N_VAL);
    let test = dataset(&mut rng, N_TEST);
    save_images(&out.join("test_images.nnim"), &test).unwrap();

    // teacher
    let (desc, pool_node) = teacher_descriptor();
    let mut dead: Vec<usize> = (0..FCONV).collect();
    dead.shuffle(&mut rng);
    let mut dead = dead[..N_DEAD].to_vec();
    dead.sort_unstable();
    let mut weights = random_weights(&desc, &mut rng);
    {
        let w = weights.get_mut("fconv.weight").unwrap();
        let per = w.data.len() / FCONV;
        for &f in &dead {
            w.data[f * per..(f + 1) * per].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let dead_beta: BTreeMap<usize, f32> = dead.iter().map(|&f| (f, DEAD_BETA)).collect();
    let train_x = as_f64(&train);
    let nodes = run_nodes(&desc, &mut weights, &train_x, Some(&[("fbn", &dead_beta)]));
    let feats = &nodes[pool_node];
    let (fc_w, fc_b) = ridge(feats, &one_hot(&train.labels), true);
    weights.insert("fc.weight".into(), WeightArray::new(vec![N_CLASSES, FCONV], fc_w.clone()));
    weights.insert("fc.bias".into(), WeightArray::new(vec![N_CLASSES], fc_b.clone()));
    let teacher = TensorProgram::new(desc.clone(), weights.clone(), N_CLASSES).expect("teacher program");
    save_program(&out.join("teacher"), &teacher).unwrap();
    let head = FcHead::new(N_CLASSES, FCONV, fc_w, fc_b).unwrap();

    let train_acts = f32s_rows(feats);
    let val_nodes = run_nodes(&desc, &mut weights, &as_f64(&val), None);
    let val_acts = f32s_rows(&val_nodes[pool_node]);
    let (trace, clamped) = ActivationTrace::new(FCONV, N_VAL, val_acts.concat(), val.labels.clone(), head.clone()).unwrap();
    assert_eq!(clamped, 0);
    save_trace(&out.join("trace.nntr"), &trace).unwrap();
    let val_accuracy = accuracy(&val_acts.iter().map(|a| predict(&head, a)).collect::<Vec<_>>(), &val.labels);
    for &f in &dead {
        assert!(val_acts.iter().all(|row| row[f] == 0.0), "filter {f} is not dead");
    }

    let test_x = as_f64(&test);
    let test_nodes = run_nodes(&desc, &mut weights, &test_x, None);
    let teacher_logits = test_nodes.last().unwrap().clone();
    let teacher_pred: Vec<usize> = teacher_logits.iter().map(|l| argmax(l)).collect();
    let teacher_test_accuracy = accuracy(&teacher_pred, &test.labels);

    // partition plan
    let template = student_template();
    write_json(&out.join("student_template.json"), &template).unwrap();
    let budgets = Budgets::default();
    let (gamma, plan) = [1.0, 0.8, 1.25, 0.6, 1.5, 2.0]
        .into_iter()
        .find_map(|gamma| {
            let net = build(&trace, Rule::Ah, default_eps_act(&trace));
            let a = detect(&net, gamma, SEED).ok()?;
            solve_with_assignment(&trace, &a, 2, &budgets, &template).ok().map(|p| (gamma, p))
        })
        .expect("some resolution yields two partitions");
    let config = PipelineConfig {
        trace_path: "trace.nntr".into(),
        rule: Rule::Ah,
        eps_act: None,
        gamma,
        seed: SEED,
        k: 2,
        budgets,
        template_path: Some("student_template.json".into()),
        output_dir: None,
    };
    write_json(&out.join("partition_config.json"), &config).unwrap();
    write_json(&out.join("plan_2s.json"), &plan).unwrap();

    // students
    let parts_2s: Vec<Vec<usize>> = plan.partitions.clone();
    let replicas = replicate_with_shuffle(&plan, 8, SEED);
    let parts_8s: Vec<Vec<usize>> = replicas.iter().map(|r| r.filters.clone()).collect();
    let ens_2s = ensemble(&out.join("nonn_2s"), &template, &parts_2s, &train, &train_acts, &test, &mut rng);
    let ens_8s = ensemble(&out.join("nonn_8s"), &template, &parts_8s, &train, &train_acts, &test, &mut rng);

    // horizontal-split traffic against NoNN-2S responses
    let split_bytes = analytic_split_bytes(&desc, 2);
    let nonn_bytes = 4 * parts_2s.iter().map(Vec::len).sum::<usize>() as u64;
    let factor = split_bytes / nonn_bytes;
    assert!(factor >= MIN_SPLIT_FACTOR, "split factor {factor} below {MIN_SPLIT_FACTOR}");

    write_json(&out.join("profiles.json"), &profiles()).unwrap();

    let goldens = Goldens {
        seed: SEED,
        n_classes: N_CLASSES,
        input: [3, SIDE, SIDE],
        dead_filters: dead,
        dead_beta: DEAD_BETA,
        teacher_val_accuracy: val_accuracy,
        teacher_train_accuracy: accuracy(&train_acts.iter().map(|a| predict(&head, a)).collect::<Vec<_>>(), &train.labels),
        teacher_test_accuracy,
        teacher_test_predictions: teacher_pred,
        teacher_test_logits: teacher_logits.iter().map(|l| l.iter().map(|&v| v as f32).collect()).collect(),
        chance: 1.0 / N_CLASSES as f64,
        gamma,
        nonn_2s: ens_2s,
        nonn_8s: ens_8s,
        split_devices: 2,
        split_bytes_per_image: split_bytes,
        nonn_2s_response_payload_bytes: nonn_bytes,
        split_factor: factor,
        temperature: 4.0,
    };
    write_json(&out.join("goldens.json"), &goldens).unwrap();
    eprintln!(
        "teacher val accuracy {:.3}, test {:.3}; plan sizes {:?}; NoNN-2S {:.3}, NoNN-8S {:.3}; split factor {}",
        goldens.teacher_val_accuracy,
        goldens.teacher_test_accuracy,
        plan.sizes,
        goldens.nonn_2s.test_accuracy,
        goldens.nonn_8s.test_accuracy,
        factor
    );
}

#[derive(Serialize)]
struct Goldens {
    seed: u64,
    n_classes: usize,
    input: [usize; 3],
    dead_filters: Vec<usize>,
    dead_beta: f32,
    teacher_val_accuracy: f64,
    teacher_train_accuracy: f64,
    teacher_test_accuracy: f64,
    teacher_test_predictions: Vec<usize>,
    teacher_test_logits: Vec<Vec<f32>>,
    chance: f64,
    gamma: f64,
    nonn_2s: EnsembleGolden,
    nonn_8s: EnsembleGolden,
    split_devices: usize,
    split_bytes_per_image: u64,
    nonn_2s_response_payload_bytes: u64,
    split_factor: u64,
    /// Distillation temperature the fixture would be trained with.
    temperature: f64,
}

#[derive(Serialize)]
struct EnsembleGolden {
    partitions: Vec<Vec<usize>>,
    widths: Vec<usize>,
    /// Reference outputs of every student on test image 0.
    student_outputs_image0: Vec<Vec<f32>>,
    test_predictions: Vec<usize>,
    test_accuracy: f64,
    full_subset_accuracy: f64,
    empty_subset_accuracy: f64,
}

// ---------------------------------------------------------------- data

fn dataset(rng: &mut ChaCha8Rng, n: usize) -> ImageSet {
    let shape = Shape::new(3, SIDE, SIDE);
    let mut pixels = Vec::with_capacity(n * shape.numel());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % N_CLASSES) as u32;
        pixels.extend(draw(rng, class as usize));
        labels.push(class);
    }
    ImageSet { shape, pixels, labels }
}

/// One 3×16×16 image of a shape class with random colour, offset and noise.
fn draw(rng: &mut ChaCha8Rng, class: usize) -> Vec<f32> {
    let s = SIDE as i32;
    let (dx, dy) = (rng.random_range(-3..=3), rng.random_range(-3..=3));
    let t = rng.random_range(1..=2);
    let mask = |x: i32, y: i32| -> bool {
        let (u, v) = (x - s / 2 - dx, y - s / 2 - dy);
        match class {
            0 => v.abs() < t && u.abs() < 6,
            1 => u.abs() < t && v.abs() < 6,
            2 => (u - v).abs() < t && u.abs() < 6,
            3 => (u + v).abs() < t && u.abs() < 6,
            4 => u.abs().max(v.abs()) == 5 || u.abs().max(v.abs()) == 5 - t + 1,
            5 => u.abs() < 4 && v.abs() < 4,
            6 => (u.abs() < t && v.abs() < 6) || (v.abs() < t && u.abs() < 6),
            _ => u * u + v * v < 30 && u * u + v * v > 12,
        }
    };
    let colour: [f32; 3] = [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)];
    let mut img = vec![0.0f32; 3 * SIDE * SIDE];
    for c in 0..3 {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let on = mask(x as i32, y as i32);
                let noise: f32 = rng.random_range(-0.15..0.15);
                img[(c * SIDE + y) * SIDE + x] = if on { colour[c] } else { 0.0 } + noise;
            }
        }
    }
    img
}

fn as_f64(images: &ImageSet) -> Vec<Vec<f64>> {
    (0..images.len()).map(|n| images.image(n).data.iter().map(|&v| v as f64).collect()).collect()
}

fn one_hot(labels: &[u32]) -> Vec<Vec<f64>> {
    labels.iter().map(|&l| (0..N_CLASSES).map(|c| if c == l as usize { 1.0 } else { 0.0 }).collect()).collect()
}

fn f32s_rows(rows: &[Vec<f64>]) -> Vec<Vec<f32>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect()
}

// ---------------------------------------------------------------- models

fn teacher_descriptor() -> (ArchitectureDescriptor, usize) {
    let mut b = DescriptorBuilder::new(Shape::new(3, SIDE, SIDE));
    let x = b.conv("conv0", 0, 16, 3, 1, false).unwrap();
    let x = b.bn("bn0", x).unwrap();
    let x = b.relu("relu0", x).unwrap();
    let x = b.conv("conv1", x, 32, 3, 2, false).unwrap();
    let x = b.bn("bn1", x).unwrap();
    let r1 = b.relu("relu1", x).unwrap();
    let x = b.conv("conv2", r1, 32, 3, 1, false).unwrap();
    let x = b.bn("bn2", x).unwrap();
    let x = b.add("add2", x, r1).unwrap();
    let x = b.relu("relu2", x).unwrap();
    let x = b.conv("fconv", x, FCONV, 3, 1, false).unwrap();
    let x = b.bn("fbn", x).unwrap();
    let x = b.relu("frelu", x).unwrap();
    let pool = b.pool("pool", x).unwrap();
    b.dense("fc", pool, N_CLASSES, true).unwrap();
    (b.finish(), pool)
}

fn student_template() -> StudentTemplate {
    let mut b = DescriptorBuilder::new(Shape::new(3, SIDE, SIDE));
    let x = b.conv("s_conv0", 0, 8, 3, 1, false).unwrap();
    let x = b.bn("s_bn0", x).unwrap();
    let x = b.relu("s_relu0", x).unwrap();
    let x = b.conv("s_conv1", x, 16, 3, 2, false).unwrap();
    let x = b.bn("s_bn1", x).unwrap();
    let x = b.relu("s_relu1", x).unwrap();
    let x = b.conv("s_conv2", x, 16, 3, 1, false).unwrap();
    let x = b.bn("s_bn2", x).unwrap();
    b.relu("s_relu2", x).unwrap();
    StudentTemplate { backbone: b.finish() }
}

/// He-normal convolution and dense weights; identity batch-norm placeholders.
fn random_weights(desc: &ArchitectureDescriptor, rng: &mut ChaCha8Rng) -> Weights {
    let mut w = Weights::new();
    for layer in &desc.layers {
        let name = &layer.name;
        match layer.op {
            Op::Conv2d { in_ch, out_ch, kernel, bias, .. } => {
                let fan_in = in_ch * kernel * kernel;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let data = (0..out_ch * fan_in).map(|_| normal.sample(rng) as f32).collect();
                w.insert(format!("{name}.weight"), WeightArray::new(vec![out_ch, in_ch, kernel, kernel], data));
                if bias {
                    w.insert(format!("{name}.bias"), WeightArray::new(vec![out_ch], vec![0.0; out_ch]));
                }
            }
            Op::BatchNorm { ch } => {
                for (suffix, v) in [("gamma", 1.0), ("beta", 0.0), ("mean", 0.0), ("var", 1.0)] {
                    w.insert(format!("{name}.{suffix}"), WeightArray::new(vec![ch], vec![v; ch]));
                }
            }
            Op::Dense { in_features, out_features, bias } => {
                w.insert(format!("{name}.weight"), WeightArray::new(vec![out_features, in_features], vec![0.0; in_features * out_features]));
                if bias {
                    w.insert(format!("{name}.bias"), WeightArray::new(vec![out_features], vec![0.0; out_features]));
                }
            }
            _ => {}
        }
    }
    w
}

/// Reference interpreter over a batch. Returns every node's value for every
/// input. With `calibrate`, batch-norm statistics are set from the batch
/// (population variance) before the layer is applied, and the listed
/// per-channel betas are written.
fn run_nodes(
    desc: &ArchitectureDescriptor,
    weights: &mut Weights,
    inputs: &[Vec<f64>],
    calibrate: Option<&[(&str, &BTreeMap<usize, f32>)]>,
) -> Vec<Vec<Vec<f64>>> {
    let shapes = desc.shapes().unwrap();
    let mut values: Vec<Vec<Vec<f64>>> = vec![inputs.to_vec()];
    for (i, layer) in desc.layers.iter().enumerate() {
        let srcs = layer.sources(i);
        let ins: Vec<Shape> = srcs.iter().map(|&s| shapes[s]).collect();
        let name = &layer.name;
        let out: Vec<Vec<f64>> = match layer.op {
            Op::Conv2d { in_ch, out_ch, kernel, stride, padding, bias } => {
                let w: Vec<f64> = weights[&format!("{name}.weight")].data.iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = if bias { weights[&format!("{name}.bias")].data.iter().map(|&v| v as f64).collect() } else { vec![0.0; out_ch] };
                let (o_shape, s) = (shapes[i + 1], ins[0]);
                values[srcs[0]]
                    .iter()
                    .map(|x| conv(x, s, &w, &b, in_ch, out_ch, kernel, stride, padding, o_shape))
                    .collect()
            }
            Op::BatchNorm { ch } => {
                let plane = ins[0].h * ins[0].w;
                if let Some(cal) = calibrate {
                    let batch = &values[srcs[0]];
                    let count = (batch.len() * plane) as f64;
                    let mut mean = vec![0.0f64; ch];
                    let mut var = vec![0.0f64; ch];
                    for x in batch {
                        for c in 0..ch {
                            mean[c] += x[c * plane..(c + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    for x in batch {
                        for c in 0..ch {
                            var[c] += x[c * plane..(c + 1) * plane].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count);
                    weights.insert(format!("{name}.mean"), WeightArray::new(vec![ch], mean.iter().map(|&v| v as f32).collect()));
                    weights.insert(format!("{name}.var"), WeightArray::new(vec![ch], var.iter().map(|&v| v as f32).collect()));
                    if let Some((_, betas)) = cal.iter().find(|(n, _)| n == name) {
                        let beta = weights.get_mut(&format!("{name}.beta")).unwrap();
                        for (&c, &b) in betas.iter() {
                            beta.data[c] = b;
                        }
                    }
                }
                let get = |s: &str| -> Vec<f64> { weights[&format!("{name}.{s}")].data.iter().map(|&v| v as f64).collect() };
                let (g, be, m, v) = (get("gamma"), get("beta"), get("mean"), get("var"));
                values[srcs[0]]
                    .iter()
                    .map(|x| x.iter().enumerate().map(|(j, &xv)| (xv - m[j / plane]) / (v[j / plane] + BN_EPS).sqrt() * g[j / plane] + be[j / plane]).collect())
                    .collect()
            }
            Op::Relu => values[srcs[0]].iter().map(|x| x.iter().map(|&v| v.max(0.0)).collect()).collect(),
            Op::Add => values[srcs[0]].iter().zip(&values[srcs[1]]).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect(),
            Op::GlobalAvgPool => {
                let plane = ins[0].h * ins[0].w;
                values[srcs[0]]
                    .iter()
                    .map(|x| (0..ins[0].c).map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect())
                    .collect()
            }
            Op::Dense { in_features, out_features, bias } => {
                let w = &weights[&format!("{name}.weight")].data;
                let b = if bias { weights[&format!("{name}.bias")].data.clone() } else { vec![0.0; out_features] };
                values[srcs[0]]
                    .iter()
                    .map(|x| {
                        (0..out_features)
                            .map(|o| b[o] as f64 + (0..in_features).map(|k| w[o * in_features + k] as f64 * x[k]).sum::<f64>())
                            .collect()
                    })
                    .collect()
            }
            Op::Concat => (0..inputs.len()).map(|n| srcs.iter().flat_map(|&s| values[s][n].clone()).collect()).collect(),
        };
        values.push(out);
    }
    values
}

#[allow(clippy::too_many_arguments)]
fn conv(x: &[f64], s: Shape, w: &[f64], b: &[f64], in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, o: Shape) -> Vec<f64> {
    let mut out = vec![0.0; out_ch * o.h * o.w];
    for oc in 0..out_ch {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut acc = b[oc];
                for c in 0..in_ch {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= s.w as isize {
                                continue;
                            }
                            acc += w[((oc * in_ch + c) * k + ky) * k + kx] * x[(c * s.h + iy as usize) * s.w + ix as usize];
                        }
                    }
                }
                out[(oc * o.h + oy) * o.w + ox] = acc;
            }
        }
    }
    out
}

/// Ridge regression `Y ≈ X·Wᵀ (+ b)`; returns row-major `W` and `b` as f32.
fn ridge(x: &[Vec<f64>], y: &[Vec<f64>], intercept: bool) -> (Vec<f32>, Vec<f32>) {
    let n = x.len();
    let d = x[0].len() + intercept as usize;
    let m = y[0].len();
    let xm = DMatrix::from_fn(n, d, |r, c| if c < x[0].len() { x[r][c] } else { 1.0 });
    let ym = DMatrix::from_fn(n, m, |r, c| y[r][c]);
    let gram = xm.transpose() * &xm + DMatrix::identity(d, d) * (RIDGE * n as f64);
    let beta = gram.cholesky().expect("positive definite").solve(&(xm.transpose() * ym));
    let k = x[0].len();
    let w = (0..m).flat_map(|o| (0..k).map(move |c| (o, c))).map(|(o, c)| beta[(c, o)] as f32).collect();
    let b = (0..m).map(|o| if intercept { beta[(k, o)] as f32 } else { 0.0 }).collect();
    (w, b)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn predict(head: &FcHead, input: &[f32]) -> usize {
    let logits: Vec<f64> = (0..head.n_classes)
        .map(|c| head.bias[c] as f64 + (0..head.width).map(|k| head.weights[c * head.width + k] as f64 * input[k] as f64).sum::<f64>())
        .collect();
    argmax(&logits)
}

fn accuracy(pred: &[usize], labels: &[u32]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count() as f64 / labels.len() as f64
}

/// Builds, fits and exports one student per partition plus the shared head.
fn ensemble(
    dir: &Path,
    template: &StudentTemplate,
    parts: &[Vec<usize>],
    train: &ImageSet,
    train_acts: &[Vec<f32>],
    test: &ImageSet,
    rng: &mut ChaCha8Rng,
) -> EnsembleGolden {
    let train_x = as_f64(train);
    let test_x = as_f64(test);
    let mut train_out: Vec<Vec<f64>> = vec![Vec::new(); train.len()];
    let mut test_out: Vec<Vec<f64>> = vec![Vec::new(); test.len()];
    let mut image0 = Vec::new();
    for (i, filters) in parts.iter().enumerate() {
        let p = filters.len();
        let desc = template.instantiate(p).unwrap();
        let mut weights = random_weights(&desc, rng);
        let nodes = run_nodes(&desc, &mut weights, &train_x, Some(&[]));
        // adapter before pooling equals adapter after pooling, so fit it on pooled backbone features
        let backbone_out = template.backbone.layers.len();
        let shape = desc.shapes().unwrap()[backbone_out];
        let plane = shape.h * shape.w;
        let pooled: Vec<Vec<f64>> =
            nodes[backbone_out].iter().map(|x| (0..shape.c).map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect()).collect();
        let targets: Vec<Vec<f64>> = train_acts.iter().map(|a| filters.iter().map(|&f| a[f] as f64).collect()).collect();
        let (aw, _) = ridge(&pooled, &targets, false);
        weights.insert("adapter.weight".into(), WeightArray::new(vec![p, shape.c, 1, 1], aw));
        let program = TensorProgram::new(desc.clone(), weights.clone(), p).expect("student program");
        save_program(&dir.join(format!("student{i}")), &program).unwrap();
        let tr = run_nodes(&desc, &mut weights, &train_x, None);
        let te = run_nodes(&desc, &mut weights, &test_x, None);
        for (acc, o) in train_out.iter_mut().zip(tr.last().unwrap()) {
            acc.extend(o);
        }
        for (acc, o) in test_out.iter_mut().zip(te.last().unwrap()) {
            acc.extend(o);
        }
        image0.push(te.last().unwrap()[0].iter().map(|&v| v as f32).collect());
    }
    let width: usize = parts.iter().map(Vec::len).sum();
    let (w, b) = ridge(&train_out, &one_hot(&train.labels), true);
    let head = FcHead::new(N_CLASSES, width, w, b).unwrap();
    save_head(&dir.join("fc.nnfc"), &head).unwrap();
    let test_f32 = f32s_rows(&test_out);
    let preds: Vec<usize> = test_f32.iter().map(|r| predict(&head, r)).collect();
    let widths: Vec<usize> = parts.iter().map(Vec::len).collect();
    let contributions = ContributionTrace::new(widths.clone(), test.len(), test_f32.concat(), test.labels.clone(), head.clone()).unwrap();
    save_contributions(&dir.join("contributions.nnct"), &contributions).unwrap();
    let zeros = vec![0.0f32; width];
    let empty = predict(&head, &zeros);
    EnsembleGolden {
        partitions: parts.to_vec(),
        widths,
        student_outputs_image0: image0,
        test_accuracy: accuracy(&preds, &test.labels),
        full_subset_accuracy: accuracy(&preds, &test.labels),
        empty_subset_accuracy: test.labels.iter().filter(|&&l| l as usize == empty).count() as f64 / test.len() as f64,
        test_predictions: preds,
    }
}

/// `Σ_conv n·(n−1)·(out/n)·h·w·4`, computed from the descriptor directly.
fn analytic_split_bytes(desc: &ArchitectureDescriptor, n: usize) -> u64 {
    let shapes = desc.shapes().unwrap();
    desc.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.op, Op::Conv2d { .. }))
        .map(|(i, _)| {
            let s = shapes[i + 1];
            (n * (n - 1) * (s.c / n) * s.h * s.w * 4) as u64
        })
        .sum()
}

fn profiles() -> ProfilesConfig {
    let device = |name: &str, fps: f64| DeviceProfile {
        name: name.into(),
        flops_per_second: fps,
        link_bandwidth: 2.5e6,
        per_message_overhead: 2e-4,
        joules_per_flop: 1e-9,
        joules_per_byte: 5e-8,
    };
    ProfilesConfig { profiles: vec![device("coordinator", 2e10), device("edge", 2e9)], overlap: 0.0, images: 1, n_classes: N_CLASSES }
}
