#![allow(dead_code)]

use nonn_core::trace::{ActivationTrace, FcHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random non-negative trace; roughly a fifth of the activities are zero.
pub fn random_trace(seed: u64, n_filters: usize, n_images: usize, n_classes: usize) -> ActivationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let activities = (0..n_filters * n_images)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0f32..4.0) })
        .collect();
    let labels = (0..n_images).map(|_| rng.random_range(0..n_classes as u32)).collect();
    let weights = (0..n_classes * n_filters).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let bias = (0..n_classes).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    let fc = FcHead::new(n_classes, n_filters, weights, bias).unwrap();
    ActivationTrace::new(n_filters, n_images, activities, labels, fc).unwrap().0
}

/// `|a − b| ≤ rel · max(|a|, |b|)`, with exact equality required at zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Dense symmetric weights of a random connected graph: a random spanning
/// tree plus each remaining pair with probability `density`.
pub fn connected_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    let mut set = |i: usize, j: usize, v: f64| {
        w[i * n + j] = v;
        w[j * n + i] = v;
    };
    for i in 1..n {
        let j = rng.random_range(0..i);
        set(i, j, rng.random_range(0.1..1.0));
    }
    let mut extra = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                extra.push((i, j, rng.random_range(0.1..1.0)));
            }
        }
    }
    for (i, j, v) in extra {
        if w[i * n + j] == 0.0 {
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    w
}

/// Modularity with the null term scaled by `1/gamma`, straight from the
/// double sum over node pairs.
pub fn modularity_oracle(w: &[f64], n: usize, membership: &[usize], gamma: f64) -> f64 {
    let k: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w[i * n + j]).sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if membership[i] == membership[j] {
                q += w[i * n + j] - k[i] * k[j] / (gamma * two_m);
            }
        }
    }
    q / two_m
}

/// Calls `f` with every set partition of `0..n` as a restricted growth string.
pub fn for_each_set_partition(n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(a: &mut Vec<usize>, n: usize, max: usize, f: &mut impl FnMut(&[usize])) {
        if a.len() == n {
            f(a);
            return;
        }
        for v in 0..=max + 1 {
            a.push(v);
            rec(a, n, max.max(v), f);
            a.pop();
        }
    }
    if n == 0 {
        return;
    }
    let mut a = vec![0];
    rec(&mut a, n, 0, f);
}
