mod support;

use nonn_core::community::{combine_into_partitions, detect, lpt_groups, modularity, CommunityAssignment, ISOLATED_ID};
use nonn_core::graph::{FilterNetwork, Rule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{connected_graph, for_each_set_partition, modularity_oracle};

fn net(n: usize, w: Vec<f64>) -> FilterNetwork {
    FilterNetwork::from_dense(n, w, Rule::Ah, 0.0).unwrap()
}

fn best_modularity(w: &[f64], n: usize, gamma: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for_each_set_partition(n, &mut |p| best = best.max(modularity_oracle(w, n, p, gamma)));
    best
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn set_partition_enumeration_counts_bell_numbers() {
    for (n, bell) in [(1, 1), (2, 2), (3, 5), (4, 15), (5, 52), (6, 203), (7, 877), (8, 4140)] {
        let mut count = 0;
        for_each_set_partition(n, &mut |_| count += 1);
        assert_eq!(count, bell);
    }
}

#[test]
fn library_modularity_matches_pairwise_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let w = connected_graph(&mut rng, n, 0.4);
        let membership: Vec<usize> = (0..n).map(|_| rng.random_range(1..4)).collect();
        for gamma in [0.5, 1.0, 2.0] {
            let got = modularity(&net(n, w.clone()), &membership, gamma).unwrap();
            let want = modularity_oracle(&w, n, &membership, gamma);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn detect_reaches_most_of_the_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 1.0;
    for g in 0..240 {
        let n = 2 + g % 7;
        let density = rng.random_range(0.1..0.7);
        let w = connected_graph(&mut rng, n, density);
        let opt = best_modularity(&w, n, 1.0);
        let a = detect(&net(n, w.clone()), 1.0, g as u64).unwrap();
        let q = modularity_oracle(&w, n, &a.membership, 1.0);
        assert!((q - a.modularity).abs() < 1e-12);
        // An optimum of (numerically) zero is the one-community answer.
        if opt > 1e-9 {
            worst = worst.min(q / opt);
        } else {
            assert!(q >= opt - 1e-9);
        }
    }
    assert!(worst >= 0.95, "worst ratio {worst}");
}

#[test]
fn planted_two_triangles() {
    let mut w = vec![0.0; 36];
    for (i, j, v) in [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0), (2, 3, 0.1)] {
        w[i * 6 + j] = v;
        w[j * 6 + i] = v;
    }
    for seed in 0..10 {
        let a = detect(&net(6, w.clone()), 1.0, seed).unwrap();
        assert!(same_partition(&a.membership, &[1, 1, 1, 2, 2, 2]), "{:?}", a.membership);
    }
}

#[test]
fn planted_two_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 16;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let same = (i < 8) == (j < 8);
            let v = if same { rng.random_range(0.8..1.0) } else if rng.random_bool(0.2) { rng.random_range(0.0..0.1) } else { 0.0 };
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    let truth: Vec<usize> = (0..n).map(|i| if i < 8 { 1 } else { 2 }).collect();
    for seed in 0..10 {
        let a = detect(&net(n, w.clone()), 1.0, seed).unwrap();
        assert!(same_partition(&a.membership, &truth), "{:?}", a.membership);
    }
}

#[test]
fn isolated_nodes_are_pinned_to_the_reserved_id() {
    let mut w = vec![0.0; 25];
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        w[i * 5 + j] = 1.0;
        w[j * 5 + i] = 1.0;
    }
    let a = detect(&net(5, w), 1.0, 0).unwrap();
    assert_eq!(a.isolated(), vec![3, 4]);
    assert_eq!(a.isolated_id, ISOLATED_ID);
    assert!(a.membership[..3].iter().all(|&c| c != ISOLATED_ID));
}

fn brute_force_makespan(sizes: &[usize], k: usize) -> usize {
    let mut best = usize::MAX;
    let total = k.pow(sizes.len() as u32);
    for code in 0..total {
        let mut load = vec![0; k];
        let mut c = code;
        for &s in sizes {
            load[c % k] += s;
            c /= k;
        }
        if load.iter().all(|&l| l > 0) {
            best = best.min(*load.iter().max().unwrap());
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detect_is_deterministic_and_beats_singletons(seed in any::<u64>(), n in 2usize..=10, density in 0.1f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = connected_graph(&mut rng, n, density);
        let a = detect(&net(n, w.clone()), 1.0, seed).unwrap();
        let b = detect(&net(n, w.clone()), 1.0, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let singletons: Vec<usize> = (1..=n).collect();
        prop_assert!(a.modularity >= modularity_oracle(&w, n, &singletons, 1.0) - 1e-12);
        let opt = best_modularity(&w, n, 1.0);
        prop_assert!(a.modularity >= 0.95 * opt - 1e-9);
    }

    #[test]
    fn lpt_is_a_cover_within_grahams_bound(sizes in prop::collection::vec(1usize..40, 2..=8), k in 1usize..=3) {
        prop_assume!(sizes.len() >= k);
        let bins = lpt_groups(&sizes, k).unwrap();
        let mut seen: Vec<usize> = bins.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..sizes.len()).collect::<Vec<_>>());
        let makespan = bins.iter().map(|b| b.iter().map(|&g| sizes[g]).sum::<usize>()).max().unwrap();
        let opt = brute_force_makespan(&sizes, k);
        prop_assert!(3 * makespan <= 4 * opt, "LPT {makespan} vs optimum {opt}");
    }
}

#[test]
fn combining_example_from_four_communities() {
    // community ids 1..=4 with sizes 12, 14, 25, 30
    let sizes = [12, 14, 25, 30];
    let mut membership = Vec::new();
    for (c, &s) in sizes.iter().enumerate() {
        membership.extend(std::iter::repeat(c + 1).take(s));
    }
    let a = CommunityAssignment {
        membership,
        n_communities: 5,
        isolated_id: ISOLATED_ID,
        gamma: 1.0,
        seed: 0,
        modularity: 0.0,
        all_isolated: false,
    };
    let parts = combine_into_partitions(&a, 2).unwrap();
    assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![42, 39]);
    assert_eq!(lpt_groups(&sizes, 2).unwrap(), vec![vec![3, 0], vec![2, 1]]);
}
