//! Modularity-based community detection over filter networks and merging of
//! communities into near-equal partitions.
//!
//! The resolution `gamma` divides the null-model term,
//! `Q = 1/2m · Σ_ij [F_ij − (1/γ)·k_i k_j / 2m] · δ(g_i, g_j)`, so a larger
//! `gamma` favours fewer, larger communities.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::FilterNetwork;

pub use crate::partition::PartitionPlan;

/// Community id reserved for zero-degree filters.
pub const ISOLATED_ID: usize = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommunityError {
    #[error("modularity is undefined for a network with no links")]
    EmptyNetwork,
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("membership has {got} entries for {expected} nodes")]
    MembershipLength { expected: usize, got: usize },
    #[error("only {available} non-isolated communities for {k} partitions; lower gamma or k")]
    TooFewCommunities { available: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroPartitions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    pub membership: Vec<usize>,
    /// Includes the isolated community, which may be empty.
    pub n_communities: usize,
    pub isolated_id: usize,
    pub gamma: f64,
    pub seed: u64,
    pub modularity: f64,
    /// Set when every node is isolated; `modularity` is then reported as 0.
    #[serde(default)]
    pub all_isolated: bool,
}

impl CommunityAssignment {
    /// Members of each community, indexed by id.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_communities];
        for (node, &c) in self.membership.iter().enumerate() {
            out[c].push(node);
        }
        out
    }

    pub fn isolated(&self) -> Vec<usize> {
        self.membership.iter().enumerate().filter(|(_, &c)| c == self.isolated_id).map(|(i, _)| i).collect()
    }

    /// Number of communities other than the isolated one.
    pub fn n_connected(&self) -> usize {
        self.n_communities - 1
    }
}

/// Weighted modularity with resolution `gamma`, summing over ordered pairs.
pub fn modularity(net: &FilterNetwork, membership: &[usize], gamma: f64) -> Result<f64, CommunityError> {
    if !(gamma > 0.0) {
        return Err(CommunityError::BadResolution(gamma));
    }
    let n = net.n_nodes();
    if membership.len() != n {
        return Err(CommunityError::MembershipLength { expected: n, got: membership.len() });
    }
    let degrees = net.weighted_degrees();
    let two_m: f64 = degrees.iter().sum();
    if !(two_m > 0.0) {
        return Err(CommunityError::EmptyNetwork);
    }
    let n_comm = membership.iter().copied().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; n_comm];
    let mut total = vec![0.0; n_comm];
    for i in 0..n {
        total[membership[i]] += degrees[i];
        for j in 0..n {
            if membership[i] == membership[j] {
                internal[membership[i]] += net.weight(i, j);
            }
        }
    }
    let resolution = 1.0 / gamma;
    let q: f64 = internal.iter().zip(&total).map(|(inn, tot)| inn - resolution * tot * tot / two_m).sum();
    Ok(q / two_m)
}

/// Dense weighted graph used inside the sweep; self-loops hold the weight
/// internal to a collapsed community (both orientations).
struct Level {
    n: usize,
    w: Vec<f64>,
    degree: Vec<f64>,
}

impl Level {
    fn new(n: usize, w: Vec<f64>) -> Self {
        let degree = (0..n).map(|i| w[i * n..(i + 1) * n].iter().sum()).collect();
        Self { n, w, degree }
    }
}

/// Repeated single-node moves until no move strictly increases modularity.
/// Returns whether any node changed community.
fn local_moves(level: &Level, membership: &mut [usize], order: &[usize], resolution: f64, two_m: f64) -> bool {
    let n = level.n;
    let mut total = vec![0.0; n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        total[membership[i]] += level.degree[i];
        count[membership[i]] += 1;
    }
    let mut links = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let tolerance = 1e-12 * two_m;
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in order {
            let ki = level.degree[i];
            let own = membership[i];
            for (j, &c) in membership.iter().enumerate() {
                let wij = level.w[i * n + j];
                if j != i && wij > 0.0 {
                    if links[c] == 0.0 {
                        touched.push(c);
                    }
                    links[c] += wij;
                }
            }
            total[own] -= ki;
            count[own] -= 1;
            if count[own] == 0 {
                total[own] = 0.0;
            }
            let gain = |c: usize, k_in: f64| k_in - resolution * total[c] * ki / two_m;
            let mut best = own;
            let mut best_gain = gain(own, links[own]);
            touched.sort_unstable();
            for &c in &touched {
                let g = gain(c, links[c]);
                if g > best_gain + tolerance {
                    best = c;
                    best_gain = g;
                }
            }
            // Moving into an empty community gains exactly zero.
            if best_gain < -tolerance {
                if let Some(empty) = (0..n).find(|&c| count[c] == 0) {
                    best = empty;
                }
            }
            total[best] += ki;
            count[best] += 1;
            if best != own {
                membership[i] = best;
                moved = true;
                moved_any = true;
            }
            for &c in &touched {
                links[c] = 0.0;
            }
            touched.clear();
        }
        if !moved {
            return moved_any;
        }
    }
}

/// Relabels ids to 0.. in order of first appearance.
fn compact(membership: &mut [usize]) -> usize {
    let mut map: Vec<Option<usize>> = vec![None; membership.iter().copied().max().map_or(0, |m| m + 1)];
    let mut next = 0;
    for m in membership.iter_mut() {
        let id = *map[*m].get_or_insert_with(|| {
            next += 1;
            next - 1
        });
        *m = id;
    }
    next
}

/// Louvain-style detection. Several seeded starts (multi-level Louvain passes,
/// plus random partitions on small graphs) are each refined by vertex moves;
/// the best is then perturbed by pairwise community merges. Zero-degree nodes
/// are pinned to [`ISOLATED_ID`] and left out of the sweep.
pub fn detect(net: &FilterNetwork, gamma: f64, seed: u64) -> Result<CommunityAssignment, CommunityError> {
    if !(gamma > 0.0) {
        return Err(CommunityError::BadResolution(gamma));
    }
    let degrees = net.weighted_degrees();
    let active: Vec<usize> = (0..net.n_nodes()).filter(|&i| degrees[i] > 0.0).collect();
    let mut membership = vec![ISOLATED_ID; net.n_nodes()];
    if active.is_empty() {
        return Ok(CommunityAssignment {
            membership,
            n_communities: 1,
            isolated_id: ISOLATED_ID,
            gamma,
            seed,
            modularity: 0.0,
            all_isolated: true,
        });
    }

    let n = active.len();
    let mut w = vec![0.0; n * n];
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            w[a * n + b] = net.weight(i, j);
        }
    }
    let base = Level::new(n, w);
    let two_m: f64 = base.degree.iter().sum();
    let resolution = 1.0 / gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Best of several visiting orders; strict `>` keeps the earliest on ties.
    let mut best: Option<(f64, Vec<usize>)> = None;
    let starts = if n <= RANDOM_START_LIMIT { 2 * RESTARTS } else { RESTARTS };
    for r in 0..starts {
        let mut assignment = if r < RESTARTS {
            louvain_once(&base, resolution, two_m, &mut rng)
        } else {
            // random 2..=4-way start, refined only by vertex moves
            let parts = 2 + r % 3;
            (0..n).map(|_| rng.random_range(0..parts.min(n))).collect()
        };
        vertex_mover(&base, &mut assignment, resolution, two_m);
        let q = level_modularity(&base, &assignment, resolution, two_m);
        if best.as_ref().is_none_or(|(bq, _)| q > *bq + 1e-12) {
            best = Some((q, assignment));
        }
    }
    let (_, mut assignment) = best.expect("at least one restart");
    merge_perturbation(&base, &mut assignment, resolution, two_m);
    let n_connected = compact(&mut assignment);

    for (a, &node) in active.iter().enumerate() {
        membership[node] = assignment[a] + 1;
    }
    let q = modularity(net, &membership, gamma)?;
    Ok(CommunityAssignment {
        membership,
        n_communities: n_connected + 1,
        isolated_id: ISOLATED_ID,
        gamma,
        seed,
        modularity: q,
        all_isolated: false,
    })
}

/// Independent Louvain runs per `detect` call; graphs up to
/// [`RANDOM_START_LIMIT`] nodes get as many random-partition starts on top.
const RESTARTS: usize = 8;
const RANDOM_START_LIMIT: usize = 64;

/// Modularity of a membership over a dense level (self-loops included).
fn level_modularity(level: &Level, membership: &[usize], resolution: f64, two_m: f64) -> f64 {
    let n = level.n;
    let mut internal = vec![0.0; n];
    let mut total = vec![0.0; n];
    for i in 0..n {
        total[membership[i]] += level.degree[i];
        for j in 0..n {
            if membership[i] == membership[j] {
                internal[membership[i]] += level.w[i * n + j];
            }
        }
    }
    (0..n).map(|c| internal[c] / two_m - resolution * (total[c] / two_m).powi(2)).sum()
}

/// Kernighan-Lin style refinement: each round moves every node exactly once,
/// always taking the best available move even when it lowers modularity, then
/// rolls back to the best prefix. Stops when a round brings no gain. Escapes
/// traps that single improving moves cannot.
fn vertex_mover(level: &Level, membership: &mut [usize], resolution: f64, two_m: f64) {
    let n = level.n;
    let tolerance = 1e-12;
    loop {
        let mut total = vec![0.0; n];
        let mut count = vec![0usize; n];
        for i in 0..n {
            total[membership[i]] += level.degree[i];
            count[membership[i]] += 1;
        }
        let mut locked = vec![false; n];
        let mut links = vec![0.0; n];
        let mut history: Vec<(usize, usize)> = Vec::with_capacity(n);
        let (mut running, mut best, mut best_len) = (0.0, 0.0, 0);
        for _ in 0..n {
            // (gain, node, target)
            let mut pick: Option<(f64, usize, usize)> = None;
            for i in (0..n).filter(|&i| !locked[i]) {
                links.iter_mut().for_each(|l| *l = 0.0);
                for j in 0..n {
                    if j != i {
                        links[membership[j]] += level.w[i * n + j];
                    }
                }
                let ki = level.degree[i];
                let own = membership[i];
                let empty = (0..n).find(|&c| count[c] == 0);
                for c in (0..n).filter(|&c| c != own && (count[c] > 0 || Some(c) == empty)) {
                    if count[own] == 1 && count[c] == 0 {
                        continue;
                    }
                    let gain = 2.0 / two_m
                        * ((links[c] - links[own]) - resolution * ki * (total[c] - total[own] + ki) / two_m);
                    if pick.is_none_or(|(g, _, _)| gain > g + tolerance) {
                        pick = Some((gain, i, c));
                    }
                }
            }
            let Some((gain, i, c)) = pick else { break };
            let own = membership[i];
            total[own] -= level.degree[i];
            count[own] -= 1;
            total[c] += level.degree[i];
            count[c] += 1;
            membership[i] = c;
            locked[i] = true;
            history.push((i, own));
            running += gain;
            if running > best + tolerance {
                best = running;
                best_len = history.len();
            }
        }
        for &(i, own) in history[best_len..].iter().rev() {
            membership[i] = own;
        }
        if best_len == 0 {
            return;
        }
    }
}

/// Communities above which pairwise merge trials are skipped.
const MERGE_TRIAL_LIMIT: usize = 24;

/// Tries merging each pair of communities and re-refining; keeps any result
/// that raises modularity and repeats until none does.
fn merge_perturbation(level: &Level, membership: &mut [usize], resolution: f64, two_m: f64) {
    let mut current = level_modularity(level, membership, resolution, two_m);
    'outer: loop {
        let n_comm = compact(membership);
        if n_comm > MERGE_TRIAL_LIMIT {
            return;
        }
        for a in 0..n_comm {
            for b in a + 1..n_comm {
                let mut trial: Vec<usize> = membership.iter().map(|&c| if c == b { a } else { c }).collect();
                vertex_mover(level, &mut trial, resolution, two_m);
                let q = level_modularity(level, &trial, resolution, two_m);
                if q > current + 1e-12 {
                    membership.copy_from_slice(&trial);
                    current = q;
                    continue 'outer;
                }
            }
        }
        return;
    }
}

/// One multi-level pass followed by single-node refinement on `base`.
fn louvain_once(base: &Level, resolution: f64, two_m: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = base.n;
    // node (in `base`) -> community
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut level = Level::new(n, base.w.clone());
    loop {
        let mut order: Vec<usize> = (0..level.n).collect();
        order.shuffle(rng);
        let mut local: Vec<usize> = (0..level.n).collect();
        let moved = local_moves(&level, &mut local, &order, resolution, two_m);
        let n_next = compact(&mut local);
        for a in assignment.iter_mut() {
            *a = local[*a];
        }
        if !moved || n_next == level.n {
            break;
        }
        let mut cw = vec![0.0; n_next * n_next];
        for i in 0..level.n {
            for j in 0..level.n {
                cw[local[i] * n_next + local[j]] += level.w[i * level.n + j];
            }
        }
        level = Level::new(n_next, cw);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    local_moves(base, &mut assignment, &order, resolution, two_m);
    assignment
}

/// Longest-processing-time merge of whole groups into `k` bins.
///
/// Groups are visited by size descending (ties: lower index first) and each
/// goes to the currently smallest bin (ties: lower bin index). Returns the
/// group indices held by each bin.
pub fn lpt_groups(sizes: &[usize], k: usize) -> Result<Vec<Vec<usize>>, CommunityError> {
    if k == 0 {
        return Err(CommunityError::ZeroPartitions);
    }
    if sizes.len() < k {
        return Err(CommunityError::TooFewCommunities { available: sizes.len(), k });
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut bins = vec![Vec::new(); k];
    let mut load = vec![0usize; k];
    for g in order {
        let target = (0..k).min_by_key(|&b| (load[b], b)).unwrap_or(0);
        bins[target].push(g);
        load[target] += sizes[g];
    }
    Ok(bins)
}

/// Merges the non-isolated communities into `k` filter sets, keeping every
/// community whole. Each returned set is sorted ascending.
pub fn combine_into_partitions(assignment: &CommunityAssignment, k: usize) -> Result<Vec<Vec<usize>>, CommunityError> {
    let communities: Vec<Vec<usize>> = assignment
        .communities()
        .into_iter()
        .enumerate()
        .filter(|(id, _)| *id != assignment.isolated_id)
        .map(|(_, members)| members)
        .filter(|m| !m.is_empty())
        .collect();
    combine_groups(&communities, k)
}

pub(crate) fn combine_groups(groups: &[Vec<usize>], k: usize) -> Result<Vec<Vec<usize>>, CommunityError> {
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let bins = lpt_groups(&sizes, k)?;
    Ok(bins
        .into_iter()
        .map(|bin| {
            let mut members: Vec<usize> = bin.iter().flat_map(|&g| groups[g].iter().copied()).collect();
            members.sort_unstable();
            members
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Rule;

    fn net(n: usize, edges: &[(usize, usize, f64)]) -> FilterNetwork {
        let mut w = vec![0.0; n * n];
        for &(i, j, x) in edges {
            w[i * n + j] = x;
            w[j * n + i] = x;
        }
        FilterNetwork::from_dense(n, w, Rule::Ah, 0.0).unwrap()
    }

    fn two_triangles() -> FilterNetwork {
        net(6, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0)])
    }

    #[test]
    fn single_community_has_zero_modularity() {
        let q = modularity(&two_triangles(), &[1; 6], 1.0).unwrap();
        assert!(q.abs() < 1e-15);
    }

    #[test]
    fn two_triangles_modularity() {
        let g = two_triangles();
        assert!((modularity(&g, &[1, 1, 1, 2, 2, 2], 1.0).unwrap() - 0.5).abs() < 1e-15);
        let q_large = modularity(&g, &[1, 1, 1, 2, 2, 2], 1e12).unwrap();
        assert!((q_large - 1.0).abs() < 1e-9);
    }

    #[test]
    fn modularity_errors() {
        let empty = net(3, &[]);
        assert_eq!(modularity(&empty, &[0, 0, 0], 1.0), Err(CommunityError::EmptyNetwork));
        assert!(matches!(modularity(&two_triangles(), &[0; 6], 0.0), Err(CommunityError::BadResolution(_))));
    }

    #[test]
    fn detects_two_triangles_for_any_seed() {
        let g = two_triangles();
        for seed in 0..20 {
            let a = detect(&g, 1.0, seed).unwrap();
            assert_eq!(a.membership, vec![1, 1, 1, 2, 2, 2], "seed {seed}");
            assert_eq!(a.n_connected(), 2);
            assert!((a.modularity - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lone_node_is_isolated() {
        let a = detect(&net(1, &[]), 1.0, 0).unwrap();
        assert_eq!(a.membership, vec![ISOLATED_ID]);
        assert!(a.all_isolated);
    }

    #[test]
    fn zero_degree_nodes_pinned_to_isolated() {
        let mut edges = vec![(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)];
        edges.push((4, 5, 1.0));
        let a = detect(&net(7, &edges), 1.0, 3).unwrap();
        assert_eq!(a.membership[3], ISOLATED_ID);
        assert_eq!(a.membership[6], ISOLATED_ID);
        assert!(a.membership.iter().enumerate().all(|(i, &m)| (m == ISOLATED_ID) == (i == 3 || i == 6)));
    }

    #[test]
    fn combining_four_communities_into_two() {
        // g_1..g_4 at indices 0..3
        let bins = lpt_groups(&[12, 14, 25, 30], 2).unwrap();
        assert_eq!(bins, vec![vec![3, 0], vec![2, 1]]);
        let sizes: Vec<usize> = bins.iter().map(|b| b.iter().map(|&g| [12, 14, 25, 30][g]).sum()).collect();
        assert_eq!(sizes, vec![42, 39]);
    }

    #[test]
    fn equal_communities_one_per_bin() {
        let bins = lpt_groups(&[10, 10, 10, 10], 4).unwrap();
        assert_eq!(bins, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn lopsided_sizes() {
        let bins = lpt_groups(&[50, 1, 1, 1], 2).unwrap();
        assert_eq!(bins, vec![vec![0], vec![1, 2, 3]]);
    }

    #[test]
    fn too_few_communities() {
        assert_eq!(lpt_groups(&[3], 2), Err(CommunityError::TooFewCommunities { available: 1, k: 2 }));
        assert_eq!(lpt_groups(&[3], 0), Err(CommunityError::ZeroPartitions));
    }

    #[test]
    fn combine_skips_isolated() {
        let a = CommunityAssignment {
            membership: vec![0, 1, 1, 2, 0, 3],
            n_communities: 4,
            isolated_id: 0,
            gamma: 1.0,
            seed: 0,
            modularity: 0.0,
            all_isolated: false,
        };
        let parts = combine_into_partitions(&a, 2).unwrap();
        assert_eq!(parts, vec![vec![1, 2], vec![3, 5]]);
    }
}
