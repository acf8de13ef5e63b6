//! Filter activation networks.
//!
//! Nodes are final-convolution filters. Two rules weight the link between
//! filters `i` and `j`, summed over validation images:
//!
//! * activation hubs (AH): `a_i · a_j · |a_i − a_j|`, linking strong filters
//!   to weak ones;
//! * co-activation (CA): `a_i · a_j / (|a_i − a_j| + 1)`, linking filters that
//!   fire together.
//!
//! An image contributes nothing to a pair when either activity is below the
//! floor `eps_act`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{abs, pairwise_sum_by};
use crate::trace::ActivationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Ah,
    Ca,
}

impl Rule {
    #[inline]
    fn weight(self, a: f64, b: f64) -> f64 {
        match self {
            Rule::Ah => a * b * abs(a - b),
            Rule::Ca => a * b / (abs(a - b) + 1.0),
        }
    }
}

/// Dense symmetric adjacency with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterNetwork {
    n_nodes: usize,
    weights: Vec<f64>,
    pub rule: Rule,
    pub eps_act: f64,
}

/// Activity floor used when the caller does not pick one: `1e-6` of the
/// largest activity in the trace.
pub fn default_eps_act(trace: &ActivationTrace) -> f64 {
    1e-6 * trace.max_activity() as f64
}

impl FilterNetwork {
    /// Builds a network from a full row-major matrix. The diagonal is forced
    /// to zero; the matrix must be symmetric, finite and non-negative.
    pub fn from_dense(n_nodes: usize, mut weights: Vec<f64>, rule: Rule, eps_act: f64) -> Option<Self> {
        if weights.len() != n_nodes * n_nodes {
            return None;
        }
        for i in 0..n_nodes {
            weights[i * n_nodes + i] = 0.0;
            for j in 0..i {
                let w = weights[i * n_nodes + j];
                if !w.is_finite() || w < 0.0 || w != weights[j * n_nodes + i] {
                    return None;
                }
            }
        }
        Some(Self { n_nodes, weights, rule, eps_act })
    }

    /// Builds a network from the upper triangle (row-major, `i < j`).
    pub fn from_upper_triangle(n_nodes: usize, upper: &[f64], rule: Rule, eps_act: f64) -> Option<Self> {
        if upper.len() != n_nodes * n_nodes.saturating_sub(1) / 2 {
            return None;
        }
        let mut weights = vec![0.0; n_nodes * n_nodes];
        let mut k = 0;
        for i in 0..n_nodes {
            for j in i + 1..n_nodes {
                weights[i * n_nodes + j] = upper[k];
                weights[j * n_nodes + i] = upper[k];
                k += 1;
            }
        }
        Self::from_dense(n_nodes, weights, rule, eps_act)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n_nodes + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n_nodes;
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.weight(i, j));
            }
        }
        out
    }

    /// Weighted degrees `k_i = Σ_j F_ij`.
    pub fn weighted_degrees(&self) -> Vec<f64> {
        (0..self.n_nodes)
            .map(|i| self.weights[i * self.n_nodes..(i + 1) * self.n_nodes].iter().sum())
            .collect()
    }

    /// `2m = Σ_ij F_ij` over ordered pairs.
    pub fn total_weight(&self) -> f64 {
        self.weighted_degrees().iter().sum()
    }

    /// Network whose node `i` is this network's node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes;
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                weights[i * n + j] = self.weight(perm[i], perm[j]);
            }
        }
        Self { n_nodes: n, weights, rule: self.rule, eps_act: self.eps_act }
    }
}

/// Pairwise evaluation of `rule` with the activity floor.
pub fn build(trace: &ActivationTrace, rule: Rule, eps_act: f64) -> FilterNetwork {
    assert!(eps_act >= 0.0, "eps_act must be non-negative");
    let n = trace.n_filters();
    let acts = trace.activities();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let w = pairwise_sum_by(0, trace.n_images(), |img| {
                let a = acts[img * n + i] as f64;
                let b = acts[img * n + j] as f64;
                if a < eps_act || b < eps_act {
                    0.0
                } else {
                    rule.weight(a, b)
                }
            });
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    FilterNetwork { n_nodes: n, weights, rule, eps_act }
}

pub fn build_ah(trace: &ActivationTrace, eps_act: f64) -> FilterNetwork {
    build(trace, Rule::Ah, eps_act)
}

pub fn build_ca(trace: &ActivationTrace, eps_act: f64) -> FilterNetwork {
    build(trace, Rule::Ca, eps_act)
}

/// Matrix form of the AH rule: `Σ_n (a_n a_nᵀ) ⊙ |D_n − D_nᵀ|`, where every
/// column of `D_n` is `a_n`. Images are reduced as whole matrices over a fixed
/// binary tree. No activity floor.
pub fn build_ah_matrix(trace: &ActivationTrace) -> FilterNetwork {
    let n = trace.n_filters();
    let mut weights = reduce_images(trace, 0, trace.n_images());
    for i in 0..n {
        weights[i * n + i] = 0.0;
    }
    FilterNetwork { n_nodes: n, weights, rule: Rule::Ah, eps_act: 0.0 }
}

fn image_matrix(trace: &ActivationTrace, img: usize) -> Vec<f64> {
    let n = trace.n_filters();
    let a: Vec<f64> = trace.image(img).iter().map(|&x| x as f64).collect();
    // D[i][j] = a_i, so (D - Dᵀ)[i][j] = a_i - a_j.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let outer = a[i] * a[j];
            let diff = abs(a[i] - a[j]);
            m[i * n + j] = outer * diff;
        }
    }
    m
}

fn reduce_images(trace: &ActivationTrace, start: usize, end: usize) -> Vec<f64> {
    const LEAF: usize = 8;
    let n = trace.n_filters();
    if end - start <= LEAF {
        let mut acc = vec![0.0; n * n];
        for img in start..end {
            for (s, v) in acc.iter_mut().zip(image_matrix(trace, img)) {
                *s += v;
            }
        }
        return acc;
    }
    let mid = start + (end - start) / 2;
    let mut left = reduce_images(trace, start, mid);
    let right = reduce_images(trace, mid, end);
    for (l, r) in left.iter_mut().zip(right) {
        *l += r;
    }
    left
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::FcHead;

    fn trace(n_filters: usize, rows: &[&[f32]]) -> ActivationTrace {
        let acts: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let fc = FcHead::new(1, n_filters, vec![0.0; n_filters], vec![0.0]).unwrap();
        ActivationTrace::new(n_filters, rows.len(), acts, vec![0; rows.len()], fc).unwrap().0
    }

    #[test]
    fn ah_single_image() {
        let net = build_ah(&trace(2, &[&[2.0, 1.0]]), 0.0);
        assert_eq!(net.weight(0, 1), 2.0);
        assert_eq!(net.weight(1, 0), 2.0);
        assert_eq!(net.weight(0, 0), 0.0);
    }

    #[test]
    fn ah_equal_activities_contribute_nothing() {
        let net = build_ah(&trace(2, &[&[3.0, 3.0], &[1.0, 2.0]]), 0.0);
        assert_eq!(net.weight(0, 1), 2.0);
    }

    #[test]
    fn floor_suppresses_links() {
        assert_eq!(build_ah(&trace(2, &[&[1.0, 0.0]]), 1e-6).weight(0, 1), 0.0);
        assert_eq!(build_ca(&trace(2, &[&[0.0, 5.0]]), 1e-6).weight(0, 1), 0.0);
    }

    #[test]
    fn floor_is_per_image() {
        let t = trace(2, &[&[1.0, 0.0], &[2.0, 1.0]]);
        assert_eq!(build_ah(&t, 1e-6).weight(0, 1), 2.0);
    }

    #[test]
    fn ca_examples() {
        assert_eq!(build_ca(&trace(2, &[&[1.0, 1.0]]), 0.0).weight(0, 1), 1.0);
        assert_eq!(build_ca(&trace(2, &[&[2.0, 1.0]]), 0.0).weight(0, 1), 1.0);
    }

    #[test]
    fn matrix_form_of_constant_image_is_empty() {
        let net = build_ah_matrix(&trace(3, &[&[1.0, 1.0, 1.0]]));
        assert!(net.weights().iter().all(|w| *w == 0.0));
    }

    #[test]
    fn degrees() {
        let net = build_ah(&trace(2, &[&[2.0, 1.0]]), 0.0);
        assert_eq!(net.weighted_degrees(), vec![2.0, 2.0]);
        let empty = FilterNetwork::from_dense(3, vec![0.0; 9], Rule::Ah, 0.0).unwrap();
        assert_eq!(empty.weighted_degrees(), vec![0.0; 3]);
    }

    #[test]
    fn degree_sum_is_twice_upper_triangle() {
        let t = trace(5, &[&[0.3, 1.7, 0.0, 2.2, 0.9], &[1.1, 0.2, 0.4, 0.8, 3.0]]);
        let net = build_ah(&t, 0.0);
        let upper: f64 = net.upper_triangle().iter().sum();
        let degrees: f64 = net.weighted_degrees().iter().sum();
        assert!((degrees - 2.0 * upper).abs() <= 1e-12 * degrees);
    }

    #[test]
    fn upper_triangle_round_trip() {
        let t = trace(4, &[&[0.3, 1.7, 0.1, 2.2]]);
        let net = build_ca(&t, 0.0);
        let back = FilterNetwork::from_upper_triangle(4, &net.upper_triangle(), Rule::Ca, 0.0).unwrap();
        assert_eq!(back, net);
        assert!(FilterNetwork::from_dense(2, vec![0.0, 1.0, 2.0, 0.0], Rule::Ah, 0.0).is_none());
    }
}
