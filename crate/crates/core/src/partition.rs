//! End-to-end knowledge partitioning: find a droppable filter set that keeps
//! teacher accuracy, then merge the remaining communities into `k` students
//! that fit the memory and FLOP budgets.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, Cost, StudentTemplate};
use crate::community::{combine_groups, detect, CommunityAssignment, CommunityError};
use crate::graph::{build_ah, default_eps_act};
use crate::math::abs;
use crate::trace::{ActivationTrace, FilterMask, TraceError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Max parameters per student.
    pub mem: u64,
    /// Max FLOPs per student.
    pub flops: u64,
    /// Max allowed teacher accuracy drop from removing the dropped set.
    pub eps_val: f64,
    /// Allowed spread between largest and smallest partition, as a fraction
    /// of the mean partition size.
    pub imbalance: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { mem: 500_000, flops: 200_000_000, eps_val: 0.001, imbalance: 0.1 }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), PartitionError> {
        let ok = self.mem > 0
            && self.flops > 0
            && (0.0..1.0).contains(&self.eps_val)
            && self.imbalance > 0.0
            && self.imbalance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(PartitionError::InvalidBudgets(*self))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("invalid budgets {0:?}")]
    InvalidBudgets(Budgets),
    #[error("k must be at least 1")]
    ZeroStudents,
    #[error("partition {partition} ({size} filters) costs {params} params / {flops} FLOPs, over budget ({mem} params / {flop_budget} FLOPs)")]
    OverBudget { partition: usize, size: usize, params: u64, flops: u64, mem: u64, flop_budget: u64 },
    #[error(transparent)]
    Community(#[from] CommunityError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// `P_0`, sorted ascending.
    pub dropped: Vec<usize>,
    /// `P_1..P_k`, each sorted ascending.
    pub partitions: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    pub delta_val: f64,
    pub costs: Vec<Cost>,
    pub gamma: f64,
    pub seed: u64,
    pub budgets: Budgets,
    /// Whether the size spread is within `budgets.imbalance` of the mean.
    pub balanced: bool,
    /// Filters moved back out of the isolated community to meet `eps_val`.
    #[serde(default)]
    pub restored: Vec<usize>,
}

impl PartitionPlan {
    pub fn n_filters(&self) -> usize {
        self.dropped.len() + self.sizes.iter().sum::<usize>()
    }

    /// `max |P_i| − min |P_i|` over the student partitions.
    pub fn imbalance(&self) -> usize {
        let max = self.sizes.iter().copied().max().unwrap_or(0);
        let min = self.sizes.iter().copied().min().unwrap_or(0);
        max - min
    }

    pub fn within_tolerance(sizes: &[usize], tol: f64) -> bool {
        if sizes.is_empty() {
            return true;
        }
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        spread as f64 <= tol * mean
    }

    /// True when `P_0..P_k` are pairwise disjoint and cover `0..n_filters`.
    pub fn is_exact_cover(&self, n_filters: usize) -> bool {
        let mut seen = alloc::vec![false; n_filters];
        for &f in self.dropped.iter().chain(self.partitions.iter().flatten()) {
            if f >= n_filters || seen[f] {
                return false;
            }
            seen[f] = true;
        }
        seen.iter().all(|&s| s)
    }
}

/// Result of the dropped-set search, before partitions are assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedSet {
    pub dropped: Vec<usize>,
    /// Restored filters in the order they were restored.
    pub restored: Vec<usize>,
    pub delta_val: f64,
    pub iterations: usize,
}

/// Starts from the isolated community and restores the highest-activity
/// filter until the accuracy drop falls below `eps_val`.
pub fn find_dropped(trace: &ActivationTrace, assignment: &CommunityAssignment, eps_val: f64) -> Result<DroppedSet, TraceError> {
    let n = trace.n_filters();
    let mut dropped = assignment.isolated();
    let totals = trace.total_activity();
    let mut restored = Vec::new();
    let mut delta = trace.delta_val(&FilterMask::dropping(n, &dropped))?;
    let mut iterations = 0;
    while abs(delta) >= eps_val && !dropped.is_empty() {
        let (pos, _) = dropped
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (pos, &f)| match best {
                Some((_, t)) if t >= totals[f] => best,
                _ => Some((pos, totals[f])),
            })
            .expect("non-empty");
        restored.push(dropped.remove(pos));
        delta = trace.delta_val(&FilterMask::dropping(n, &dropped))?;
        iterations += 1;
    }
    Ok(DroppedSet { dropped, restored, delta_val: delta, iterations })
}

/// Full pipeline: AH network, community detection, dropped-set search,
/// longest-processing-time merge into `k` partitions and a budget check.
/// Restored filters join the merge as singleton groups.
pub fn solve(
    trace: &ActivationTrace,
    k: usize,
    gamma: f64,
    seed: u64,
    budgets: &Budgets,
    template: &StudentTemplate,
) -> Result<PartitionPlan, PartitionError> {
    budgets.validate()?;
    if k == 0 {
        return Err(PartitionError::ZeroStudents);
    }
    let net = build_ah(trace, default_eps_act(trace));
    let assignment = detect(&net, gamma, seed)?;
    solve_with_assignment(trace, &assignment, k, budgets, template)
}

pub fn solve_with_assignment(
    trace: &ActivationTrace,
    assignment: &CommunityAssignment,
    k: usize,
    budgets: &Budgets,
    template: &StudentTemplate,
) -> Result<PartitionPlan, PartitionError> {
    budgets.validate()?;
    if k == 0 {
        return Err(PartitionError::ZeroStudents);
    }
    let found = find_dropped(trace, assignment, budgets.eps_val)?;

    let mut groups: Vec<Vec<usize>> = assignment
        .communities()
        .into_iter()
        .enumerate()
        .filter(|(id, members)| *id != assignment.isolated_id && !members.is_empty())
        .map(|(_, members)| members)
        .collect();
    groups.extend(found.restored.iter().map(|&f| alloc::vec![f]));
    let partitions = combine_groups(&groups, k)?;
    let sizes: Vec<usize> = partitions.iter().map(Vec::len).collect();

    let mut costs = Vec::with_capacity(k);
    for (i, &size) in sizes.iter().enumerate() {
        let cost = template.student_cost(size)?;
        if cost.params >= budgets.mem || cost.flops >= budgets.flops {
            return Err(PartitionError::OverBudget {
                partition: i + 1,
                size,
                params: cost.params,
                flops: cost.flops,
                mem: budgets.mem,
                flop_budget: budgets.flops,
            });
        }
        costs.push(cost);
    }

    let mut dropped = found.dropped;
    dropped.sort_unstable();
    Ok(PartitionPlan {
        balanced: PartitionPlan::within_tolerance(&sizes, budgets.imbalance),
        dropped,
        partitions,
        sizes,
        delta_val: found.delta_val,
        costs,
        gamma: assignment.gamma,
        seed: assignment.seed,
        budgets: *budgets,
        restored: found.restored,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentPartition {
    pub student: usize,
    /// Index into the plan's partitions.
    pub source: usize,
    pub filters: Vec<usize>,
}

/// Spreads a plan over `n_students` by cycling through its partitions and
/// giving each student an independently shuffled copy of its filters.
pub fn replicate_with_shuffle(plan: &PartitionPlan, n_students: usize, seed: u64) -> Vec<StudentPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = plan.partitions.len();
    (0..n_students)
        .map(|student| {
            let source = student % k;
            let mut filters = plan.partitions[source].clone();
            filters.shuffle(&mut rng);
            StudentPartition { student, source, filters }
        })
        .collect()
}
