//! Core algorithms for partitioning a teacher network's final-convolution
//! knowledge into disjoint student modules, and for evaluating, costing and
//! executing those modules.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, networking and
//! the command line live in the companion `nonn` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod arch;
pub mod community;
pub mod engine;
pub mod graph;
pub mod losses;
pub mod math;
pub mod partition;
pub mod robustness;
pub mod simulator;
pub mod trace;

pub use arch::{ArchitectureDescriptor, Layer, Op, Shape, StudentTemplate};
pub use community::{CommunityAssignment, PartitionPlan};
pub use engine::{Tensor, TensorProgram};
pub use graph::{FilterNetwork, Rule};
pub use partition::Budgets;
pub use trace::{ActivationTrace, FilterMask};
