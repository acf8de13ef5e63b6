//! Reference evaluators for the distillation loss and the partition-wise
//! activation-transfer loss. Values only; no gradients.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{exp, log_softmax, sqrt};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("student has {student} logits, teacher has {teacher}")]
    LogitLength { student: usize, teacher: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("teacher has {teacher} partitions, student has {student}")]
    PartitionCount { teacher: usize, student: usize },
    #[error("partition {partition}: teacher width {teacher}, student width {student}")]
    PartitionWidth { partition: usize, teacher: usize, student: usize },
}

/// Cross-entropy `−Σ p · log q` where `p = softmax(target / tau)` and
/// `log q = log_softmax(logits / tau)`.
fn soft_cross_entropy(target: &[f64], logits: &[f64], tau: f64) -> f64 {
    let log_p = log_softmax(target, tau);
    let log_q = log_softmax(logits, tau);
    -log_p.iter().zip(&log_q).map(|(lp, lq)| exp(*lp) * lq).sum::<f64>()
}

/// `(1 − α)·H(y, softmax(s)) + α·H(softmax(t/τ), softmax(s/τ))`, without the
/// `τ²` rescaling some implementations add to the soft term.
pub fn kd_loss(student: &[f64], teacher: &[f64], label: usize, alpha: f64, tau: f64) -> Result<f64, LossError> {
    if student.len() != teacher.len() {
        return Err(LossError::LogitLength { student: student.len(), teacher: teacher.len() });
    }
    if label >= student.len() {
        return Err(LossError::Label { label, n_classes: student.len() });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::Alpha(alpha));
    }
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let hard = -log_softmax(student, 1.0)[label];
    let soft = soft_cross_entropy(teacher, student, tau);
    Ok((1.0 - alpha) * hard + alpha * soft)
}

/// Per-partition vectorized activations of a teacher or of the students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedActivations {
    pub parts: Vec<Vec<f64>>,
}

impl PartitionedActivations {
    pub fn new(parts: Vec<Vec<f64>>) -> Self {
        Self { parts }
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = sqrt(v.iter().map(|x| x * x).sum());
    if norm < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// `Σ_p ‖ t_p/‖t_p‖ − s_p/‖s_p‖ ‖²`. Vectors with norm below `1e-12` are
/// used unnormalized.
pub fn activation_loss(teacher: &PartitionedActivations, student: &PartitionedActivations) -> Result<f64, LossError> {
    if teacher.parts.len() != student.parts.len() {
        return Err(LossError::PartitionCount { teacher: teacher.parts.len(), student: student.parts.len() });
    }
    let mut total = 0.0;
    for (p, (t, s)) in teacher.parts.iter().zip(&student.parts).enumerate() {
        if t.len() != s.len() {
            return Err(LossError::PartitionWidth { partition: p, teacher: t.len(), student: s.len() });
        }
        let tn = normalized(t);
        let sn = normalized(s);
        total += tn.iter().zip(&sn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}
