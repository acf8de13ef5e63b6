//! Accuracy under device failure. Absent students contribute zeros to the
//! concatenated head input.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{FcHead, TraceError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RobustnessError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("student {student} is not in 0..{n_students}")]
    UnknownStudent { student: usize, n_students: usize },
    #[error("head expects width {head}, students sum to {students}")]
    HeadWidth { head: usize, students: usize },
    #[error("{0} students is too many to enumerate")]
    TooManyStudents(usize),
}

/// Recorded per-student outputs for every test image, row-major
/// `[n_images × Σ widths]` with students in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTrace {
    widths: Vec<usize>,
    n_images: usize,
    outputs: Vec<f32>,
    labels: Vec<u32>,
    fc: FcHead,
}

impl ContributionTrace {
    pub fn new(widths: Vec<usize>, n_images: usize, outputs: Vec<f32>, labels: Vec<u32>, fc: FcHead) -> Result<Self, RobustnessError> {
        let total: usize = widths.iter().sum();
        if fc.width != total {
            return Err(RobustnessError::HeadWidth { head: fc.width, students: total });
        }
        if outputs.len() != n_images * total {
            return Err(TraceError::Length { field: "outputs", expected: n_images * total, got: outputs.len() }.into());
        }
        if labels.len() != n_images {
            return Err(TraceError::Length { field: "labels", expected: n_images, got: labels.len() }.into());
        }
        if let Some(index) = outputs.iter().position(|v| !v.is_finite()) {
            return Err(TraceError::NonFinite { field: "outputs", index }.into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= fc.n_classes) {
            return Err(TraceError::LabelOutOfRange { index, label, n_classes: fc.n_classes }.into());
        }
        Ok(Self { widths, n_images, outputs, labels, fc })
    }

    pub fn n_students(&self) -> usize {
        self.widths.len()
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn outputs(&self) -> &[f32] {
        &self.outputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn fc(&self) -> &FcHead {
        &self.fc
    }

    /// Concatenated head input for image `n`.
    pub fn row(&self, n: usize) -> &[f32] {
        let w = self.fc.width;
        &self.outputs[n * w..(n + 1) * w]
    }

    /// Predictions with only `active` students present.
    pub fn predictions(&self, active: &[usize]) -> Result<Vec<usize>, RobustnessError> {
        let mut keep = vec![false; self.fc.width];
        let mut offset = 0;
        let mut on = vec![false; self.widths.len()];
        for &s in active {
            if s >= self.widths.len() {
                return Err(RobustnessError::UnknownStudent { student: s, n_students: self.widths.len() });
            }
            on[s] = true;
        }
        for (s, &w) in self.widths.iter().enumerate() {
            keep[offset..offset + w].iter_mut().for_each(|k| *k = on[s]);
            offset += w;
        }
        let mut buf = vec![0.0f32; self.fc.width];
        Ok((0..self.n_images)
            .map(|n| {
                for ((b, v), k) in buf.iter_mut().zip(self.row(n)).zip(&keep) {
                    *b = if *k { *v } else { 0.0 };
                }
                self.fc.predict(&buf)
            })
            .collect())
    }

    pub fn subset_accuracy(&self, active: &[usize]) -> Result<f64, RobustnessError> {
        let preds = self.predictions(active)?;
        let correct = preds.iter().zip(&self.labels).filter(|(p, l)| **p == **l as usize).count();
        Ok(correct as f64 / self.n_images as f64)
    }

    /// Accuracy summary for every subset size `0..=n_students`.
    pub fn failure_curve(&self) -> Result<Vec<CurveRow>, RobustnessError> {
        let n = self.widths.len();
        if n > 20 {
            return Err(RobustnessError::TooManyStudents(n));
        }
        let mut rows: Vec<CurveRow> =
            (0..=n).map(|size| CurveRow { size, count: 0, min: f64::INFINITY, mean: 0.0, max: f64::NEG_INFINITY }).collect();
        for mask in 0u32..(1u32 << n) {
            let active: Vec<usize> = (0..n).filter(|&s| mask & (1 << s) != 0).collect();
            let acc = self.subset_accuracy(&active)?;
            let row = &mut rows[active.len()];
            row.count += 1;
            row.min = row.min.min(acc);
            row.max = row.max.max(acc);
            row.mean += acc;
        }
        for row in rows.iter_mut() {
            row.mean /= row.count as f64;
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Active students.
    pub size: usize,
    /// Subsets of this size.
    pub count: u64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}
