//! Activation traces: per-image average activity of every final-convolution
//! filter, plus the labels and the classifier head that consumes them.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::argmax;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("dimension {field} must be at least {min}, got {got}")]
    TooSmall { field: &'static str, min: usize, got: usize },
    #[error("{field} has {got} values, expected {expected}")]
    Length { field: &'static str, expected: usize, got: usize },
    #[error("{field}[{index}] is not finite")]
    NonFinite { field: &'static str, index: usize },
    #[error("labels[{index}] = {label} is out of range for {n_classes} classes")]
    LabelOutOfRange { index: usize, label: u32, n_classes: usize },
    #[error("mask has {got} entries but the trace has {expected} filters")]
    MaskLength { expected: usize, got: usize },
}

/// A dense classifier head, `logits = weights · x + bias`, with
/// `weights` stored row-major as `[n_classes × width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcHead {
    pub n_classes: usize,
    pub width: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FcHead {
    pub fn new(n_classes: usize, width: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self, TraceError> {
        if weights.len() != n_classes * width {
            return Err(TraceError::Length { field: "fc_weights", expected: n_classes * width, got: weights.len() });
        }
        if bias.len() != n_classes {
            return Err(TraceError::Length { field: "fc_bias", expected: n_classes, got: bias.len() });
        }
        check_finite("fc_weights", &weights)?;
        check_finite("fc_bias", &bias)?;
        Ok(Self { n_classes, width, weights, bias })
    }

    /// Logits accumulated in f64 in ascending input order.
    pub fn logits(&self, input: &[f32]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.width);
        (0..self.n_classes)
            .map(|c| {
                let row = &self.weights[c * self.width..(c + 1) * self.width];
                let mut acc = self.bias[c] as f64;
                for (w, x) in row.iter().zip(input) {
                    acc += *w as f64 * *x as f64;
                }
                acc
            })
            .collect()
    }

    /// Arg-max class, lowest index on ties.
    pub fn predict(&self, input: &[f32]) -> usize {
        argmax(&self.logits(input))
    }

    /// The class predicted when every input is zero.
    pub fn bias_class(&self) -> usize {
        argmax(&self.bias)
    }
}

fn check_finite(field: &'static str, values: &[f32]) -> Result<(), TraceError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TraceError::NonFinite { field, index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    n_filters: usize,
    n_images: usize,
    activities: Vec<f32>,
    labels: Vec<u32>,
    fc: FcHead,
}

impl ActivationTrace {
    /// Validates raw parts and clamps negative activities to zero. Returns the
    /// trace and the number of clamped entries.
    pub fn new(
        n_filters: usize,
        n_images: usize,
        mut activities: Vec<f32>,
        labels: Vec<u32>,
        fc: FcHead,
    ) -> Result<(Self, usize), TraceError> {
        if n_filters < 2 {
            return Err(TraceError::TooSmall { field: "n_filters", min: 2, got: n_filters });
        }
        if n_images < 1 {
            return Err(TraceError::TooSmall { field: "n_images", min: 1, got: n_images });
        }
        if fc.n_classes < 1 {
            return Err(TraceError::TooSmall { field: "n_classes", min: 1, got: fc.n_classes });
        }
        if activities.len() != n_images * n_filters {
            return Err(TraceError::Length {
                field: "activities",
                expected: n_images * n_filters,
                got: activities.len(),
            });
        }
        if labels.len() != n_images {
            return Err(TraceError::Length { field: "labels", expected: n_images, got: labels.len() });
        }
        if fc.width != n_filters {
            return Err(TraceError::Length { field: "fc_weights", expected: fc.n_classes * n_filters, got: fc.weights.len() });
        }
        check_finite("activities", &activities)?;
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= fc.n_classes) {
            return Err(TraceError::LabelOutOfRange { index, label, n_classes: fc.n_classes });
        }
        let mut clamped = 0;
        for a in activities.iter_mut() {
            if *a < 0.0 {
                *a = 0.0;
                clamped += 1;
            }
        }
        Ok((Self { n_filters, n_images, activities, labels, fc }, clamped))
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_classes(&self) -> usize {
        self.fc.n_classes
    }

    /// Row-major `[n_images × n_filters]`.
    pub fn activities(&self) -> &[f32] {
        &self.activities
    }

    pub fn image(&self, n: usize) -> &[f32] {
        &self.activities[n * self.n_filters..(n + 1) * self.n_filters]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn fc(&self) -> &FcHead {
        &self.fc
    }

    pub fn max_activity(&self) -> f32 {
        self.activities.iter().copied().fold(0.0, f32::max)
    }

    /// Σ over images of each filter's activity.
    pub fn total_activity(&self) -> Vec<f64> {
        let mut totals = vec![0.0f64; self.n_filters];
        for n in 0..self.n_images {
            for (t, a) in totals.iter_mut().zip(self.image(n)) {
                *t += *a as f64;
            }
        }
        totals
    }

    /// Returns a copy with filters reordered so that new filter `i` is old
    /// filter `perm[i]`, across activities and fc columns.
    pub fn permute_filters(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_filters);
        let nf = self.n_filters;
        let mut activities = Vec::with_capacity(self.activities.len());
        for n in 0..self.n_images {
            let row = self.image(n);
            activities.extend(perm.iter().map(|&p| row[p]));
        }
        let mut weights = Vec::with_capacity(self.fc.weights.len());
        for c in 0..self.fc.n_classes {
            let row = &self.fc.weights[c * nf..(c + 1) * nf];
            weights.extend(perm.iter().map(|&p| row[p]));
        }
        Self {
            n_filters: nf,
            n_images: self.n_images,
            activities,
            labels: self.labels.clone(),
            fc: FcHead { weights, ..self.fc.clone() },
        }
    }

    /// Fraction of images whose masked prediction matches the label.
    pub fn eval_accuracy(&self, mask: &FilterMask) -> Result<f64, TraceError> {
        if mask.keep.len() != self.n_filters {
            return Err(TraceError::MaskLength { expected: self.n_filters, got: mask.keep.len() });
        }
        let mut masked = vec![0.0f32; self.n_filters];
        let mut correct = 0usize;
        for n in 0..self.n_images {
            for ((m, a), k) in masked.iter_mut().zip(self.image(n)).zip(&mask.keep) {
                *m = if *k { *a } else { 0.0 };
            }
            if self.fc.predict(&masked) == self.labels[n] as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.n_images as f64)
    }

    /// `eval_accuracy(all ones) − eval_accuracy(mask)`.
    pub fn delta_val(&self, mask: &FilterMask) -> Result<f64, TraceError> {
        Ok(self.eval_accuracy(&FilterMask::all(self.n_filters))? - self.eval_accuracy(mask)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterMask {
    pub keep: Vec<bool>,
}

impl FilterMask {
    pub fn all(n: usize) -> Self {
        Self { keep: vec![true; n] }
    }

    pub fn none(n: usize) -> Self {
        Self { keep: vec![false; n] }
    }

    /// Keeps everything except the listed filters.
    pub fn dropping(n: usize, dropped: &[usize]) -> Self {
        let mut mask = Self::all(n);
        for &d in dropped {
            mask.keep[d] = false;
        }
        mask
    }
}
