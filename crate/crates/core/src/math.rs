//! Small numeric helpers shared across modules.

/// Sums `values` with a fixed pairwise tree, so the result depends only on
/// the input order and never on how a caller chunked the work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += *v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i` in `range`, without materializing the terms.
pub fn pairwise_sum_by<F: Fn(usize) -> f64 + Copy>(start: usize, end: usize, f: F) -> f64 {
    const LEAF: usize = 8;
    if end - start <= LEAF {
        let mut acc = 0.0;
        for i in start..end {
            acc += f(i);
        }
        return acc;
    }
    let mid = start + (end - start) / 2;
    pairwise_sum_by(start, mid, f) + pairwise_sum_by(mid, end, f)
}

/// Index of the largest value; ties go to the lowest index. NaN never wins.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// Numerically stable log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> alloc::vec::Vec<f64> {
    let scaled: alloc::vec::Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scaled.iter().map(|s| exp(s - max)).sum();
    let log_z = max + ln(sum);
    scaled.iter().map(|s| s - log_z).collect()
}
