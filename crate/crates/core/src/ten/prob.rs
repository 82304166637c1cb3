//! Value-level helpers on explicit vectors and distributions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::PROB_FLOOR;

/// Norm threshold below which a vector cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if !(n > T::lit(NORM_EPS)) {
        return Err(Error::Degenerate(format!("vector norm {n} too small to normalize")));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a], &[b]));
    }
    Ok(())
}

/// `H(y, p) = -sum_i y_i log max(p_i, 1e-12)`.
pub fn cross_entropy<T: Scalar>(y: &[T], p: &[T]) -> Result<T> {
    check_len("cross_entropy", y.len(), p.len())?;
    let floor = T::lit(PROB_FLOOR);
    Ok(-y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| yi * pi.max(floor).ln())
        .sum::<T>())
}

/// `KL(q || p) = sum_i q_i log(q_i / p_i)`, both sides floored at 1e-12.
pub fn kl_divergence<T: Scalar>(q: &[T], p: &[T]) -> Result<T> {
    check_len("kl_divergence", q.len(), p.len())?;
    let floor = T::lit(PROB_FLOOR);
    Ok(q.iter()
        .zip(p)
        .map(|(&qi, &pi)| qi * (qi.max(floor).ln() - pi.max(floor).ln()))
        .sum())
}
