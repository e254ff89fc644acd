use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::kernel::matrix::{dot, norm};
use crate::scalar::Scalar;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place<S: Scalar>(v: &mut [S]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax"));
    }
    let mut total = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(())
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_sim<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            context: "cosine_sim",
            left: a.len(),
            right: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == S::zero() || nb == S::zero() {
        return Ok(S::zero());
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-S::one()).min(S::one()))
}

/// Mean elementwise Huber loss and its gradient with respect to `pred`.
pub fn huber_loss<S: Scalar>(pred: &[S], target: &[S], delta: S) -> Result<(S, Vec<S>)> {
    if !(delta > S::zero()) {
        return Err(Error::invalid(format!("huber delta must be > 0, got {delta}")));
    }
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            context: "huber_loss",
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("huber_loss"));
    }
    let n = S::lit(pred.len() as f64);
    let half = S::lit(0.5);
    let mut loss = S::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let r = p - t;
        if r.abs() <= delta {
            loss += half * r * r;
            grad.push(r / n);
        } else {
            loss += delta * (r.abs() - half * delta);
            grad.push(delta * r.signum() / n);
        }
    }
    Ok((loss / n, grad))
}

/// Indices of the `k` largest scores in descending order; ties go to the lower index.
pub fn top_k_indices<S: Scalar>(scores: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(scores.len()));
    idx
}

/// Index of the maximum; lowest index on ties.
pub fn argmax<S: Scalar>(v: &[S]) -> Option<usize> {
    top_k_indices(v, 1).first().copied()
}
