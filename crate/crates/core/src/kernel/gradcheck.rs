use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad<S: Scalar>(
    mut f: impl FnMut(&[S]) -> S,
    x: &[S],
    eps: S,
) -> Result<Vec<S>> {
    if !(eps > S::zero()) {
        return Err(Error::invalid(format!("finite difference eps must be > 0, got {eps}")));
    }
    let mut probe = x.to_vec();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        out.push((plus - minus) / two_eps);
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ops::huber_loss;
    use proptest::prelude::*;

    #[test]
    fn square_and_constant() {
        let g = finite_diff_grad(|x: &[f64]| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_: &[f64]| 4.2, &[1.0, -7.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(finite_diff_grad(|_: &[f64]| f64::NAN, &[1.0], 1e-5).is_err());
        assert!(finite_diff_grad(|x: &[f64]| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn huber_gradient_cross_check() {
        let target = [0.3, -1.0, 2.0];
        let pred = [0.9, 1.4, 1.2];
        let (_, g) = huber_loss(&pred, &target, 1.0).unwrap();
        let fd = finite_diff_grad(|p: &[f64]| huber_loss(p, &target, 1.0).unwrap().0, &pred, 1e-5).unwrap();
        for (a, n) in g.iter().zip(&fd) {
            assert!(relative_error(*a, *n, 1e-12) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn huber_grad_matches_fd_away_from_kink(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8),
            delta in 0.2f64..3.0,
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(pred.iter().zip(&target).all(|(p, t)| ((p - t).abs() - delta).abs() > 1e-3));
            let (_, g) = huber_loss(&pred, &target, delta).unwrap();
            let fd = finite_diff_grad(|p: &[f64]| huber_loss(p, &target, delta).unwrap().0, &pred, 1e-6).unwrap();
            for (a, n) in g.iter().zip(&fd) {
                prop_assert!(relative_error(*a, *n, 1e-8) < 1e-5);
            }
        }
    }
}
