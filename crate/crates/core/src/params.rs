//! Named access to trainable tensors.

use crate::error::{Error, Result};
use crate::kernel::DenseMatrix;
use crate::scalar::Scalar;

/// A component that owns trainable tensors.
///
/// `named` and `tensors_mut` must enumerate the same tensors in the same
/// order; optimizer state, serialization and aggregation all rely on it.
pub trait Params<S: Scalar> {
    fn named(&self) -> Vec<(String, &DenseMatrix<S>)>;

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<S>>;

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    fn zeroed(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(S::zero()));
        out
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src: Vec<&DenseMatrix<S>> = other.named().into_iter().map(|(_, t)| t).collect();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::LengthMismatch {
                context: "Params::accumulate",
                left: dst.len(),
                right: src.len(),
            });
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.add_assign(s)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, alpha: S) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(alpha));
    }

    /// Copies tensor values from `other`, which must have identical shapes.
    fn copy_from(&mut self, other: &Self) -> Result<()> {
        let src: Vec<&DenseMatrix<S>> = other.named().into_iter().map(|(_, t)| t).collect();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::LengthMismatch {
                context: "Params::copy_from",
                left: dst.len(),
                right: src.len(),
            });
        }
        for (d, s) in dst.into_iter().zip(src) {
            s.ensure_shape("Params::copy_from", d.rows(), d.cols())?;
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a, S>(
    prefix: &str,
    inner: Vec<(String, &'a DenseMatrix<S>)>,
) -> Vec<(String, &'a DenseMatrix<S>)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
