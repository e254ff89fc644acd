//! Dense linear algebra, losses, optimizer and gradient-check utilities.
//!
//! Everything here is a pure function of its inputs.

mod adam;
mod gradcheck;
mod matrix;
mod ops;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::{dot, norm, DenseMatrix};
pub use ops::{argmax, cosine_sim, huber_loss, softmax, softmax_in_place, top_k_indices};
