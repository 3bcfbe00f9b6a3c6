//! Minimal dense/LSTM layers with hand-written backward passes.
//!
//! Every layer stores its parameters in standard-layout `ndarray` arrays so
//! that optimizers and finite-difference checks can address them as flat
//! slices through [`Params`].

mod adam;
mod dense;
mod init;
mod loss;
mod lstm;
mod mlp;

pub use adam::Adam;
pub use dense::Dense;
pub use init::{orthogonal, uniform_fan_in};
pub use loss::{argmax, categorical_entropy, log_softmax_rows, softmax_cross_entropy, softmax_rows};
pub use lstm::{LstmCache, LstmCell};
pub use mlp::{Mlp, MlpCache};

use crate::scalar::Scalar;

/// Flat views over every trainable parameter, in a fixed order.
pub trait Params<T: Scalar> {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flat(&self) -> Vec<T> {
        self.slices().concat()
    }

    fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(T::zero());
        }
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Copies all parameters from `other`, which must have the same layout.
    fn copy_from(&mut self, other: &Self) {
        let src = other.slices();
        for (dst, src) in self.slices_mut().into_iter().zip(src) {
            dst.copy_from_slice(src);
        }
    }
}

/// Euclidean norm over all parameters, accumulated in `f64`.
pub fn global_norm<T: Scalar, P: Params<T>>(p: &P) -> f64 {
    p.slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}
