use ndarray::{Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Row-wise log-softmax, shifted by the row maximum.
pub fn log_softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = log_softmax_rows(logits);
    out.mapv_inplace(|v| v.exp());
    out
}

/// Mean cross-entropy of `labels` under row-wise softmax of `logits`, and
/// its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> (T, Array2<T>) {
    assert_eq!(logits.nrows(), labels.len());
    let batch = T::lit(labels.len() as f64);
    let logp = log_softmax_rows(logits);
    let mut loss = T::zero();
    let mut grad = logp.mapv(|v| v.exp());
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= T::one();
    }
    grad.mapv_inplace(|g| g / batch);
    (loss / batch, grad)
}

/// Entropy of one categorical given its log-probabilities.
pub fn categorical_entropy<T: Scalar>(logp: &[T]) -> T {
    logp.iter().map(|&l| -l.exp() * l).sum()
}

/// Index of the largest value; ties resolve to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
