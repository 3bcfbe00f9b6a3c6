use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dense, Params};
use crate::scalar::Scalar;

/// Stack of dense layers with `tanh` between them. When `activate_last` is
/// set the final layer is followed by `tanh` too (a feature trunk);
/// otherwise it emits raw logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub activate_last: bool,
}

/// Activations kept from a forward pass: `inputs[l]` feeds layer `l`,
/// `outputs[l]` is what it produced (after `tanh` where applied).
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub inputs: Vec<Array2<T>>,
    pub outputs: Vec<Array2<T>>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &Array2<T> {
        self.outputs.last().expect("non-empty network")
    }
}

impl<T: Scalar> Mlp<T> {
    /// Orthogonal hidden layers with gain `hidden_gain`; the last layer uses
    /// `last_gain`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activate_last: bool,
        hidden_gain: f64,
        last_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let count = sizes.len() - 1;
        let layers = (0..count)
            .map(|l| {
                let gain = if l + 1 == count { last_gain } else { hidden_gain };
                Dense::orthogonal(sizes[l], sizes[l + 1], gain, rng)
            })
            .collect();
        Self { layers, activate_last }
    }

    pub fn zeros(sizes: &[usize], activate_last: bool) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, activate_last }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect();
        Self { layers, activate_last: self.activate_last }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty network").outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.inputs()];
        s.extend(self.layers.iter().map(|l| l.outputs()));
        s
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_last
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = self.layers[0].forward(x);
        if self.activated(0) {
            h.mapv_inplace(|v| v.tanh());
        }
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(h.view());
            if self.activated(l) {
                h.mapv_inplace(|v| v.tanh());
            }
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> MlpCache<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(cur.view());
            if self.activated(l) {
                h.mapv_inplace(|v| v.tanh());
            }
            inputs.push(cur);
            cur = h.clone();
            outputs.push(h);
        }
        MlpCache { inputs, outputs }
    }

    /// Backpropagates `dout` (gradient w.r.t. the network output) and
    /// accumulates into `grad`. Returns `dL/dx` when `input_grad` is set.
    pub fn backward(&self, cache: &MlpCache<T>, dout: ArrayView2<T>, grad: &mut Mlp<T>, input_grad: bool) -> Option<Array2<T>> {
        let mut delta = dout.to_owned();
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                let out = &cache.outputs[l];
                ndarray::Zip::from(&mut delta).and(out).for_each(|d, &a| *d *= T::one() - a * a);
            }
            let layer = &self.layers[l];
            if l == 0 && !input_grad {
                layer.accumulate(cache.inputs[0].view(), delta.view(), &mut grad.layers[0]);
                return None;
            }
            delta = layer.backward(cache.inputs[l].view(), delta.view(), &mut grad.layers[l]);
        }
        Some(delta)
    }
}

impl<T: Scalar> Params<T> for Mlp<T> {
    fn slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }
}
