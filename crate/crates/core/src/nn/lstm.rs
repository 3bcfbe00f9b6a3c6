use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::{orthogonal, uniform_fan_in};
use super::Params;
use crate::scalar::Scalar;

/// Single-layer LSTM. Gate blocks in the `4H` axis are ordered
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LstmCell<T> {
    /// `inputs x 4H`
    pub w_x: Array2<T>,
    /// `H x 4H`
    pub w_h: Array2<T>,
    pub bias: Array1<T>,
}

/// Per-step activations of a forward pass over a sequence.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    xs: Vec<Array2<T>>,
    /// `hs[0]` and `cs[0]` are the zero initial state.
    hs: Vec<Array2<T>>,
    cs: Vec<Array2<T>>,
    /// Post-nonlinearity gates `[i f g o]`, `batch x 4H`.
    gates: Vec<Array2<T>>,
}

impl<T: Scalar> LstmCache<T> {
    pub fn last_hidden(&self) -> &Array2<T> {
        self.hs.last().expect("hidden state")
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> LstmCell<T> {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((inputs, 4 * hidden)),
            w_h: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Fan-in uniform input weights, orthogonal recurrent blocks, forget bias 1.
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut cell = Self::zeros(inputs, hidden);
        cell.w_x = uniform_fan_in(inputs, 4 * hidden, rng);
        for k in 0..4 {
            let block: Array2<T> = orthogonal(hidden, hidden, 1.0, rng);
            cell.w_h.slice_mut(s![.., k * hidden..(k + 1) * hidden]).assign(&block);
        }
        cell.bias.slice_mut(s![hidden..2 * hidden]).fill(T::one());
        cell
    }

    pub fn inputs(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.hidden())
    }

    /// Runs the sequence from a zero state; returns the last hidden state.
    pub fn forward(&self, xs: &[Array2<T>]) -> Array2<T> {
        self.forward_cached(xs).last_hidden().clone()
    }

    pub fn forward_cached(&self, xs: &[Array2<T>]) -> LstmCache<T> {
        assert!(!xs.is_empty(), "empty input sequence");
        let batch = xs[0].nrows();
        let hdim = self.hidden();
        let mut hs = vec![Array2::zeros((batch, hdim))];
        let mut cs = vec![Array2::zeros((batch, hdim))];
        let mut gates = Vec::with_capacity(xs.len());
        for x in xs {
            let mut z = x.dot(&self.w_x);
            general_mat_mul(T::one(), hs.last().unwrap(), &self.w_h, T::one(), &mut z);
            z += &self.bias;
            for (k, mut block) in z.axis_chunks_iter_mut(Axis(1), hdim).enumerate() {
                if k == 2 {
                    block.mapv_inplace(|v| v.tanh());
                } else {
                    block.mapv_inplace(sigmoid);
                }
            }
            let c_prev = cs.last().unwrap();
            let mut c = Array2::zeros((batch, hdim));
            let mut h = Array2::zeros((batch, hdim));
            {
                let (i, f, g, o) = split4(z.view(), hdim);
                Zip::from(&mut c).and(&i).and(&f).and(&g).and(c_prev).for_each(|c, &i, &f, &g, &cp| {
                    *c = f * cp + i * g;
                });
                Zip::from(&mut h).and(&o).and(&c).for_each(|h, &o, &c| *h = o * c.tanh());
            }
            gates.push(z);
            cs.push(c);
            hs.push(h);
        }
        LstmCache { xs: xs.to_vec(), hs, cs, gates }
    }

    /// Backpropagation through time from a gradient on the last hidden
    /// state. Accumulates into `grad`; returns the gradient on each input.
    pub fn backward(&self, cache: &LstmCache<T>, dh_last: ArrayView2<T>, grad: &mut LstmCell<T>) -> Vec<Array2<T>> {
        let hdim = self.hidden();
        let steps = cache.xs.len();
        let batch = dh_last.nrows();
        let mut dh = dh_last.to_owned();
        let mut dc: Array2<T> = Array2::zeros((batch, hdim));
        let mut dxs = vec![Array2::zeros((0, 0)); steps];
        for t in (0..steps).rev() {
            let (i, f, g, o) = split4(cache.gates[t].view(), hdim);
            let c = &cache.cs[t + 1];
            let c_prev = &cache.cs[t];
            let mut dz = Array2::zeros((batch, 4 * hdim));
            let mut dc_prev = Array2::zeros((batch, hdim));
            {
                let (mut di, mut df, mut dg, mut dov) = split4_mut(&mut dz, hdim);
                for r in 0..batch {
                    for k in 0..hdim {
                        let tc = c[[r, k]].tanh();
                        let dh_rk = dh[[r, k]];
                        let (ii, ff, gg, oo) = (i[[r, k]], f[[r, k]], g[[r, k]], o[[r, k]]);
                        let dcell = dc[[r, k]] + dh_rk * oo * (T::one() - tc * tc);
                        dov[[r, k]] = dh_rk * tc * oo * (T::one() - oo);
                        di[[r, k]] = dcell * gg * ii * (T::one() - ii);
                        df[[r, k]] = dcell * c_prev[[r, k]] * ff * (T::one() - ff);
                        dg[[r, k]] = dcell * ii * (T::one() - gg * gg);
                        dc_prev[[r, k]] = dcell * ff;
                    }
                }
            }
            general_mat_mul(T::one(), &cache.xs[t].t(), &dz, T::one(), &mut grad.w_x);
            general_mat_mul(T::one(), &cache.hs[t].t(), &dz, T::one(), &mut grad.w_h);
            grad.bias += &dz.sum_axis(Axis(0));
            dxs[t] = dz.dot(&self.w_x.t());
            dh = dz.dot(&self.w_h.t());
            dc = dc_prev;
        }
        dxs
    }
}

type Views4<'a, T> = (ArrayView2<'a, T>, ArrayView2<'a, T>, ArrayView2<'a, T>, ArrayView2<'a, T>);

fn split4<T>(z: ArrayView2<'_, T>, h: usize) -> Views4<'_, T> {
    (
        z.slice_move(s![.., 0..h]),
        z.slice_move(s![.., h..2 * h]),
        z.slice_move(s![.., 2 * h..3 * h]),
        z.slice_move(s![.., 3 * h..4 * h]),
    )
}

type ViewsMut4<'a, T> = (
    ndarray::ArrayViewMut2<'a, T>,
    ndarray::ArrayViewMut2<'a, T>,
    ndarray::ArrayViewMut2<'a, T>,
    ndarray::ArrayViewMut2<'a, T>,
);

fn split4_mut<T>(z: &mut Array2<T>, h: usize) -> ViewsMut4<'_, T> {
    let (a, rest) = z.view_mut().split_at(Axis(1), h);
    let (b, rest) = rest.split_at(Axis(1), h);
    let (c, d) = rest.split_at(Axis(1), h);
    (a, b, c, d)
}

impl<T: Scalar> Params<T> for LstmCell<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![
            self.w_x.as_slice().expect("standard layout"),
            self.w_h.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_x.as_slice_mut().expect("standard layout"),
            self.w_h.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}
