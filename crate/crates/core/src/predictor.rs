//! LSTM one-step state predictor and the scaled residual fed to defenders.
//!
//! The predictor maps the last `d - 1` observed states to the next one. It
//! regresses the normalized one-step increment `s_t - s_{t-1}` and adds it
//! back onto the most recent observed state, so the prediction is always in
//! state units.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sample_initial_state_with, simulate_reference, GridParams, SystemState, Trajectory};
use crate::nn::{Adam, Dense, LstmCell, Params};
use crate::rng::stream;
use crate::scalar::Scalar;

/// Per-dimension affine normalization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Normalizer<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> Normalizer<T> {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], scale: vec![T::one(); dim] }
    }

    /// Mean and standard deviation of `rows`; degenerate dimensions get scale 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [T]>, dim: usize) -> Self {
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut count = 0usize;
        for r in rows {
            for k in 0..dim {
                let v = r[k].to_f64_lossy();
                sum[k] += v;
                sq[k] += v * v;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                let sd = var.sqrt();
                T::lit(if sd > 1e-12 { sd } else { 1.0 })
            })
            .collect();
        Self { mean: mean.into_iter().map(T::lit).collect(), scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Scaled prediction error `c_w (s_t - ŝ_t)`, stacked as `[θ; ω]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Residual<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> Residual<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `c_w (s - ŝ)` component-wise.
pub fn residual<T: Scalar>(state: &SystemState<T>, predicted: &[T], c_w: T) -> Result<Residual<T>> {
    let s = state.stacked();
    residual_stacked(&s, predicted, c_w)
}

pub fn residual_stacked<T: Scalar>(state: &[T], predicted: &[T], c_w: T) -> Result<Residual<T>> {
    if state.len() != predicted.len() {
        return Err(Error::contract(format!(
            "residual of a {}-dim state against a {}-dim prediction",
            state.len(),
            predicted.len()
        )));
    }
    Ok(Residual { values: state.iter().zip(predicted).map(|(&s, &p)| c_w * (s - p)).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LstmPredictor<T> {
    pub n_buses: usize,
    /// History length `d - 1`.
    pub window: usize,
    pub lstm: LstmCell<T>,
    pub head: Dense<T>,
    pub input_norm: Normalizer<T>,
    /// Statistics of the increment `s_t - s_{t-1}`.
    pub target_norm: Normalizer<T>,
    /// Root-mean-square prediction error on held-out benign windows, state units.
    pub heldout_rmse: f64,
}

impl<T: Scalar> LstmPredictor<T> {
    /// All-zero weights with identity normalization.
    pub fn zeros(n_buses: usize, window: usize, hidden: usize) -> Self {
        let dim = 2 * n_buses;
        Self {
            n_buses,
            window,
            lstm: LstmCell::zeros(dim, hidden),
            head: Dense::zeros(hidden, dim),
            input_norm: Normalizer::identity(dim),
            target_norm: Normalizer::identity(dim),
            heldout_rmse: f64::NAN,
        }
    }

    pub fn new<R: Rng + ?Sized>(n_buses: usize, window: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_buses, window, hidden);
        p.lstm = LstmCell::new(2 * n_buses, hidden, rng);
        p.head = Dense::orthogonal(hidden, 2 * n_buses, 1.0, rng);
        p
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_buses
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    /// Checks that the stored shapes agree with each other and with `grid`.
    pub fn validate_for(&self, grid: &GridParams<T>) -> Result<()> {
        let dim = self.state_dim();
        if self.n_buses != grid.n_buses() {
            return Err(Error::Model(format!(
                "predictor built for {} buses, grid has {}",
                self.n_buses,
                grid.n_buses()
            )));
        }
        self.validate_shapes()?;
        if dim != grid.state_dim() {
            return Err(Error::Model("state dimension mismatch".into()));
        }
        Ok(())
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let dim = self.state_dim();
        let h = self.lstm.hidden();
        let ok = self.lstm.w_x.dim() == (dim, 4 * h)
            && self.lstm.w_h.dim() == (h, 4 * h)
            && self.lstm.bias.len() == 4 * h
            && self.head.weight.dim() == (h, dim)
            && self.head.bias.len() == dim
            && self.input_norm.dim() == dim
            && self.target_norm.dim() == dim
            && self.window >= 1;
        if !ok {
            return Err(Error::Model("predictor weight shapes are inconsistent".into()));
        }
        if self.input_norm.scale.iter().chain(&self.target_norm.scale).any(|s| *s <= T::zero()) {
            return Err(Error::Model("normalization scales must be positive".into()));
        }
        Ok(())
    }

    fn normalize_into(&self, s: &[T], out: &mut [T]) {
        for k in 0..s.len() {
            out[k] = (s[k] - self.input_norm.mean[k]) / self.input_norm.scale[k];
        }
    }

    /// Normalized network inputs for a batch of histories.
    fn encode(&self, histories: &[&[Vec<T>]]) -> Vec<Array2<T>> {
        let dim = self.state_dim();
        (0..self.window)
            .map(|k| {
                let mut x = Array2::zeros((histories.len(), dim));
                for (r, h) in histories.iter().enumerate() {
                    let mut row = x.row_mut(r);
                    self.normalize_into(&h[k], row.as_slice_mut().expect("contiguous row"));
                }
                x
            })
            .collect()
    }

    fn decode(&self, last: &[T], out: &[T]) -> Vec<T> {
        (0..last.len())
            .map(|k| last[k] + self.target_norm.mean[k] + self.target_norm.scale[k] * out[k])
            .collect()
    }

    /// Predicted next stacked state for each history (each `window` stacked states, oldest first).
    pub fn predict_batch(&self, histories: &[&[Vec<T>]]) -> Result<Vec<Vec<T>>> {
        for h in histories {
            if h.len() != self.window {
                return Err(Error::contract(format!("history has {} states, predictor needs {}", h.len(), self.window)));
            }
            if h.iter().any(|s| s.len() != self.state_dim()) {
                return Err(Error::contract("history state dimension mismatch"));
            }
        }
        if histories.is_empty() {
            return Ok(Vec::new());
        }
        let xs = self.encode(histories);
        let h = self.lstm.forward(&xs);
        let out = self.head.forward(h.view());
        Ok(histories
            .iter()
            .zip(out.axis_iter(Axis(0)))
            .map(|(hist, row)| self.decode(hist.last().expect("non-empty"), row.as_slice().expect("contiguous")))
            .collect())
    }

    pub fn predict_stacked(&self, history: &[Vec<T>]) -> Result<Vec<T>> {
        Ok(self.predict_batch(&[history])?.pop().expect("one prediction"))
    }

    /// `ŝ_t` from `[s_{t-(d-1)}, ..., s_{t-1}]`.
    pub fn predict_next(&self, history: &[SystemState<T>]) -> Result<Vec<T>> {
        let stacked: Vec<Vec<T>> = history.iter().map(|s| s.stacked()).collect();
        self.predict_stacked(&stacked)
    }
}

/// Training settings for the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorHyper {
    pub hidden: usize,
    /// Benign episodes simulated for the corpus.
    pub episodes: usize,
    pub holdout_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Spacing between the end steps of consecutive training windows.
    pub window_stride: usize,
    pub disturbance: f64,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        Self {
            hidden: 100,
            episodes: 500,
            holdout_fraction: 0.2,
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            window_stride: 5,
            disturbance: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    /// Mean normalized MSE over the minibatches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_rmse: f64,
    pub train_windows: usize,
    pub heldout_windows: usize,
}

/// Unattacked episodes from random initial states; episode `i` uses its own
/// seed stream so the corpus does not depend on thread scheduling.
pub fn benign_corpus<T: Scalar>(grid: &GridParams<T>, episodes: usize, disturbance: f64, seed: u64) -> Result<Vec<Trajectory<T>>> {
    (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "benign-corpus", i as u64);
            let s0 = sample_initial_state_with(grid, disturbance, &mut rng);
            simulate_reference(grid, &s0)
        })
        .collect()
}

/// Window end indices `(trajectory, t)`; the target is state `t`, the
/// history is `t - window .. t`.
fn windows<T: Scalar>(trajs: &[&Trajectory<T>], window: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (k, tr) in trajs.iter().enumerate() {
        let mut t = window;
        while t < tr.len() {
            out.push((k, t));
            t += stride.max(1);
        }
    }
    out
}

struct Batch<T> {
    histories: Vec<Vec<Vec<T>>>,
    targets: Vec<Vec<T>>,
}

fn gather<T: Scalar>(stacked: &[Vec<Vec<T>>], idx: &[(usize, usize)], window: usize) -> Batch<T> {
    let mut histories = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    for &(k, t) in idx {
        histories.push(stacked[k][t - window..t].to_vec());
        targets.push(stacked[k][t].clone());
    }
    Batch { histories, targets }
}

/// Fits the predictor to benign trajectories by minimizing the one-step
/// squared error with Adam.
pub fn train_predictor<T: Scalar, R: Rng + ?Sized>(
    benign: &[Trajectory<T>],
    window: usize,
    hyper: &PredictorHyper,
    rng: &mut R,
) -> Result<(LstmPredictor<T>, PredictorReport)> {
    let usable: Vec<&Trajectory<T>> = benign.iter().filter(|t| t.len() > window).collect();
    if usable.is_empty() {
        return Err(Error::Dataset(format!("need at least one trajectory longer than {window} states")));
    }
    let n_buses = usable[0].states[0].theta.len();
    let dim = 2 * n_buses;

    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(rng);
    let stacked: Vec<Vec<Vec<T>>> =
        order.iter().map(|&i| usable[i].states.iter().map(|s| s.stacked()).collect()).collect();
    let refs: Vec<&Trajectory<T>> = order.iter().map(|&i| usable[i]).collect();

    let (train_idx, held_idx) = if refs.len() >= 2 {
        let held = ((refs.len() as f64 * hyper.holdout_fraction).round() as usize).clamp(1, refs.len() - 1);
        let split = refs.len() - held;
        let all = windows(&refs, window, hyper.window_stride);
        let (a, b): (Vec<_>, Vec<_>) = all.into_iter().partition(|(k, _)| *k < split);
        (a, b)
    } else {
        let mut all = windows(&refs, window, 1);
        all.shuffle(rng);
        let held = ((all.len() as f64 * hyper.holdout_fraction).round() as usize).clamp(1, all.len().max(2) - 1);
        let b = all.split_off(all.len() - held.min(all.len()));
        (all, b)
    };
    if train_idx.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }

    let input_norm = Normalizer::fit(
        train_idx.iter().flat_map(|&(k, t)| (t - window..t).map(move |j| (k, j))).map(|(k, j)| stacked[k][j].as_slice()),
        dim,
    );
    let increments: Vec<Vec<T>> = train_idx
        .iter()
        .map(|&(k, t)| stacked[k][t].iter().zip(&stacked[k][t - 1]).map(|(a, b)| *a - *b).collect())
        .collect();
    let target_norm = Normalizer::fit(increments.iter().map(|v| v.as_slice()), dim);

    let mut model = LstmPredictor::new(n_buses, window, hyper.hidden, rng);
    model.input_norm = input_norm;
    model.target_norm = target_norm;

    let mut opt_lstm = Adam::new(hyper.learning_rate);
    let mut opt_head = Adam::new(hyper.learning_rate);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut shuffled = train_idx.clone();
    let batch_size = hyper.batch_size.max(1);
    for _ in 0..hyper.epochs {
        shuffled.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in shuffled.chunks(batch_size) {
            let batch = gather(&stacked, chunk, window);
            let loss = sgd_step(&mut model, &batch, &mut opt_lstm, &mut opt_head)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }

    let heldout_rmse = rmse(&model, &stacked, &held_idx)?;
    model.heldout_rmse = heldout_rmse;
    let report = PredictorReport {
        epoch_losses,
        heldout_rmse,
        train_windows: train_idx.len(),
        heldout_windows: held_idx.len(),
    };
    Ok((model, report))
}

fn sgd_step<T: Scalar>(
    model: &mut LstmPredictor<T>,
    batch: &Batch<T>,
    opt_lstm: &mut Adam<T>,
    opt_head: &mut Adam<T>,
) -> Result<f64> {
    let dim = model.state_dim();
    let rows = batch.histories.len();
    let hist_refs: Vec<&[Vec<T>]> = batch.histories.iter().map(|h| h.as_slice()).collect();
    let xs = model.encode(&hist_refs);
    let cache = model.lstm.forward_cached(&xs);
    let h = cache.last_hidden().clone();
    let out = model.head.forward(h.view());

    let denom = T::lit((rows * dim) as f64);
    let mut dout = Array2::zeros((rows, dim));
    let mut loss = 0.0;
    for r in 0..rows {
        let last = batch.histories[r].last().expect("non-empty");
        for k in 0..dim {
            let target = (batch.targets[r][k] - last[k] - model.target_norm.mean[k]) / model.target_norm.scale[k];
            let e = out[[r, k]] - target;
            loss += e.to_f64_lossy().powi(2);
            dout[[r, k]] = T::lit(2.0) * e / denom;
        }
    }
    loss /= (rows * dim) as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("predictor loss is not finite".into()));
    }
    let mut g_head = Dense::zeros(model.hidden(), dim);
    let dh = model.head.backward(h.view(), dout.view(), &mut g_head);
    let mut g_lstm = model.lstm.zeros_like();
    model.lstm.backward(&cache, dh.view(), &mut g_lstm);
    opt_head.step(&mut model.head, &g_head);
    opt_lstm.step(&mut model.lstm, &g_lstm);
    Ok(loss)
}

fn rmse<T: Scalar>(model: &LstmPredictor<T>, stacked: &[Vec<Vec<T>>], idx: &[(usize, usize)]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(512) {
        let batch = gather(stacked, chunk, model.window);
        let refs: Vec<&[Vec<T>]> = batch.histories.iter().map(|h| h.as_slice()).collect();
        for (pred, target) in model.predict_batch(&refs)?.iter().zip(&batch.targets) {
            for (p, t) in pred.iter().zip(target) {
                sq += (*p - *t).to_f64_lossy().powi(2);
                count += 1;
            }
        }
    }
    Ok((sq / count as f64).sqrt())
}

impl<T: Scalar> Params<T> for LstmPredictor<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut v = self.lstm.slices();
        v.extend(self.head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.lstm.slices_mut();
        v.extend(self.head.slices_mut());
        v
    }
}
