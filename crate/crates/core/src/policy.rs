//! Actor-critic networks for both agents.
//!
//! The actor is a `tanh` trunk followed by one categorical head per action
//! component. The critic is a separate `tanh` network of the same hidden
//! shape ending in a scalar, so value regression never moves the actor's
//! features (this matters for the warm-started defender).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{class_to_label, AdversaryAction, DroopSetting, Label};
use crate::error::{Error, Result};
use crate::nn::{argmax, log_softmax_rows, Dense, Mlp, MlpCache, Params};
use crate::offline::OfflineClassifier;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Heads `(g^A, c, m)` of sizes `N + 1, 3, 2`, observing `[θ; ω; t/T]`.
    Adversary,
    /// One head of size `N + 1`, observing the residual.
    Defender,
}

impl Role {
    pub fn obs_dim(self, n_buses: usize) -> usize {
        match self {
            Role::Adversary => 2 * n_buses + 1,
            Role::Defender => 2 * n_buses,
        }
    }

    pub fn head_sizes(self, n_buses: usize) -> Vec<usize> {
        match self {
            Role::Adversary => vec![n_buses + 1, 3, 2],
            Role::Defender => vec![n_buses + 1],
        }
    }
}

/// Initialization gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitGains {
    pub hidden: f64,
    pub policy_head: f64,
    pub value_head: f64,
}

impl Default for InitGains {
    fn default() -> Self {
        Self { hidden: 2f64.sqrt(), policy_head: 0.01, value_head: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PolicyNet<T> {
    pub role: Role,
    pub n_buses: usize,
    pub trunk: Mlp<T>,
    pub heads: Vec<Dense<T>>,
    pub value: Mlp<T>,
}

/// Per-head log-probabilities and value estimates for a batch.
#[derive(Debug, Clone)]
pub struct PolicyOutput<T> {
    pub log_probs: Vec<Array2<T>>,
    pub values: Array1<T>,
}

impl<T: Scalar> PolicyOutput<T> {
    pub fn probs(&self, head: usize) -> Array2<T> {
        self.log_probs[head].mapv(|v| v.exp())
    }

    /// Greedy action indices of row `r`, ties to the smallest index.
    pub fn greedy(&self, r: usize) -> Vec<usize> {
        self.log_probs.iter().map(|lp| argmax(lp.row(r).as_slice().expect("contiguous row"))).collect()
    }

    /// Samples one index per head for row `r`; returns the indices and the
    /// joint log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, r: usize, rng: &mut R) -> (Vec<usize>, f64) {
        let mut idx = Vec::with_capacity(self.log_probs.len());
        let mut logp = 0.0;
        for lp in &self.log_probs {
            let row = lp.row(r);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (j, v) in row.iter().enumerate() {
                acc += v.to_f64_lossy().exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            logp += row[pick].to_f64_lossy();
            idx.push(pick);
        }
        (idx, logp)
    }

    pub fn log_prob(&self, r: usize, actions: &[usize]) -> f64 {
        self.log_probs.iter().zip(actions).map(|(lp, &a)| lp[[r, a]].to_f64_lossy()).sum()
    }

    /// Sum of the heads' entropies for row `r`.
    pub fn entropy(&self, r: usize) -> f64 {
        self.log_probs
            .iter()
            .map(|lp| -lp.row(r).iter().map(|v| v.to_f64_lossy().exp() * v.to_f64_lossy()).sum::<f64>())
            .sum()
    }
}

/// Activations needed for backpropagation.
pub struct PolicyCache<T> {
    pub trunk: MlpCache<T>,
    pub value: MlpCache<T>,
    pub output: PolicyOutput<T>,
}

impl<T: Scalar> PolicyNet<T> {
    pub fn new<R: Rng + ?Sized>(role: Role, n_buses: usize, hidden: &[usize], gains: InitGains, rng: &mut R) -> Self {
        assert!(!hidden.is_empty(), "policy needs at least one hidden layer");
        let obs = role.obs_dim(n_buses);
        let mut sizes = vec![obs];
        sizes.extend_from_slice(hidden);
        let trunk = Mlp::new(&sizes, true, gains.hidden, gains.hidden, rng);
        let width = *hidden.last().expect("non-empty");
        let heads = role
            .head_sizes(n_buses)
            .into_iter()
            .map(|k| Dense::orthogonal(width, k, gains.policy_head, rng))
            .collect();
        let mut vsizes = sizes.clone();
        vsizes.push(1);
        let value = Mlp::new(&vsizes, false, gains.hidden, gains.value_head, rng);
        Self { role, n_buses, trunk, heads, value }
    }

    pub fn zeros(role: Role, n_buses: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![role.obs_dim(n_buses)];
        sizes.extend_from_slice(hidden);
        let width = *hidden.last().expect("non-empty");
        let heads = role.head_sizes(n_buses).into_iter().map(|k| Dense::zeros(width, k)).collect();
        let mut vsizes = sizes.clone();
        vsizes.push(1);
        Self { role, n_buses, trunk: Mlp::zeros(&sizes, true), heads, value: Mlp::zeros(&vsizes, false) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            role: self.role,
            n_buses: self.n_buses,
            trunk: self.trunk.zeros_like(),
            heads: self.heads.iter().map(|h| Dense::zeros(h.inputs(), h.outputs())).collect(),
            value: self.value.zeros_like(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.inputs()
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let want_heads = self.role.head_sizes(self.n_buses);
        let got_heads: Vec<usize> = self.heads.iter().map(|h| h.outputs()).collect();
        let width = self.trunk.outputs();
        let ok = self.obs_dim() == self.role.obs_dim(self.n_buses)
            && self.trunk.activate_last
            && got_heads == want_heads
            && self.heads.iter().all(|h| h.inputs() == width)
            && self.value.inputs() == self.obs_dim()
            && self.value.outputs() == 1
            && !self.value.activate_last;
        if !ok {
            return Err(Error::Model(format!(
                "{:?} policy for {} buses has inconsistent shapes (heads {got_heads:?}, want {want_heads:?})",
                self.role, self.n_buses
            )));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &ArrayView2<T>) -> Result<()> {
        if obs.ncols() != self.obs_dim() {
            return Err(Error::contract(format!(
                "observation has {} entries, {:?} policy expects {}",
                obs.ncols(),
                self.role,
                self.obs_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, obs: ArrayView2<T>) -> Result<PolicyOutput<T>> {
        self.check_obs(&obs)?;
        let h = self.trunk.forward(obs);
        let log_probs = self.heads.iter().map(|head| log_softmax_rows(head.forward(h.view()).view())).collect();
        let values = self.value.forward(obs).index_axis_move(Axis(1), 0);
        Ok(PolicyOutput { log_probs, values })
    }

    pub fn forward_cached(&self, obs: ArrayView2<T>) -> Result<PolicyCache<T>> {
        self.check_obs(&obs)?;
        let trunk = self.trunk.forward_cached(obs);
        let log_probs = self
            .heads
            .iter()
            .map(|head| log_softmax_rows(head.forward(trunk.output().view()).view()))
            .collect();
        let value = self.value.forward_cached(obs);
        let values = value.output().column(0).to_owned();
        Ok(PolicyCache { trunk, value, output: PolicyOutput { log_probs, values } })
    }

    /// Accumulates parameter gradients given `dL/dlogits` per head and
    /// `dL/dV` per row.
    pub fn backward(&self, cache: &PolicyCache<T>, dlogits: &[Array2<T>], dvalue: &Array1<T>, grad: &mut PolicyNet<T>) {
        let feat = cache.trunk.output();
        let mut dfeat = Array2::zeros(feat.raw_dim());
        for ((head, g), dz) in self.heads.iter().zip(grad.heads.iter_mut()).zip(dlogits) {
            dfeat += &head.backward(feat.view(), dz.view(), g);
        }
        self.trunk.backward(&cache.trunk, dfeat.view(), &mut grad.trunk, false);
        let dv = dvalue.view().insert_axis(Axis(1));
        self.value.backward(&cache.value, dv, &mut grad.value, false);
    }

    /// Single-observation convenience.
    pub fn forward_one(&self, obs: &[T]) -> Result<PolicyOutput<T>> {
        let x = ndarray::ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::contract(e.to_string()))?;
        self.forward(x)
    }

    /// Defender policy whose actor is exactly the offline classifier: the
    /// classifier's hidden layers become the trunk, its output layer the
    /// head. The critic is freshly initialized from `rng`.
    pub fn warm_start_defender<R: Rng + ?Sized>(clf: &OfflineClassifier<T>, gains: InitGains, rng: &mut R) -> Result<Self> {
        clf.validate_shapes()?;
        let layers = &clf.mlp.layers;
        if layers.len() < 2 {
            return Err(Error::Model("classifier needs at least one hidden layer to seed a policy trunk".into()));
        }
        let hidden: Vec<usize> = layers[..layers.len() - 1].iter().map(|l| l.outputs()).collect();
        let mut net = Self::new(Role::Defender, clf.n_buses, &hidden, gains, rng);
        net.trunk = Mlp { layers: layers[..layers.len() - 1].to_vec(), activate_last: true };
        net.heads = vec![layers[layers.len() - 1].clone()];
        net.validate_shapes()?;
        Ok(net)
    }
}

/// Adversary action from head indices `(g^A class, c index, mute)`.
pub fn decode_adversary(idx: &[usize]) -> AdversaryAction {
    AdversaryAction {
        bus: class_to_label(idx[0]),
        setting: DroopSetting::from_index(idx[1]).expect("three droop settings"),
        mute: idx[2] == 1,
    }
}

pub fn decode_defender(idx: &[usize]) -> Label {
    class_to_label(idx[0])
}

impl<T: Scalar> Params<T> for PolicyNet<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut v = self.trunk.slices();
        for h in &self.heads {
            v.extend(h.slices());
        }
        v.extend(self.value.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.trunk.slices_mut();
        for h in &mut self.heads {
            v.extend(h.slices_mut());
        }
        v.extend(self.value.slices_mut());
        v
    }
}
