//! Rollout storage, generalized advantage estimation, and the clipped PPO
//! update.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Params};
use crate::policy::PolicyNet;
use crate::scalar::Scalar;

/// Optimization constants shared by both agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub minibatch: usize,
    /// Passes over the buffer per update.
    pub sgd_epochs: usize,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            minibatch: 128,
            sgd_epochs: 10,
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip range must lie in (0, 1)");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.minibatch == 0 {
            return bad("minibatch must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Transitions of one agent. Episodes are stored contiguously; `dones[i]`
/// marks the last transition of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer<T> {
    pub obs_dim: usize,
    pub heads: usize,
    pub obs: Vec<T>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new(obs_dim: usize, heads: usize) -> Self {
        Self {
            obs_dim,
            heads,
            obs: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Appends a transition whose reward is filled in later by [`Self::set_last_reward`].
    pub fn push(&mut self, obs: &[T], actions: &[usize], log_prob: f64, value: f64) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(actions.len(), self.heads);
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(actions);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(0.0);
        self.dones.push(false);
    }

    pub fn set_last_reward(&mut self, reward: f64) {
        *self.rewards.last_mut().expect("non-empty buffer") = reward;
    }

    pub fn mark_last_done(&mut self) {
        if let Some(d) = self.dones.last_mut() {
            *d = true;
        }
    }

    /// Fills advantages and returns; the data must end on a finished episode.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if let Some(false) = self.dones.last() {
            return Err(Error::contract("rollout buffer ends mid-episode; no bootstrap value"));
        }
        let (a, r) = gae_advantages(&self.rewards, &self.values, &self.dones, 0.0, gamma, lambda)?;
        self.advantages = a;
        self.returns = r;
        Ok(())
    }

    pub fn extend(&mut self, other: &RolloutBuffer<T>) {
        assert_eq!((self.obs_dim, self.heads), (other.obs_dim, other.heads));
        self.obs.extend_from_slice(&other.obs);
        self.actions.extend_from_slice(&other.actions);
        self.log_probs.extend_from_slice(&other.log_probs);
        self.rewards.extend_from_slice(&other.rewards);
        self.values.extend_from_slice(&other.values);
        self.dones.extend_from_slice(&other.dones);
        self.advantages.extend_from_slice(&other.advantages);
        self.returns.extend_from_slice(&other.returns);
    }
}

/// GAE(γ, λ): `δ_t = r_t + γ V_{t+1} (1 - done_t) - V_t`,
/// `A_t = δ_t + γ λ (1 - done_t) A_{t+1}`. `last_value` bootstraps the
/// step after the final transition when it is not terminal.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::contract("rewards, values and dones must have equal lengths"));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// One minibatch in network precision.
pub struct Minibatch<T> {
    pub obs: Array2<T>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<T: Scalar> Minibatch<T> {
    pub fn gather(buf: &RolloutBuffer<T>, idx: &[usize], advantages: &[f64]) -> Self {
        let d = buf.obs_dim;
        let mut obs = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            obs.row_mut(r).assign(&ndarray::ArrayView1::from(&buf.obs[i * d..(i + 1) * d]));
        }
        Self {
            obs,
            actions: idx.iter().flat_map(|&i| buf.actions[i * buf.heads..(i + 1) * buf.heads].iter().copied()).collect(),
            old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| advantages[i]).collect(),
            returns: idx.iter().map(|&i| buf.returns[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    /// `-mean(min(ρ A, clip(ρ) A))`.
    pub policy_loss: f64,
    /// `mean((V - R)^2)`.
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// `policy_loss + value_coef value_loss - entropy_coef entropy`.
    pub total: f64,
}

/// PPO objective on one minibatch and its gradient with respect to every
/// parameter of `net`.
pub fn ppo_loss_and_grad<T: Scalar>(net: &PolicyNet<T>, mb: &Minibatch<T>, cfg: &PpoConfig) -> Result<(LossStats, PolicyNet<T>)> {
    let cache = net.forward_cached(mb.obs.view())?;
    let out = &cache.output;
    let b = mb.obs.nrows();
    let heads = net.heads.len();
    let bf = b as f64;
    let mut dlogits: Vec<Array2<T>> = out.log_probs.iter().map(|lp| Array2::zeros(lp.raw_dim())).collect();
    let mut dvalue = Array1::zeros(b);
    let mut s = LossStats::default();
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    for r in 0..b {
        let acts = &mb.actions[r * heads..(r + 1) * heads];
        let logp = out.log_prob(r, acts);
        let log_ratio = logp - mb.old_log_probs[r];
        let ratio = log_ratio.exp();
        let a = mb.advantages[r];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        s.policy_loss -= unclipped.min(clipped);
        if !(lo..=hi).contains(&ratio) {
            s.clip_fraction += 1.0;
        }
        s.approx_kl += (ratio - 1.0) - log_ratio;
        // d(-min)/dlogp is -ρA while the unclipped branch is active, else 0.
        let dlogp = if unclipped <= clipped { -unclipped } else { 0.0 };
        let mut ent = 0.0;
        for h in 0..heads {
            let lp = out.log_probs[h].row(r);
            let h_ent: f64 = -lp.iter().map(|v| v.to_f64_lossy().exp() * v.to_f64_lossy()).sum::<f64>();
            ent += h_ent;
            let mut dz = dlogits[h].row_mut(r);
            for (j, v) in lp.iter().enumerate() {
                let l = v.to_f64_lossy();
                let p = l.exp();
                let onehot = if j == acts[h] { 1.0 } else { 0.0 };
                // dlogp/dz_j = 1[j=a] - p_j ; dH/dz_j = -p_j (log p_j + H)
                let g = dlogp * (onehot - p) + cfg.entropy_coef * p * (l + h_ent);
                dz[j] = T::lit(g / bf);
            }
        }
        s.entropy += ent;
        let v = out.values[r].to_f64_lossy();
        let err = v - mb.returns[r];
        s.value_loss += err * err;
        dvalue[r] = T::lit(2.0 * cfg.value_coef * err / bf);
    }
    s.policy_loss /= bf;
    s.value_loss /= bf;
    s.entropy /= bf;
    s.clip_fraction /= bf;
    s.approx_kl /= bf;
    s.total = s.policy_loss + cfg.value_coef * s.value_loss - cfg.entropy_coef * s.entropy;
    if !s.total.is_finite() {
        return Err(Error::Numerical(format!(
            "PPO loss is not finite (policy {}, value {}, entropy {})",
            s.policy_loss, s.value_loss, s.entropy
        )));
    }
    let mut grad = net.zeros_like();
    net.backward(&cache, &dlogits, &dvalue, &mut grad);
    if !grad.all_finite() {
        return Err(Error::Numerical("PPO gradient is not finite".into()));
    }
    Ok((s, grad))
}

/// Advantages rescaled to mean 0 and standard deviation 1.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Minibatch-averaged statistics of one update.
pub type UpdateStats = LossStats;

/// `sgd_epochs` shuffled passes of minibatch Adam steps on the PPO loss.
pub fn ppo_update<T: Scalar, R: Rng + ?Sized>(
    net: &mut PolicyNet<T>,
    opt: &mut Adam<T>,
    buf: &RolloutBuffer<T>,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if buf.is_empty() {
        return Ok(UpdateStats::default());
    }
    if buf.advantages.len() != buf.len() || buf.returns.len() != buf.len() {
        return Err(Error::contract("advantages must be computed before the update"));
    }
    let adv = normalize_advantages(&buf.advantages);
    let mut idx: Vec<usize> = (0..buf.len()).collect();
    let mut acc = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.sgd_epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let mb = Minibatch::gather(buf, chunk, &adv);
            let (s, grad) = ppo_loss_and_grad(net, &mb, cfg)?;
            opt.step(net, &grad);
            acc.policy_loss += s.policy_loss;
            acc.value_loss += s.value_loss;
            acc.entropy += s.entropy;
            acc.clip_fraction += s.clip_fraction;
            acc.approx_kl += s.approx_kl;
            acc.total += s.total;
            count += 1.0;
        }
    }
    if count > 0.0 {
        acc.policy_loss /= count;
        acc.value_loss /= count;
        acc.entropy /= count;
        acc.clip_fraction /= count;
        acc.approx_kl /= count;
        acc.total /= count;
    }
    Ok(acc)
}
