//! PPO loss gradient, GAE and clipping checked against independent oracles.

use fdia::nn::Params;
use fdia::policy::{InitGains, PolicyNet, Role};
use fdia::ppo::{gae_advantages, ppo_loss_and_grad, Minibatch, PpoConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAINS: InitGains = InitGains { hidden: 1.0, policy_head: 1.0, value_head: 1.0 };

fn tiny_net(role: Role, seed: u64) -> PolicyNet<f64> {
    PolicyNet::new(role, 2, &[8, 8], GAINS, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random minibatch whose old log-probabilities put the ratio at a random
/// point of `[0.6, 1.4]`, never within `margin` of a clip boundary.
fn minibatch(net: &PolicyNet<f64>, b: usize, margin: f64, rng: &mut ChaCha8Rng) -> Minibatch<f64> {
    let dim = net.obs_dim();
    let obs = Array2::from_shape_fn((b, dim), |_| rng.random_range(-1.0..1.0));
    let out = net.forward(obs.view()).unwrap();
    let sizes = net.role.head_sizes(net.n_buses);
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for r in 0..b {
        let a: Vec<usize> = sizes.iter().map(|&k| rng.random_range(0..k)).collect();
        let mut ratio: f64;
        loop {
            ratio = rng.random_range(0.6..1.4);
            if (ratio - 0.8).abs() > margin && (ratio - 1.2).abs() > margin {
                break;
            }
        }
        old.push(out.log_prob(r, &a) - ratio.ln());
        actions.extend(a);
    }
    Minibatch {
        obs,
        actions,
        old_log_probs: old,
        advantages: (0..b).map(|_| rng.random_range(-2.0..2.0)).collect(),
        returns: (0..b).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn cfg() -> PpoConfig {
    PpoConfig { entropy_coef: 0.05, ..PpoConfig::default() }
}

#[test]
fn ppo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, role) in [Role::Adversary, Role::Defender].into_iter().enumerate() {
        let net = tiny_net(role, 10 + k as u64);
        let mb = minibatch(&net, 12, 0.02, &mut rng);
        let (_, grad) = ppo_loss_and_grad(&net, &mb, &cfg()).unwrap();
        let analytic = grad.flat();
        let h = 1e-6;
        let mut probe = net.clone();
        let mut idx = 0;
        let mut worst = 0.0f64;
        for s in 0..probe.slices().len() {
            for i in 0..probe.slices()[s].len() {
                let orig = probe.slices()[s][i];
                probe.slices_mut()[s][i] = orig + h;
                let up = ppo_loss_and_grad(&probe, &mb, &cfg()).unwrap().0.total;
                probe.slices_mut()[s][i] = orig - h;
                let down = ppo_loss_and_grad(&probe, &mb, &cfg()).unwrap().0.total;
                probe.slices_mut()[s][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - analytic[idx]).abs() / (numeric.abs() + analytic[idx].abs()).max(1e-4);
                worst = worst.max(err);
                idx += 1;
            }
        }
        assert_eq!(idx, analytic.len());
        assert!(worst < 1e-4, "{role:?}: worst relative error {worst:e}");
    }
}

/// Direct sum `A_t = Σ_l (γλ)^l δ_{t+l}` cut at episode ends.
fn brute_force_gae(rewards: &[f64], values: &[f64], dones: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v_next = |t: usize| if t + 1 < n { values[t + 1] } else { last };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                let live = if dones[l] { 0.0 } else { 1.0 };
                acc += w * (rewards[l] + gamma * live * v_next(l) - values[l]);
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

proptest! {
    #[test]
    fn gae_matches_brute_force(
        steps in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, prop::bool::weighted(0.1)), 1..200),
        last in -5.0f64..5.0,
        gamma in 0.5f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = gae_advantages(&r, &v, &d, last, gamma, lambda).unwrap();
        let oracle = brute_force_gae(&r, &v, &d, last, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-10, "t={t}: {} vs {}", adv[t], oracle[t]);
            prop_assert!((ret[t] - (oracle[t] + v[t])).abs() < 1e-10);
        }
    }

    /// Samples whose ratio has left the trust region in the direction the
    /// advantage favours contribute no policy gradient.
    #[test]
    fn clipped_samples_have_zero_policy_gradient(seed in 0u64..1000, b in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = tiny_net(Role::Adversary, seed);
        let mut mb = minibatch(&net, b, 0.0, &mut rng);
        let out = net.forward(mb.obs.view()).unwrap();
        for r in 0..b {
            let acts = &mb.actions[r * 3..(r + 1) * 3];
            let a: f64 = rng.random_range(0.1..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let ratio = if a > 0.0 { rng.random_range(1.25..3.0) } else { rng.random_range(0.1..0.75) };
            mb.advantages[r] = a;
            mb.old_log_probs[r] = out.log_prob(r, acts) - f64::ln(ratio);
        }
        let cfg = PpoConfig { entropy_coef: 0.0, value_coef: 0.0, ..PpoConfig::default() };
        let (stats, grad) = ppo_loss_and_grad(&net, &mb, &cfg).unwrap();
        prop_assert_eq!(stats.clip_fraction, 1.0);
        prop_assert!(grad.flat().iter().all(|g| *g == 0.0));

        // the same samples inside the trust region do move the policy
        for r in 0..b {
            let acts = &mb.actions[r * 3..(r + 1) * 3];
            mb.old_log_probs[r] = out.log_prob(r, acts);
        }
        let (_, grad) = ppo_loss_and_grad(&net, &mb, &cfg).unwrap();
        prop_assert!(grad.flat().iter().any(|g| *g != 0.0));
    }
}
