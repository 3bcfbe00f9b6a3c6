//! Concurrent adversary/defender training.
//!
//! Each epoch collects `train_batch` adversary steps from
//! `train_batch / fragment_length` environments stepped in lockstep, then
//! runs one PPO update for each agent. Every environment owns a seed
//! stream derived from `(seed, epoch, env)`, and policy forward passes are
//! batched across environments, so results do not depend on the thread
//! count.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AdversaryAction;
use crate::env::{EpisodeContext, EpisodeTotals, MarlEnv, StepOutcome, Transition};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::offline::OfflineClassifier;
use crate::policy::{decode_adversary, decode_defender, InitGains, PolicyNet, Role};
use crate::ppo::{ppo_update, PpoConfig, RolloutBuffer, UpdateStats};
use crate::rng::{stream, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Train batch 1e4.
    Desk,
    /// Train batch 1e5.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adversary steps collected per epoch.
    pub train_batch: usize,
    /// Steps each environment contributes per epoch; a multiple of `T`.
    pub fragment_length: usize,
    /// Training epochs `K`.
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub init: InitGains,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        Self {
            train_batch: match p {
                Profile::Desk => 10_000,
                Profile::Paper => 100_000,
            },
            fragment_length: 500,
            epochs: 200,
            hidden: vec![256, 256],
            init: InitGains::default(),
            ppo: PpoConfig::default(),
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        self.ppo.validate()?;
        if self.hidden.is_empty() {
            return Err(Error::Config("policy needs at least one hidden layer".into()));
        }
        if self.fragment_length == 0 || self.fragment_length % steps != 0 {
            return Err(Error::Config(format!(
                "fragment length {} must be a positive multiple of the episode length {steps}",
                self.fragment_length
            )));
        }
        if self.train_batch < self.fragment_length || self.train_batch % self.fragment_length != 0 {
            return Err(Error::Config(format!(
                "train batch {} must be a positive multiple of the fragment length {}",
                self.train_batch, self.fragment_length
            )));
        }
        if self.ppo.minibatch > self.train_batch {
            return Err(Error::Config("minibatch exceeds the train batch".into()));
        }
        Ok(())
    }

    pub fn num_envs(&self) -> usize {
        self.train_batch / self.fragment_length
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub episodes: usize,
    pub adversary_mean_reward: f64,
    pub defender_mean_reward: f64,
    /// Percent of the epoch's detection decisions matching the window label.
    pub defender_accuracy: f64,
    pub mean_r_omega: f64,
    /// Share of raw adversary actions choosing `c = -1, 0, 1`.
    pub c_share: [f64; 3],
    pub adversary: UpdateStats,
    pub defender: UpdateStats,
}

pub struct MarlOutcome<T> {
    pub adversary: PolicyNet<T>,
    pub defender: PolicyNet<T>,
    pub history: Vec<EpochRecord>,
}

/// Transitions and episode summaries from one collection phase.
pub struct Rollout<T> {
    pub adversary: RolloutBuffer<T>,
    pub defender: RolloutBuffer<T>,
    pub episodes: Vec<EpisodeTotals>,
    pub c_counts: [usize; 3],
}

struct Worker<T> {
    ctx: EpisodeContext<T>,
    obs: Vec<T>,
    rng: Rng,
    action: AdversaryAction,
    adv: RolloutBuffer<T>,
    def: RolloutBuffer<T>,
    finished: Vec<EpisodeTotals>,
}

fn stack<T: Scalar>(rows: &[&[T]], dim: usize) -> Array2<T> {
    let mut x = Array2::zeros((rows.len(), dim));
    for (r, row) in rows.iter().enumerate() {
        x.row_mut(r).assign(&ndarray::ArrayView1::from(*row));
    }
    x
}

/// Runs `num_envs` environments for `episodes_per_env` episodes each with
/// stochastic actions from both policies.
pub fn collect_rollouts<T: Scalar>(
    env: &MarlEnv<'_, T>,
    adversary: &PolicyNet<T>,
    defender: &PolicyNet<T>,
    num_envs: usize,
    episodes_per_env: usize,
    seed: u64,
    round: u64,
) -> Result<Rollout<T>> {
    let adv_dim = env.adversary_obs_dim();
    let def_dim = env.defender_obs_dim();
    let mut workers: Vec<Worker<T>> = (0..num_envs)
        .map(|i| {
            let mut rng = stream(seed, "rollout", round * num_envs as u64 + i as u64);
            let (ctx, obs) = env.reset(&mut rng)?;
            Ok(Worker {
                ctx,
                obs,
                rng,
                action: AdversaryAction::idle(),
                adv: RolloutBuffer::new(adv_dim, adversary.heads.len()),
                def: RolloutBuffer::new(def_dim, defender.heads.len()),
                finished: Vec::with_capacity(episodes_per_env),
            })
        })
        .collect::<Result<_>>()?;
    let mut c_counts = [0usize; 3];

    loop {
        let active: Vec<usize> = (0..num_envs).filter(|&i| workers[i].finished.len() < episodes_per_env).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<&[T]> = active.iter().map(|&i| workers[i].obs.as_slice()).collect();
        let out = adversary.forward(stack(&rows, adv_dim).view())?;
        for (r, &i) in active.iter().enumerate() {
            let w = &mut workers[i];
            let (a, logp) = out.sample(r, &mut w.rng);
            w.adv.push(&w.obs, &a, logp, out.values[r].to_f64_lossy());
            w.action = decode_adversary(&a);
            c_counts[a[1]] += 1;
        }

        let transitions: Vec<Result<Transition<T>>> = workers
            .par_iter_mut()
            .enumerate()
            .filter(|(i, _)| active.contains(i))
            .map(|(_, w)| env.advance(&mut w.ctx, &w.action))
            .collect();
        let transitions: Vec<Transition<T>> = transitions.into_iter().collect::<Result<_>>()?;

        let detect: Vec<(usize, usize)> = transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, Transition::Detect(_)))
            .map(|(r, _)| (r, active[r]))
            .collect();
        let mut outcomes: Vec<Option<StepOutcome<T>>> = transitions
            .iter()
            .map(|t| match t {
                Transition::Done(o) => Some(o.clone()),
                Transition::Detect(_) => None,
            })
            .collect();
        if !detect.is_empty() {
            let res: Vec<&[T]> = detect
                .iter()
                .map(|&(r, _)| match &transitions[r] {
                    Transition::Detect(res) => res.values.as_slice(),
                    Transition::Done(_) => unreachable!(),
                })
                .collect();
            let dout = defender.forward(stack(&res, def_dim).view())?;
            for (k, &(r, i)) in detect.iter().enumerate() {
                let w = &mut workers[i];
                let (a, logp) = dout.sample(k, &mut w.rng);
                w.def.push(res[k], &a, logp, dout.values[k].to_f64_lossy());
                let o = env.resolve(&mut w.ctx, decode_defender(&a))?;
                w.def.set_last_reward(o.defender_reward.expect("detection outcome"));
                outcomes[r] = Some(o);
            }
        }

        for (r, &i) in active.iter().enumerate() {
            let o = outcomes[r].take().expect("every active env stepped");
            let w = &mut workers[i];
            w.adv.set_last_reward(o.adversary_reward);
            w.obs = o.adversary_obs;
            if o.done {
                w.adv.mark_last_done();
                w.def.mark_last_done();
                w.finished.push(w.ctx.totals.clone());
                if w.finished.len() < episodes_per_env {
                    let (ctx, obs) = env.reset(&mut w.rng)?;
                    w.ctx = ctx;
                    w.obs = obs;
                }
            }
        }
    }

    let mut adv = RolloutBuffer::new(adv_dim, adversary.heads.len());
    let mut def = RolloutBuffer::new(def_dim, defender.heads.len());
    let mut episodes = Vec::with_capacity(num_envs * episodes_per_env);
    for w in workers.iter_mut() {
        adv.extend(&w.adv);
        def.extend(&w.def);
        episodes.append(&mut w.finished);
    }
    Ok(Rollout { adversary: adv, defender: def, episodes, c_counts })
}

/// Fresh adversary and defender policies for `seed`; the defender copies
/// `warm_start` when given.
pub fn initial_policies<T: Scalar>(
    n_buses: usize,
    cfg: &TrainConfig,
    warm_start: Option<&OfflineClassifier<T>>,
    seed: u64,
) -> Result<(PolicyNet<T>, PolicyNet<T>)> {
    let adversary = PolicyNet::new(Role::Adversary, n_buses, &cfg.hidden, cfg.init, &mut stream(seed, "init-adversary", 0));
    let mut def_rng = stream(seed, "init-defender", 0);
    let defender = match warm_start {
        Some(clf) => {
            if clf.n_buses != n_buses {
                return Err(Error::Model(format!("classifier is for {} buses, grid has {n_buses}", clf.n_buses)));
            }
            PolicyNet::warm_start_defender(clf, cfg.init, &mut def_rng)?
        }
        None => PolicyNet::new(Role::Defender, n_buses, &cfg.hidden, cfg.init, &mut def_rng),
    };
    Ok((adversary, defender))
}

/// Algorithm-1 training loop: collect with both current policies, then
/// update both. `on_epoch` sees every history row as it is produced.
pub fn train_marl<T: Scalar>(
    env: &MarlEnv<'_, T>,
    cfg: &TrainConfig,
    warm_start: Option<&OfflineClassifier<T>>,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<MarlOutcome<T>> {
    cfg.validate(env.steps())?;
    let (mut adversary, mut defender) = initial_policies(env.n_buses(), cfg, warm_start, seed)?;
    let mut adv_opt = Adam::new(cfg.ppo.learning_rate);
    let mut def_opt = Adam::new(cfg.ppo.learning_rate);
    let num_envs = cfg.num_envs();
    let episodes_per_env = cfg.fragment_length / env.steps();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut roll = collect_rollouts(env, &adversary, &defender, num_envs, episodes_per_env, seed, epoch as u64)?;
        roll.adversary.compute_advantages(cfg.ppo.gamma, cfg.ppo.lambda)?;
        roll.defender.compute_advantages(cfg.ppo.gamma, cfg.ppo.lambda)?;
        let a_stats = ppo_update(&mut adversary, &mut adv_opt, &roll.adversary, &cfg.ppo, &mut stream(seed, "ppo-adversary", epoch as u64))?;
        let d_stats = ppo_update(&mut defender, &mut def_opt, &roll.defender, &cfg.ppo, &mut stream(seed, "ppo-defender", epoch as u64))?;

        let n = roll.episodes.len().max(1) as f64;
        let decisions: usize = roll.episodes.iter().map(|e| e.decisions).sum();
        let correct: usize = roll.episodes.iter().map(|e| e.correct).sum();
        let total_c: usize = roll.c_counts.iter().sum();
        let rec = EpochRecord {
            epoch,
            episodes: roll.episodes.len(),
            adversary_mean_reward: roll.episodes.iter().map(|e| e.adversary_reward).sum::<f64>() / n,
            defender_mean_reward: roll.episodes.iter().map(|e| e.defender_reward).sum::<f64>() / n,
            defender_accuracy: 100.0 * correct as f64 / decisions.max(1) as f64,
            mean_r_omega: roll.episodes.iter().map(|e| e.r_omega).sum::<f64>() / n,
            c_share: roll.c_counts.map(|c| c as f64 / total_c.max(1) as f64),
            adversary: a_stats,
            defender: d_stats,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(MarlOutcome { adversary, defender, history })
}

/// History CSV with one row per epoch.
pub fn write_history<W: std::io::Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "episodes",
        "adversary_mean_reward",
        "defender_mean_reward",
        "defender_accuracy",
        "mean_r_omega",
        "c_minus_share",
        "c_zero_share",
        "c_plus_share",
        "adversary_entropy",
        "defender_entropy",
        "adversary_clip_fraction",
        "defender_clip_fraction",
        "adversary_value_loss",
        "defender_value_loss",
        "adversary_approx_kl",
        "defender_approx_kl",
    ])?;
    for r in history {
        let mut rec = vec![r.epoch.to_string(), r.episodes.to_string()];
        for v in [
            r.adversary_mean_reward,
            r.defender_mean_reward,
            r.defender_accuracy,
            r.mean_r_omega,
            r.c_share[0],
            r.c_share[1],
            r.c_share[2],
            r.adversary.entropy,
            r.defender.entropy,
            r.adversary.clip_fraction,
            r.defender.clip_fraction,
            r.adversary.value_loss,
            r.defender.value_loss,
            r.adversary.approx_kl,
            r.defender.approx_kl,
        ] {
            rec.push(v.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
