//! Evaluation protocols: pooled detection accuracy against an attacker,
//! per-bus time-invariant sweeps, and adversary action statistics.
//!
//! Policies act greedily. Episodes run in parallel, each on its own seed
//! stream, and reports are reduced in episode order.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{label_to_class, AdversaryAction, DroopSetting, Label, NO_ATTACK};
use crate::env::{MarlEnv, TraceRow};
use crate::error::{Error, Result};
use crate::offline::OfflineClassifier;
use crate::policy::{decode_adversary, decode_defender, PolicyNet, Role};
use crate::rng::stream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub enum Attacker<'a, T> {
    /// Greedy trained adversary.
    Policy(&'a PolicyNet<T>),
    /// `(g^A = bus, c = -1, m = 0)` at every step.
    TimeInvariant { bus: Label },
    NoAttack,
    /// Uniformly random raw actions.
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub enum Defender<'a, T> {
    /// Greedy trained defender.
    Policy(&'a PolicyNet<T>),
    Offline(&'a OfflineClassifier<T>),
    /// Always answers the true window label.
    Oracle,
    Uniform,
    AlwaysNoAttack,
}

/// Scripted attacker holding `c = -1` on `bus` for the whole horizon.
pub fn time_invariant_attack<T>(bus: Label, n_buses: usize) -> Result<Attacker<'static, T>> {
    if bus < 0 || bus >= n_buses as Label {
        return Err(Error::contract(format!("time-invariant attack needs a bus in 0..{n_buses}, got {bus}")));
    }
    Ok(Attacker::TimeInvariant { bus })
}

impl<T: Scalar> Attacker<'_, T> {
    fn check(&self, n_buses: usize) -> Result<()> {
        if let Attacker::Policy(p) = self {
            p.validate_shapes()?;
            if p.role != Role::Adversary || p.n_buses != n_buses {
                return Err(Error::Model(format!("attacker policy is a {:?} for {} buses", p.role, p.n_buses)));
            }
        }
        Ok(())
    }

    fn act<R: Rng + ?Sized>(&self, obs: &[T], n_buses: usize, rng: &mut R) -> Result<AdversaryAction> {
        Ok(match self {
            Attacker::Policy(p) => decode_adversary(&p.forward_one(obs)?.greedy(0)),
            Attacker::TimeInvariant { bus } => AdversaryAction { bus: *bus, setting: DroopSetting::Minus, mute: false },
            Attacker::NoAttack => AdversaryAction::idle(),
            Attacker::Uniform => AdversaryAction {
                bus: rng.random_range(-1..n_buses as Label),
                setting: DroopSetting::ALL[rng.random_range(0..3)],
                mute: rng.random(),
            },
        })
    }
}

impl<T: Scalar> Defender<'_, T> {
    fn check(&self, n_buses: usize) -> Result<()> {
        match self {
            Defender::Policy(p) => {
                p.validate_shapes()?;
                if p.role != Role::Defender || p.n_buses != n_buses {
                    return Err(Error::Model(format!("defender policy is a {:?} for {} buses", p.role, p.n_buses)));
                }
            }
            Defender::Offline(c) => {
                c.validate_shapes()?;
                if c.n_buses != n_buses {
                    return Err(Error::Model(format!("classifier is for {} buses, grid has {n_buses}", c.n_buses)));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn decide<R: Rng + ?Sized>(&self, residual: &[T], label: Label, n_buses: usize, rng: &mut R) -> Result<Label> {
        match self {
            Defender::Policy(p) => Ok(decode_defender(&p.forward_one(residual)?.greedy(0))),
            Defender::Offline(c) => c.classify(residual),
            Defender::Oracle => Ok(label),
            Defender::Uniform => Ok(rng.random_range(-1..n_buses as Label)),
            Defender::AlwaysNoAttack => Ok(NO_ATTACK),
        }
    }
}

/// Counts of raw adversary action components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionHistogram {
    /// Index `k` counts `g^A = k - 1`.
    pub bus: Vec<usize>,
    /// `c = -1, 0, 1`.
    pub c: [usize; 3],
    /// `m = 0, 1`.
    pub mute: [usize; 2],
}

impl ActionHistogram {
    fn new(n_buses: usize) -> Self {
        Self { bus: vec![0; n_buses + 1], c: [0; 3], mute: [0; 2] }
    }

    fn add(&mut self, a: &AdversaryAction) {
        self.bus[label_to_class(a.bus)] += 1;
        self.c[a.setting.index()] += 1;
        self.mute[a.mute as usize] += 1;
    }

    fn merge(&mut self, o: &ActionHistogram) {
        for (a, b) in self.bus.iter_mut().zip(&o.bus) {
            *a += b;
        }
        for k in 0..3 {
            self.c[k] += o.c[k];
        }
        for k in 0..2 {
            self.mute[k] += o.mute[k];
        }
    }

    pub fn total(&self) -> usize {
        self.c.iter().sum()
    }

    fn freq<const K: usize>(counts: &[usize; K]) -> [f64; K] {
        let t = counts.iter().sum::<usize>().max(1) as f64;
        counts.map(|c| c as f64 / t)
    }

    pub fn c_frequencies(&self) -> [f64; 3] {
        Self::freq(&self.c)
    }

    pub fn mute_frequencies(&self) -> [f64; 2] {
        Self::freq(&self.mute)
    }

    pub fn bus_frequencies(&self) -> Vec<f64> {
        let t = self.bus.iter().sum::<usize>().max(1) as f64;
        self.bus.iter().map(|c| *c as f64 / t).collect()
    }

    /// Most frequent droop value, ties toward `-1`.
    pub fn modal_c(&self) -> DroopSetting {
        let mut best = 0;
        for k in 1..3 {
            if self.c[k] > self.c[best] {
                best = k;
            }
        }
        DroopSetting::ALL[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub decisions: usize,
    pub correct: usize,
    /// Pooled percent of detection decisions equal to the window label.
    pub accuracy: f64,
    /// Recall per true label, index `k` for label `k - 1`; `None` if absent.
    pub per_label_accuracy: Vec<Option<f64>>,
    /// `confusion[true class][predicted class]`.
    pub confusion: Vec<Vec<usize>>,
    /// Σ_t r^ω_t summed over all episodes.
    pub total_r_omega: f64,
    pub mean_r_omega: f64,
    pub actions: ActionHistogram,
}

impl EvalReport {
    /// Recall on windows attacked at bus `i`.
    pub fn bus_accuracy(&self, bus: usize) -> Option<f64> {
        self.per_label_accuracy.get(bus + 1).copied().flatten()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "episodes          {}", self.episodes);
        let _ = writeln!(s, "decisions         {}", self.decisions);
        let _ = writeln!(s, "accuracy (%)      {:.2}", self.accuracy);
        let _ = writeln!(s, "sum r_omega       {:.4}", self.total_r_omega);
        let _ = writeln!(s, "mean r_omega/ep   {:.4}", self.mean_r_omega);
        let c = self.actions.c_frequencies();
        let _ = writeln!(s, "c share -1/0/+1   {:.3} {:.3} {:.3}", c[0], c[1], c[2]);
        let _ = writeln!(s, "label  windows  recall(%)");
        for (k, acc) in self.per_label_accuracy.iter().enumerate() {
            let n: usize = self.confusion[k].iter().sum();
            let acc = acc.map_or("-".to_string(), |a| format!("{a:.2}"));
            let _ = writeln!(s, "{:>5}  {:>7}  {:>9}", k as i64 - 1, n, acc);
        }
        s
    }
}

struct EpisodeResult {
    confusion: Vec<Vec<usize>>,
    r_omega: f64,
    actions: ActionHistogram,
    trace: Option<Vec<TraceRow>>,
}

/// Runs `episodes` evaluation episodes. With `keep_traces` the per-step
/// traces are returned in episode order.
pub fn evaluate_defender<T: Scalar>(
    env: &MarlEnv<'_, T>,
    attacker: &Attacker<'_, T>,
    defender: &Defender<'_, T>,
    episodes: usize,
    seed: u64,
    keep_traces: bool,
) -> Result<(EvalReport, Option<Vec<Vec<TraceRow>>>)> {
    if episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let n = env.n_buses();
    attacker.check(n)?;
    defender.check(n)?;
    let results: Vec<EpisodeResult> = (0..episodes)
        .into_par_iter()
        .map(|ep| {
            let mut rng = stream(seed, "eval", ep as u64);
            let (mut ctx, mut obs) = env.reset(&mut rng)?;
            if keep_traces {
                ctx.enable_trace();
            }
            let mut confusion = vec![vec![0usize; n + 1]; n + 1];
            let mut actions = ActionHistogram::new(n);
            while !ctx.done {
                let a = attacker.act(&obs, n, &mut rng)?;
                actions.add(&a);
                let o = env.step_with(&mut ctx, &a, |res, label| defender.decide(&res.values, label, n, &mut rng))?;
                if let (Some(l), Some(g)) = (o.info.window_label, o.info.defender_action) {
                    confusion[label_to_class(l)][label_to_class(g)] += 1;
                }
                obs = o.adversary_obs;
            }
            Ok(EpisodeResult { confusion, r_omega: ctx.totals.r_omega, actions, trace: ctx.take_trace() })
        })
        .collect::<Result<_>>()?;

    let mut confusion = vec![vec![0usize; n + 1]; n + 1];
    let mut actions = ActionHistogram::new(n);
    let mut total_r_omega = 0.0;
    let mut traces = keep_traces.then(Vec::new);
    for r in results {
        for (row, add) in confusion.iter_mut().zip(&r.confusion) {
            for (a, b) in row.iter_mut().zip(add) {
                *a += b;
            }
        }
        actions.merge(&r.actions);
        total_r_omega += r.r_omega;
        if let (Some(all), Some(t)) = (traces.as_mut(), r.trace) {
            all.push(t);
        }
    }
    let decisions: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..=n).map(|k| confusion[k][k]).sum();
    let per_label_accuracy = (0..=n)
        .map(|k| {
            let row: usize = confusion[k].iter().sum();
            (row > 0).then(|| 100.0 * confusion[k][k] as f64 / row as f64)
        })
        .collect();
    let report = EvalReport {
        episodes,
        seed,
        decisions,
        correct,
        accuracy: 100.0 * correct as f64 / decisions.max(1) as f64,
        per_label_accuracy,
        confusion,
        total_r_omega,
        mean_r_omega: total_r_omega / episodes as f64,
        actions,
    };
    Ok((report, traces))
}

/// Detection accuracy under a time-invariant attack on each bus in turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub episodes_per_bus: usize,
    pub seed: u64,
    /// Percent, one entry per bus.
    pub per_bus: Vec<f64>,
    pub mean: f64,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("bus  accuracy(%)\n");
        for (i, a) in self.per_bus.iter().enumerate() {
            let _ = writeln!(s, "{i:>3}  {a:>11.2}");
        }
        let _ = writeln!(s, "mean {:>11.2}", self.mean);
        s
    }
}

pub fn time_invariant_sweep<T: Scalar>(
    env: &MarlEnv<'_, T>,
    defender: &Defender<'_, T>,
    episodes_per_bus: usize,
    seed: u64,
) -> Result<SweepReport> {
    let n = env.n_buses();
    let per_bus = (0..n)
        .map(|bus| {
            let attacker = time_invariant_attack::<T>(bus as Label, n)?;
            let (rep, _) = evaluate_defender(env, &attacker, defender, episodes_per_bus, seed.wrapping_add(bus as u64), false)?;
            Ok(rep.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_bus.iter().sum::<f64>() / n as f64;
    Ok(SweepReport { episodes_per_bus, seed, per_bus, mean })
}

/// Histogram of the attacker's raw choices over `episodes` episodes.
pub fn action_statistics<T: Scalar>(env: &MarlEnv<'_, T>, attacker: &Attacker<'_, T>, episodes: usize, seed: u64) -> Result<ActionHistogram> {
    Ok(evaluate_defender(env, attacker, &Defender::AlwaysNoAttack, episodes, seed, false)?.0.actions)
}
