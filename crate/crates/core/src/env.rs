//! Two-agent episodic environment: the adversary acts every step, the
//! defender classifies the residual at each detection time.
//!
//! Timing: the action taken at step `t` advances `s_t` to `s_{t+1}`. At a
//! detection time `t` the residual compares `s_{t+1}` with the prediction
//! made from the observed states `s_{t-d+2} ..= s_t`, so the last attacked
//! step of the window is the one the detector sees directly. The window
//! record resets after the defender's decision.
//!
//! Because the residual only exists after the physics step, stepping is
//! split in two: [`MarlEnv::advance`] runs the physics and, at detection
//! times, hands back the residual; [`MarlEnv::resolve`] then takes the
//! defender's label and settles the rewards. [`MarlEnv::step`] and
//! [`MarlEnv::step_with`] wrap both for callers that already know the
//! defender's action or can compute it from the residual.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_mask, effective_droop, is_detection_time, window_label, AdversaryAction, DroopSetting, Label, WindowRecord, NO_ATTACK};
use crate::error::{Error, Result};
use crate::grid::{sample_initial_state_with, simulate_reference, step_rk4, GridParams, SystemState, Trajectory};
use crate::predictor::{residual_stacked, LstmPredictor, Residual};
use crate::scalar::Scalar;

/// What to do when the integrator blows up mid-episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergencePolicy {
    /// Propagate the integration error.
    Abort,
    /// End the episode and give the adversary `truncate_reward`.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Detection window length `d`.
    pub d: usize,
    /// Frequency-deviation reward scale `c_s`.
    pub c_s: f64,
    /// Defender reward magnitude `r`.
    pub r: f64,
    /// Adversary reward on capture.
    pub p: f64,
    /// Residual scale `c_w`.
    pub c_w: f64,
    /// Half-width of the uniform initial-state disturbance.
    pub disturbance: f64,
    pub divergence: DivergencePolicy,
    pub truncate_reward: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            d: 6,
            c_s: 0.1,
            r: 0.1,
            p: -0.1,
            c_w: 100.0,
            disturbance: 0.2,
            divergence: DivergencePolicy::Abort,
            truncate_reward: -10.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if !(self.r > 0.0) {
            return bad("defender reward r must be positive");
        }
        if !(self.p < 0.0) {
            return bad("capture penalty p must be negative");
        }
        if !(self.c_s > 0.0) {
            return bad("reward scale c_s must be positive");
        }
        if !(self.c_w.is_finite() && self.c_w > 0.0) {
            return bad("residual scale c_w must be positive");
        }
        if !(self.disturbance >= 0.0) {
            return bad("disturbance must be non-negative");
        }
        Ok(())
    }
}

/// Diagnostics attached to every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Step index `t` of the action.
    pub t: usize,
    pub effective: Label,
    pub setting: DroopSetting,
    pub mute: bool,
    /// `c_s Σ(|ω| - |ω^ref|)` at `t + 1`.
    pub r_omega: f64,
    pub window_label: Option<Label>,
    pub defender_action: Option<Label>,
    /// `D^suc`: the defender named the attacked bus.
    pub captured: Option<bool>,
    /// Sum of the adversary's step rewards over the window just closed.
    pub window_reward: Option<f64>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    /// `[θ; ω; (t+1)/T]` after the step.
    pub adversary_obs: Vec<T>,
    pub defender_obs: Option<Residual<T>>,
    pub adversary_reward: f64,
    pub defender_reward: Option<f64>,
    pub done: bool,
    pub info: StepInfo,
}

/// Result of the physics half of a step.
#[derive(Debug, Clone, PartialEq)]
pub enum Transition<T> {
    /// Not a detection time; the step is complete.
    Done(StepOutcome<T>),
    /// Detection time: the defender must classify this residual via
    /// [`MarlEnv::resolve`] before the episode can continue.
    Detect(Residual<T>),
}

/// Running totals over one episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTotals {
    pub adversary_reward: f64,
    pub defender_reward: f64,
    pub r_omega: f64,
    pub decisions: usize,
    pub correct: usize,
    pub captures: usize,
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    /// State after the step.
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub effective: Label,
    pub c: i8,
    pub mute: bool,
    pub r_omega: f64,
    pub adversary_reward: f64,
    pub defender_action: Option<Label>,
    pub window_label: Option<Label>,
    pub defender_reward: Option<f64>,
    pub captured: Option<bool>,
}

struct Pending<T> {
    outcome: StepOutcome<T>,
    label: Label,
}

/// Mutable state of one episode.
pub struct EpisodeContext<T> {
    pub current: SystemState<T>,
    pub reference: Trajectory<T>,
    pub record: WindowRecord,
    /// Last `d - 1` observed states, stacked, oldest first.
    pub history: VecDeque<Vec<T>>,
    /// Adversary step rewards granted so far in the open window.
    pub pending_adv_rewards: Vec<f64>,
    /// `D^suc` at each detection time seen so far.
    pub detections: Vec<(usize, bool)>,
    pub totals: EpisodeTotals,
    pub done: bool,
    trace: Option<Vec<TraceRow>>,
    pending: Option<Pending<T>>,
}

impl<T: Scalar> EpisodeContext<T> {
    /// Start recording a per-step trace.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceRow>> {
        self.trace.take()
    }

    /// True between `advance` returning [`Transition::Detect`] and `resolve`.
    pub fn awaiting_defender(&self) -> bool {
        self.pending.is_some()
    }

    pub fn step(&self) -> usize {
        self.current.step
    }
}

/// `c_s Σ_i (|ω_i| - |ω^ref_i|)`.
pub fn adv_step_reward<T: Scalar>(omega: &[T], omega_ref: &[T], c_s: f64) -> f64 {
    let s: f64 = omega
        .iter()
        .zip(omega_ref)
        .map(|(w, r)| w.to_f64_lossy().abs() - r.to_f64_lossy().abs())
        .sum();
    c_s * s
}

/// Environment definition shared read-only by any number of episodes.
#[derive(Clone, Copy)]
pub struct MarlEnv<'a, T> {
    pub grid: &'a GridParams<T>,
    pub predictor: &'a LstmPredictor<T>,
    pub config: &'a EnvConfig,
}

impl<'a, T: Scalar> MarlEnv<'a, T> {
    pub fn new(grid: &'a GridParams<T>, predictor: &'a LstmPredictor<T>, config: &'a EnvConfig) -> Result<Self> {
        config.validate()?;
        predictor.validate_for(grid)?;
        if predictor.window != config.d - 1 {
            return Err(Error::Config(format!(
                "predictor history is {} states but the window length d = {} needs {}",
                predictor.window,
                config.d,
                config.d - 1
            )));
        }
        if grid.steps() <= config.d {
            return Err(Error::Config(format!("episode of {} steps has no detection time for d = {}", grid.steps(), config.d)));
        }
        Ok(Self { grid, predictor, config })
    }

    pub fn n_buses(&self) -> usize {
        self.grid.n_buses()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn adversary_obs_dim(&self) -> usize {
        2 * self.n_buses() + 1
    }

    pub fn defender_obs_dim(&self) -> usize {
        2 * self.n_buses()
    }

    pub fn is_detection_time(&self, t: usize) -> bool {
        is_detection_time(t, self.steps(), self.config.d)
    }

    pub fn observe(&self, s: &SystemState<T>) -> Vec<T> {
        let mut obs = s.stacked();
        obs.push(T::lit(s.step as f64 / self.steps() as f64));
        obs
    }

    /// Fresh episode from a disturbed initial state.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(EpisodeContext<T>, Vec<T>)> {
        let s0 = sample_initial_state_with(self.grid, self.config.disturbance, rng);
        self.reset_from(s0)
    }

    pub fn reset_from(&self, s0: SystemState<T>) -> Result<(EpisodeContext<T>, Vec<T>)> {
        let reference = simulate_reference(self.grid, &s0)?;
        let mut history = VecDeque::with_capacity(self.config.d);
        history.push_back(s0.stacked());
        let obs = self.observe(&s0);
        let ctx = EpisodeContext {
            current: s0,
            reference,
            record: WindowRecord::fresh(0),
            history,
            pending_adv_rewards: Vec::with_capacity(self.config.d + 1),
            detections: Vec::new(),
            totals: EpisodeTotals::default(),
            done: false,
            trace: None,
            pending: None,
        };
        Ok((ctx, obs))
    }

    /// Physics half of a step: mask, tamper, integrate, reward the adversary.
    pub fn advance(&self, ctx: &mut EpisodeContext<T>, action: &AdversaryAction) -> Result<Transition<T>> {
        if ctx.done {
            return Err(Error::contract("episode is over; reset first"));
        }
        if ctx.pending.is_some() {
            return Err(Error::contract("the defender has not resolved the last detection"));
        }
        let n = self.n_buses();
        if action.bus < NO_ATTACK || action.bus >= n as Label {
            return Err(Error::contract(format!("bus {} outside -1..{n}", action.bus)));
        }
        let t = ctx.current.step;
        let steps = self.steps();
        let (effective, record) = apply_mask(&ctx.record, action);
        ctx.record = record;
        let droop = effective_droop(self.grid.droop_ref(), effective, action.setting);
        let mut info = StepInfo {
            t,
            effective,
            setting: action.setting,
            mute: action.mute,
            r_omega: 0.0,
            window_label: None,
            defender_action: None,
            captured: None,
            window_reward: None,
            truncated: false,
        };

        let next = match step_rk4(self.grid, &ctx.current, &droop) {
            Ok(s) => s,
            Err(e @ Error::Diverged { .. }) => match self.config.divergence {
                DivergencePolicy::Abort => return Err(e),
                DivergencePolicy::Truncate => {
                    ctx.done = true;
                    info.truncated = true;
                    let reward = self.config.truncate_reward;
                    ctx.totals.adversary_reward += reward;
                    let outcome = StepOutcome {
                        adversary_obs: self.observe(&ctx.current),
                        defender_obs: None,
                        adversary_reward: reward,
                        defender_reward: None,
                        done: true,
                        info,
                    };
                    self.push_trace(ctx, &outcome);
                    return Ok(Transition::Done(outcome));
                }
            },
            Err(e) => return Err(e),
        };

        let r_omega = adv_step_reward(&next.omega, &ctx.reference.states[t + 1].omega, self.config.c_s);
        info.r_omega = r_omega;
        ctx.totals.r_omega += r_omega;

        let detection = self.is_detection_time(t);
        let residual = if detection {
            let hist: Vec<Vec<T>> = ctx.history.iter().cloned().collect();
            let predicted = self.predictor.predict_stacked(&hist)?;
            Some(residual_stacked(&next.stacked(), &predicted, T::lit(self.config.c_w))?)
        } else {
            None
        };

        ctx.history.push_back(next.stacked());
        while ctx.history.len() > self.config.d - 1 {
            ctx.history.pop_front();
        }
        let obs = self.observe(&next);
        ctx.current = next;
        let done = t + 1 == steps;

        let outcome = StepOutcome {
            adversary_obs: obs,
            defender_obs: residual.clone(),
            adversary_reward: r_omega,
            defender_reward: None,
            done,
            info,
        };
        match residual {
            None => {
                ctx.pending_adv_rewards.push(r_omega);
                ctx.totals.adversary_reward += r_omega;
                ctx.done = done;
                self.push_trace(ctx, &outcome);
                Ok(Transition::Done(outcome))
            }
            Some(res) => {
                let label = window_label(&ctx.record, t, steps, self.config.d)?;
                ctx.pending = Some(Pending { outcome, label });
                Ok(Transition::Detect(res))
            }
        }
    }

    /// Window label of the pending detection, for scripted or oracle defenders.
    pub fn pending_label(&self, ctx: &EpisodeContext<T>) -> Option<Label> {
        ctx.pending.as_ref().map(|p| p.label)
    }

    /// Decision half of a detection step: score the defender's label, apply
    /// the capture penalty, close the window.
    pub fn resolve(&self, ctx: &mut EpisodeContext<T>, defender_action: Label) -> Result<StepOutcome<T>> {
        let n = self.n_buses() as Label;
        if defender_action < NO_ATTACK || defender_action >= n {
            return Err(Error::contract(format!("defender label {defender_action} outside -1..{n}")));
        }
        let Pending { mut outcome, label } =
            ctx.pending.take().ok_or_else(|| Error::contract("no detection is awaiting a defender action"))?;
        let correct = defender_action == label;
        let captured = correct && label != NO_ATTACK;
        let defender_reward = if correct { self.config.r } else { -self.config.r };
        if captured {
            outcome.adversary_reward = self.config.p;
        }
        ctx.pending_adv_rewards.push(outcome.adversary_reward);
        let window_reward: f64 = ctx.pending_adv_rewards.iter().sum();
        ctx.pending_adv_rewards.clear();

        outcome.defender_reward = Some(defender_reward);
        outcome.info.window_label = Some(label);
        outcome.info.defender_action = Some(defender_action);
        outcome.info.captured = Some(captured);
        outcome.info.window_reward = Some(window_reward);

        let t = outcome.info.t;
        ctx.detections.push((t, captured));
        ctx.record = WindowRecord::fresh(t + 1);
        ctx.totals.adversary_reward += outcome.adversary_reward;
        ctx.totals.defender_reward += defender_reward;
        ctx.totals.decisions += 1;
        ctx.totals.correct += correct as usize;
        ctx.totals.captures += captured as usize;
        ctx.done = outcome.done;
        self.push_trace(ctx, &outcome);
        Ok(outcome)
    }

    /// One full step with the defender's action given up front; it must be
    /// present exactly at detection times.
    pub fn step(&self, ctx: &mut EpisodeContext<T>, action: &AdversaryAction, defender_action: Option<Label>) -> Result<StepOutcome<T>> {
        let t = ctx.current.step;
        match (self.is_detection_time(t), defender_action) {
            (true, None) => return Err(Error::contract(format!("step {t} is a detection time but no defender action was given"))),
            (false, Some(_)) => return Err(Error::contract(format!("step {t} is not a detection time; defender action not allowed"))),
            _ => {}
        }
        match self.advance(ctx, action)? {
            Transition::Done(o) => Ok(o),
            Transition::Detect(_) => self.resolve(ctx, defender_action.expect("checked above")),
        }
    }

    /// One full step where the defender maps `(residual, window label)` to
    /// its decision. The label is passed so oracle baselines can be built;
    /// real defenders must ignore it.
    pub fn step_with(
        &self,
        ctx: &mut EpisodeContext<T>,
        action: &AdversaryAction,
        defender: impl FnOnce(&Residual<T>, Label) -> Result<Label>,
    ) -> Result<StepOutcome<T>> {
        match self.advance(ctx, action)? {
            Transition::Done(o) => Ok(o),
            Transition::Detect(res) => {
                let label = self.pending_label(ctx).expect("pending detection");
                let decision = defender(&res, label)?;
                self.resolve(ctx, decision)
            }
        }
    }

    fn push_trace(&self, ctx: &mut EpisodeContext<T>, o: &StepOutcome<T>) {
        let Some(trace) = ctx.trace.as_mut() else { return };
        trace.push(TraceRow {
            t: o.info.t,
            theta: ctx.current.theta.iter().map(|v| v.to_f64_lossy()).collect(),
            omega: ctx.current.omega.iter().map(|v| v.to_f64_lossy()).collect(),
            effective: o.info.effective,
            c: o.info.setting.as_i8(),
            mute: o.info.mute,
            r_omega: o.info.r_omega,
            adversary_reward: o.adversary_reward,
            defender_action: o.info.defender_action,
            window_label: o.info.window_label,
            defender_reward: o.defender_reward,
            captured: o.info.captured,
        });
    }
}

/// Writes traces as CSV: `episode, t, theta_0.., omega_0.., effective, c,
/// mute, r_omega, adversary_reward, defender_action, window_label,
/// defender_reward, captured`. Empty cells mark non-detection steps.
pub fn write_traces<W: Write>(out: W, episodes: &[(usize, &[TraceRow])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = episodes.iter().flat_map(|(_, rows)| rows.first()).map(|r| r.theta.len()).next().unwrap_or(0);
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("theta_{i}")));
    header.extend((0..n).map(|i| format!("omega_{i}")));
    for h in ["effective", "c", "mute", "r_omega", "adversary_reward", "defender_action", "window_label", "defender_reward", "captured"] {
        header.push(h.to_string());
    }
    w.write_record(&header)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for (ep, rows) in episodes {
        for r in rows.iter() {
            let mut rec = vec![ep.to_string(), r.t.to_string()];
            rec.extend(r.theta.iter().map(|v| format!("{v:e}")));
            rec.extend(r.omega.iter().map(|v| format!("{v:e}")));
            rec.push(r.effective.to_string());
            rec.push(r.c.to_string());
            rec.push((r.mute as u8).to_string());
            rec.push(format!("{:e}", r.r_omega));
            rec.push(format!("{:e}", r.adversary_reward));
            rec.push(opt(r.defender_action.map(|v| v.to_string())));
            rec.push(opt(r.window_label.map(|v| v.to_string())));
            rec.push(opt(r.defender_reward.map(|v| format!("{v:e}"))));
            rec.push(opt(r.captured.map(|v| (v as u8).to_string())));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One parsed trace row: `(episode, t, defender_action, window_label)` for
/// detection rows. Used to recount accuracy independently of the evaluator.
pub fn read_trace_decisions<R: std::io::Read>(input: R) -> Result<Vec<(usize, usize, Label, Label)>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Dataset(format!("trace is missing column {name}")))
    };
    let (ep, t, act, lab) = (col("episode")?, col("t")?, col("defender_action")?, col("window_label")?);
    let parse = |s: &str, what: &str| s.parse::<i64>().map_err(|e| Error::Dataset(format!("bad {what} {s:?}: {e}")));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec[act].is_empty() {
            continue;
        }
        out.push((
            parse(&rec[ep], "episode")? as usize,
            parse(&rec[t], "step")? as usize,
            parse(&rec[act], "defender action")? as Label,
            parse(&rec[lab], "window label")? as Label,
        ));
    }
    Ok(out)
}
