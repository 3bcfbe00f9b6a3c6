//! Swing-equation dynamics of a Kron-reduced grid under droop control.
//!
//! Each bus `i` evolves as
//!
//! ```text
//! dθ_i/dt = ω_i
//! M_i dω_i/dt = p_i − k_i ω_i − D_i ω_i − Σ_j B_ij sin(θ_i − θ_j)
//! ```
//!
//! where `k_i` is the (possibly tampered) droop gain of the inverter at bus
//! `i`. Integration is classical fixed-step RK4.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bound on |θ| beyond which an episode is considered to have diverged.
pub const DIVERGENCE_THETA: f64 = 1.0e6;

/// Half-width of the uniform disturbance applied to the equilibrium at reset.
pub const DEFAULT_DISTURBANCE: f64 = 0.2;

/// The synthetic 10-bus system shipped with the crate.
pub const DEFAULT_GRID_TOML: &str = include_str!("../assets/grid10.toml");

/// On-disk layout of a grid parameter file. All arrays are dense; the
/// susceptance matrix is stored row-major as `n_buses * n_buses` values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default)]
    pub name: Option<String>,
    pub n_buses: usize,
    pub dt: f64,
    pub t_f: f64,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub droop_ref: Vec<f64>,
    pub equilibrium_theta: Vec<f64>,
    pub susceptance: Vec<f64>,
}

impl GridFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grid file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read grid file {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("grid file serializes")
    }
}

/// Validated grid parameters.
///
/// Net injections are not read from the file: they are derived from the
/// configured equilibrium angles so that `(θ*, ω = 0)` is an exact fixed
/// point under the reference droop gains.
#[derive(Debug, Clone, PartialEq)]
pub struct GridParams<T> {
    name: String,
    n_buses: usize,
    inertia: Vec<T>,
    damping: Vec<T>,
    susceptance: Vec<T>,
    injection: Vec<T>,
    droop_ref: Vec<T>,
    equilibrium_theta: Vec<T>,
    dt: T,
    t_f: T,
    steps: usize,
}

fn invalid(invariant: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidGrid { invariant, detail: detail.into() }
}

impl<T: Scalar> GridParams<T> {
    /// Validates a parameter file, reporting the first violated invariant.
    pub fn from_file(file: &GridFile) -> Result<Self> {
        let n = file.n_buses;
        if n == 0 {
            return Err(invalid("n_buses_positive", "n_buses must be at least 1"));
        }
        for (key, len, want) in [
            ("inertia", file.inertia.len(), n),
            ("damping", file.damping.len(), n),
            ("droop_ref", file.droop_ref.len(), n),
            ("equilibrium_theta", file.equilibrium_theta.len(), n),
            ("susceptance", file.susceptance.len(), n * n),
        ] {
            if len != want {
                return Err(invalid("dimensions", format!("{key} has {len} entries, expected {want}")));
            }
        }
        let all = file
            .inertia
            .iter()
            .chain(&file.damping)
            .chain(&file.droop_ref)
            .chain(&file.equilibrium_theta)
            .chain(&file.susceptance)
            .chain([&file.dt, &file.t_f]);
        if let Some(bad) = all.into_iter().find(|v| !v.is_finite()) {
            return Err(invalid("finite_values", format!("non-finite value {bad}")));
        }
        if let Some((i, m)) = file.inertia.iter().enumerate().find(|(_, m)| **m <= 0.0) {
            return Err(invalid("inertia_positive", format!("M[{i}] = {m}")));
        }
        if let Some((i, d)) = file.damping.iter().enumerate().find(|(_, d)| **d < 0.0) {
            return Err(invalid("damping_nonnegative", format!("D[{i}] = {d}")));
        }
        let b = &file.susceptance;
        for i in 0..n {
            if b[i * n + i] != 0.0 {
                return Err(invalid("susceptance_zero_diagonal", format!("B[{i}][{i}] = {}", b[i * n + i])));
            }
            for j in (i + 1)..n {
                if b[i * n + j] != b[j * n + i] {
                    return Err(invalid(
                        "susceptance_symmetric",
                        format!("B[{i}][{j}] = {} but B[{j}][{i}] = {}", b[i * n + j], b[j * n + i]),
                    ));
                }
            }
        }
        if file.dt <= 0.0 || file.t_f <= 0.0 {
            return Err(invalid("horizon_consistent", "dt and t_f must be positive"));
        }
        let steps = (file.t_f / file.dt).round();
        let dt = T::lit(file.dt);
        let t_f = T::lit(file.t_f);
        let span = T::lit(steps) * dt;
        if steps < 1.0 || (span - t_f).abs() > T::epsilon() * t_f {
            return Err(invalid(
                "horizon_consistent",
                format!("t_f = {} is not an integer multiple of dt = {}", file.t_f, file.dt),
            ));
        }

        let conv = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let susceptance = conv(b);
        let equilibrium_theta = conv(&file.equilibrium_theta);
        let injection = (0..n)
            .map(|i| coupling_flow(&susceptance, &equilibrium_theta, n, i))
            .collect();
        Ok(Self {
            name: file.name.clone().unwrap_or_else(|| format!("grid-{n}")),
            n_buses: n,
            inertia: conv(&file.inertia),
            damping: conv(&file.damping),
            susceptance,
            injection,
            droop_ref: conv(&file.droop_ref),
            equilibrium_theta,
            dt,
            t_f,
            steps: steps as usize,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&GridFile::load(path)?)
    }

    /// The shipped synthetic 10-bus system.
    pub fn default_10_bus() -> Self {
        let file = GridFile::from_toml_str(DEFAULT_GRID_TOML).expect("bundled grid parses");
        Self::from_file(&file).expect("bundled grid is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n_buses(&self) -> usize {
        self.n_buses
    }
    pub fn inertia(&self) -> &[T] {
        &self.inertia
    }
    pub fn damping(&self) -> &[T] {
        &self.damping
    }
    /// Row-major `N x N` susceptance matrix.
    pub fn susceptance(&self) -> &[T] {
        &self.susceptance
    }
    pub fn injection(&self) -> &[T] {
        &self.injection
    }
    pub fn droop_ref(&self) -> &[T] {
        &self.droop_ref
    }
    pub fn equilibrium_theta(&self) -> &[T] {
        &self.equilibrium_theta
    }
    pub fn dt(&self) -> T {
        self.dt
    }
    pub fn t_f(&self) -> T {
        self.t_f
    }
    /// Steps per episode `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }
    /// Dimension of the stacked state `[θ; ω]`.
    pub fn state_dim(&self) -> usize {
        2 * self.n_buses
    }

    /// Copy with a different horizon, keeping `dt`.
    pub fn with_steps(&self, steps: usize) -> Self {
        let mut out = self.clone();
        out.steps = steps;
        out.t_f = T::lit(steps as f64) * self.dt;
        out
    }

    /// Copy with a different step length, keeping the step count.
    pub fn with_dt(&self, dt: T) -> Self {
        let mut out = self.clone();
        out.dt = dt;
        out.t_f = T::lit(out.steps as f64) * dt;
        out
    }

    /// `(θ*, 0)` at step 0.
    pub fn equilibrium_state(&self) -> SystemState<T> {
        SystemState {
            theta: self.equilibrium_theta.clone(),
            omega: vec![T::zero(); self.n_buses],
            step: 0,
        }
    }

    /// Right-hand side without dimension checks; writes into the output slices.
    #[inline]
    pub(crate) fn rhs_into(&self, theta: &[T], omega: &[T], droop: &[T], dtheta: &mut [T], domega: &mut [T]) {
        let n = self.n_buses;
        dtheta.copy_from_slice(omega);
        for i in 0..n {
            let flow = coupling_flow(&self.susceptance, theta, n, i);
            domega[i] = (self.injection[i] - droop[i] * omega[i] - self.damping[i] * omega[i] - flow)
                / self.inertia[i];
        }
    }
}

#[inline]
fn coupling_flow<T: Scalar>(b: &[T], theta: &[T], n: usize, i: usize) -> T {
    let row = &b[i * n..(i + 1) * n];
    let mut acc = T::zero();
    for j in 0..n {
        acc += row[j] * (theta[i] - theta[j]).sin();
    }
    acc
}

/// Phase angles and frequency deviations of every bus at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SystemState<T> {
    pub theta: Vec<T>,
    pub omega: Vec<T>,
    pub step: usize,
}

impl<T: Scalar> SystemState<T> {
    /// `[θ; ω]` stacked.
    pub fn stacked(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.theta.len() * 2);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.omega);
        v
    }

    pub fn max_abs_omega(&self) -> T {
        self.omega.iter().fold(T::zero(), |m, w| m.max(w.abs()))
    }
}

/// States `0..=T` of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<SystemState<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, step: usize) -> &SystemState<T> {
        &self.states[step]
    }
}

fn check_dims<T: Scalar>(params: &GridParams<T>, state: &SystemState<T>, droop: &[T]) -> Result<()> {
    let n = params.n_buses;
    if state.theta.len() != n || state.omega.len() != n {
        return Err(Error::contract(format!(
            "state has {}/{} angle/frequency entries, grid has {n} buses",
            state.theta.len(),
            state.omega.len()
        )));
    }
    if droop.len() != n {
        return Err(Error::contract(format!("droop vector has {} entries, grid has {n} buses", droop.len())));
    }
    Ok(())
}

/// Time derivatives `(dθ, dω)` of the swing equation with droop gains `droop`.
pub fn swing_rhs<T: Scalar>(params: &GridParams<T>, state: &SystemState<T>, droop: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    check_dims(params, state, droop)?;
    let n = params.n_buses;
    let mut dtheta = vec![T::zero(); n];
    let mut domega = vec![T::zero(); n];
    params.rhs_into(&state.theta, &state.omega, droop, &mut dtheta, &mut domega);
    Ok((dtheta, domega))
}

/// One classical RK4 step of length `dt`.
pub fn step_rk4<T: Scalar>(params: &GridParams<T>, state: &SystemState<T>, droop: &[T]) -> Result<SystemState<T>> {
    check_dims(params, state, droop)?;
    if state.step >= params.steps {
        return Err(Error::contract(format!(
            "cannot step past the horizon: step {} of {}",
            state.step, params.steps
        )));
    }
    let n = params.n_buses;
    let dt = params.dt;
    let half = dt / T::lit(2.0);
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);

    let (th, om) = (&state.theta, &state.omega);
    let mut k1 = (vec![T::zero(); n], vec![T::zero(); n]);
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut tt = vec![T::zero(); n];
    let mut ww = vec![T::zero(); n];

    params.rhs_into(th, om, droop, &mut k1.0, &mut k1.1);
    for i in 0..n {
        tt[i] = th[i] + half * k1.0[i];
        ww[i] = om[i] + half * k1.1[i];
    }
    params.rhs_into(&tt, &ww, droop, &mut k2.0, &mut k2.1);
    for i in 0..n {
        tt[i] = th[i] + half * k2.0[i];
        ww[i] = om[i] + half * k2.1[i];
    }
    params.rhs_into(&tt, &ww, droop, &mut k3.0, &mut k3.1);
    for i in 0..n {
        tt[i] = th[i] + dt * k3.0[i];
        ww[i] = om[i] + dt * k3.1[i];
    }
    params.rhs_into(&tt, &ww, droop, &mut k4.0, &mut k4.1);

    let mut theta = vec![T::zero(); n];
    let mut omega = vec![T::zero(); n];
    for i in 0..n {
        theta[i] = th[i] + sixth * (k1.0[i] + two * k2.0[i] + two * k3.0[i] + k4.0[i]);
        omega[i] = om[i] + sixth * (k1.1[i] + two * k2.1[i] + two * k3.1[i] + k4.1[i]);
    }
    let next = SystemState { theta, omega, step: state.step + 1 };
    guard_divergence(&next)?;
    Ok(next)
}

fn guard_divergence<T: Scalar>(state: &SystemState<T>) -> Result<()> {
    let limit = T::lit(DIVERGENCE_THETA);
    for (i, (t, w)) in state.theta.iter().zip(&state.omega).enumerate() {
        if !t.is_finite() || !w.is_finite() {
            return Err(Error::Diverged { step: state.step, detail: format!("non-finite state at bus {i}") });
        }
        if t.abs() > limit {
            return Err(Error::Diverged { step: state.step, detail: format!("|theta[{i}]| = {t} exceeds {DIVERGENCE_THETA}") });
        }
    }
    Ok(())
}

/// Full episode under the unaltered droop gains; the source of `ω^ref`.
pub fn simulate_reference<T: Scalar>(params: &GridParams<T>, s0: &SystemState<T>) -> Result<Trajectory<T>> {
    simulate_with(params, s0, |_| params.droop_ref.clone())
}

/// Full episode where the droop vector at each step is chosen by `droop_at(step)`.
pub fn simulate_with<T: Scalar>(
    params: &GridParams<T>,
    s0: &SystemState<T>,
    mut droop_at: impl FnMut(usize) -> Vec<T>,
) -> Result<Trajectory<T>> {
    if s0.step != 0 {
        return Err(Error::contract(format!("initial state must be at step 0, got {}", s0.step)));
    }
    let mut states = Vec::with_capacity(params.steps + 1);
    states.push(s0.clone());
    for t in 0..params.steps {
        let next = step_rk4(params, &states[t], &droop_at(t))?;
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Equilibrium plus i.i.d. uniform disturbances of half-width 0.2 on every
/// angle and frequency.
pub fn sample_initial_state<T: Scalar, R: Rng + ?Sized>(params: &GridParams<T>, rng: &mut R) -> SystemState<T> {
    sample_initial_state_with(params, DEFAULT_DISTURBANCE, rng)
}

pub fn sample_initial_state_with<T: Scalar, R: Rng + ?Sized>(
    params: &GridParams<T>,
    magnitude: f64,
    rng: &mut R,
) -> SystemState<T> {
    let mut draw = || {
        if magnitude > 0.0 {
            T::lit(rng.random_range(-magnitude..=magnitude))
        } else {
            T::zero()
        }
    };
    let theta = params.equilibrium_theta.iter().map(|&t| t + draw()).collect();
    let omega = (0..params.n_buses).map(|_| draw()).collect();
    SystemState { theta, omega, step: 0 }
}
