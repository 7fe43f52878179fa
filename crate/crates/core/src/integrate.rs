//! Explicit time stepping of the coupled truth/nudged pair and backward
//! finite differences on the observation stream.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::system::{NudgeConfig, ObservationOperator, ParameterVector, StateVector, SystemModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Rk45,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Fixed step (rk4) or initial trial step (rk45).
    pub dt: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Spacing of recorded observations; defaults to `dt`.
    pub dt_obs: Option<f64>,
}

impl IntegratorConfig {
    pub fn rk4(dt: f64) -> Self {
        IntegratorConfig {
            scheme: Scheme::Rk4,
            dt,
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            dt_obs: None,
        }
    }

    pub fn rk45(dt: f64, rel_tol: f64, abs_tol: f64) -> Self {
        IntegratorConfig {
            scheme: Scheme::Rk45,
            dt,
            rel_tol,
            abs_tol,
            dt_obs: None,
        }
    }

    pub fn observation_spacing(&self) -> f64 {
        self.dt_obs.unwrap_or(self.dt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::config("integrator tolerances must be positive"));
        }
        if let Some(h) = self.dt_obs {
            if !(h > 0.0) {
                return Err(Error::config("observation spacing must be positive"));
            }
        }
        Ok(())
    }
}

/// Scratch storage for [`rk4_step_in_place`].
#[derive(Clone, Debug)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
        }
    }
}

fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Blowup { t })
    }
}

/// Classical RK4 step, overwriting `y`.
pub fn rk4_step_in_place<F>(rhs: &mut F, t: f64, y: &mut [f64], dt: f64, ws: &mut Rk4Workspace) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    rhs(t, y, &mut ws.k1);
    for i in 0..n {
        ws.stage[i] = y[i] + 0.5 * dt * ws.k1[i];
    }
    rhs(t + 0.5 * dt, &ws.stage, &mut ws.k2);
    for i in 0..n {
        ws.stage[i] = y[i] + 0.5 * dt * ws.k2[i];
    }
    rhs(t + 0.5 * dt, &ws.stage, &mut ws.k3);
    for i in 0..n {
        ws.stage[i] = y[i] + dt * ws.k3[i];
    }
    rhs(t + dt, &ws.stage, &mut ws.k4);
    for i in 0..n {
        y[i] += dt / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
    check_finite(y, t)
}

pub fn rk4_step<F>(rhs: &mut F, t: f64, state: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(dt > 0.0) {
        return Err(Error::config("rk4 step needs dt > 0"));
    }
    let mut y = state.to_vec();
    let mut ws = Rk4Workspace::new(y.len());
    rk4_step_in_place(rhs, t, &mut y, dt, &mut ws)?;
    Ok(y)
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
/// Largest step growth per accepted step.
pub const MAX_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

#[derive(Clone, Debug)]
pub struct Rk45Step {
    pub state: Vec<f64>,
    pub t_next: f64,
    pub dt_used: f64,
    pub dt_next: f64,
    pub rejections: usize,
    /// `f(t, y)` at the start and end of the accepted step, for Hermite output.
    pub slope_start: Vec<f64>,
    pub slope_end: Vec<f64>,
}

/// One accepted Dormand–Prince step starting from `dt_try`, shrinking on
/// rejection.
pub fn rk45_step<F>(rhs: &mut F, t: f64, state: &[f64], dt_try: f64, tols: Tolerances) -> Result<Rk45Step>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(tols.rel > 0.0 && tols.abs > 0.0) {
        return Err(Error::config("rk45 tolerances must be positive"));
    }
    if !(dt_try > 0.0) {
        return Err(Error::config("rk45 step needs dt > 0"));
    }
    let n = state.len();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    rhs(t, state, &mut k[0]);
    check_finite(&k[0], t)?;

    let t_scale = t.abs().max(1.0);
    let mut dt = dt_try;
    let mut rejections = 0;
    loop {
        if dt < 1e-14 * t_scale {
            return Err(Error::Stiff { t, dt });
        }
        for s in 1..7 {
            let (head, tail) = k.split_at_mut(s);
            for i in 0..n {
                let mut acc = state[i];
                for (j, kj) in head.iter().enumerate() {
                    acc += dt * DP_A[s][j] * kj[i];
                }
                stage[i] = acc;
            }
            rhs(t + DP_C[s] * dt, &stage, &mut tail[0]);
        }
        // stage 7 evaluated at the fifth-order solution
        y_new.copy_from_slice(&stage);

        let mut err_sq = 0.0;
        for i in 0..n {
            let e: f64 = dt * (0..7).map(|s| DP_E[s] * k[s][i]).sum::<f64>();
            let sc = tols.abs + tols.rel * state[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n as f64).sqrt();

        if err.is_finite() && err <= 1.0 {
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            check_finite(&y_new, t + dt)?;
            return Ok(Rk45Step {
                state: y_new,
                t_next: t + dt,
                dt_used: dt,
                dt_next: dt * factor,
                rejections,
                slope_start: k[0].clone(),
                slope_end: k[6].clone(),
            });
        }
        rejections += 1;
        let factor = if err.is_finite() {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0)
        } else {
            MIN_FACTOR
        };
        dt *= factor;
    }
}

/// Cubic Hermite interpolant across one step, `s ∈ [0, 1]`.
fn hermite(y0: &[f64], f0: &[f64], y1: &[f64], f1: &[f64], h: f64, s: f64, out: &mut [f64]) {
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
    }
}

/// Uniformly spaced `(t, I_h u)` samples, newest last.
#[derive(Clone, Debug)]
pub struct ObservationHistory {
    dt_obs: f64,
    capacity: usize,
    samples: VecDeque<(f64, Vec<f64>)>,
}

impl ObservationHistory {
    pub fn new(dt_obs: f64, capacity: usize) -> Result<Self> {
        if !(dt_obs > 0.0) {
            return Err(Error::config("observation spacing must be positive"));
        }
        if capacity < 4 {
            return Err(Error::config("observation history needs capacity >= 4"));
        }
        Ok(ObservationHistory {
            dt_obs,
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    pub fn dt_obs(&self) -> f64 {
        self.dt_obs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn latest(&self) -> Option<&(f64, Vec<f64>)> {
        self.samples.back()
    }

    /// Sample `lag` steps back from the newest (`lag = 0` is the newest).
    pub fn back(&self, lag: usize) -> Option<&(f64, Vec<f64>)> {
        let n = self.samples.len();
        if lag < n {
            self.samples.get(n - 1 - lag)
        } else {
            None
        }
    }

    pub fn push(&mut self, t: f64, observed: Vec<f64>) -> Result<()> {
        if let Some((t_last, _)) = self.samples.back() {
            let gap = t - t_last;
            let tol = 1e-12 * t.abs().max(1.0);
            if !(gap > 0.0) || (gap - self.dt_obs).abs() > tol {
                return Err(Error::config(format!(
                    "observation at t = {t} breaks uniform spacing {} (previous t = {t_last})",
                    self.dt_obs
                )));
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((t, observed));
        Ok(())
    }
}

/// Backward-difference coefficients `c_j` for `Σ c_j u_{n−j} / dt`.
pub fn backward_fd_coefficients(order: usize) -> Result<&'static [f64]> {
    match order {
        1 => Ok(&[1.0, -1.0]),
        2 => Ok(&[1.5, -2.0, 0.5]),
        3 => Ok(&[11.0 / 6.0, -3.0, 1.5, -1.0 / 3.0]),
        _ => Err(Error::config(format!("finite-difference order must be 1, 2 or 3, got {order}"))),
    }
}

/// Order-`order` backward-difference estimate of `d(I_h u)/dt` at the newest
/// sample. `Ok(None)` means not enough samples yet.
pub fn backward_fd(history: &ObservationHistory, order: usize) -> Result<Option<Vec<f64>>> {
    let coeffs = backward_fd_coefficients(order)?;
    if history.len() < order + 1 {
        return Ok(None);
    }
    let n = history.latest().map(|(_, v)| v.len()).unwrap_or(0);
    let mut out = vec![0.0; n];
    for (lag, c) in coeffs.iter().enumerate() {
        let (_, sample) = history.back(lag).expect("length checked above");
        for (o, s) in out.iter_mut().zip(sample) {
            *o += c * s;
        }
    }
    let inv_dt = 1.0 / history.dt_obs();
    out.iter_mut().for_each(|o| *o *= inv_dt);
    Ok(Some(out))
}

/// Truth system at `lambda_true` and the nudged system at `lambda_proxy`,
/// stepped together as one stacked state `[u; ũ]`.
#[derive(Clone, Debug)]
pub struct CoupledSystem {
    pub truth_model: SystemModel,
    pub nudged_model: SystemModel,
    pub lambda_true: ParameterVector,
    pub lambda_proxy: ParameterVector,
    pub nudge: NudgeConfig,
    pub obs: ObservationOperator,
}

impl CoupledSystem {
    pub fn new(
        truth_model: SystemModel,
        nudged_model: SystemModel,
        lambda_true: ParameterVector,
        lambda_proxy: ParameterVector,
        nudge: NudgeConfig,
        obs: ObservationOperator,
    ) -> Result<Self> {
        let d = truth_model.dim();
        if nudged_model.dim() != d || obs.dim() != d {
            return Err(Error::config("truth, nudged and observation dimensions differ"));
        }
        if lambda_true.len() != truth_model.num_params() || lambda_proxy.len() != nudged_model.num_params() {
            return Err(Error::config("parameter vector length does not match the model"));
        }
        nudge.validate(&obs)?;
        Ok(CoupledSystem {
            truth_model,
            nudged_model,
            lambda_true,
            lambda_proxy,
            nudge,
            obs,
        })
    }

    pub fn dim(&self) -> usize {
        self.truth_model.dim()
    }

    /// Right-hand side of the stacked system; nudging reads the truth half
    /// of the same stage.
    pub fn stacked_rhs(&self, y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim();
        let (u, u_tilde) = y.split_at(d);
        let (du, du_tilde) = out.split_at_mut(d);
        self.truth_model.rhs_into(&self.lambda_true, u, du, scratch);
        self.nudged_model.rhs_into(&self.lambda_proxy, u_tilde, du_tilde, scratch);
        // u is observed through I_h, so M I_h u only reads observed entries
        self.nudge.apply_feedback(&self.obs, u_tilde, u, du_tilde);
    }
}

/// Time, truth state and nudged state of a coupled run.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    pub t: f64,
    pub truth: Vec<f64>,
    pub nudged: Vec<f64>,
}

impl CoupledState {
    pub fn new(t: f64, truth: Vec<f64>, nudged: Vec<f64>) -> Self {
        CoupledState { t, truth, nudged }
    }
}

/// Stepper owning the stacked state buffers.
#[derive(Clone, Debug)]
pub struct CoupledIntegrator {
    cfg: IntegratorConfig,
    ws: Rk4Workspace,
    stacked: Vec<f64>,
    scratch: Vec<f64>,
    dt_adaptive: f64,
    /// Number of fixed steps taken; time is `t0 + steps·dt` to avoid drift.
    steps: u64,
    t0: f64,
    next_obs: f64,
}

impl CoupledIntegrator {
    pub fn new(cfg: IntegratorConfig, dim: usize, t0: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(CoupledIntegrator {
            cfg,
            ws: Rk4Workspace::new(2 * dim),
            stacked: vec![0.0; 2 * dim],
            scratch: vec![0.0; dim],
            dt_adaptive: cfg.dt,
            steps: 0,
            t0,
            next_obs: t0,
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    /// Integrates `state` up to `t_end`, pushing `I_h u` samples into
    /// `history` at uniform spacing (the sample at the start time included
    /// when history is empty).
    pub fn advance(
        &mut self,
        system: &CoupledSystem,
        state: &mut CoupledState,
        t_end: f64,
        history: &mut ObservationHistory,
    ) -> Result<()> {
        if !(t_end > state.t) {
            return Err(Error::config(format!(
                "t_end = {t_end} must exceed the current time {}",
                state.t
            )));
        }
        let d = system.dim();
        if state.truth.len() != d || state.nudged.len() != d {
            return Err(Error::config("coupled state has the wrong dimension"));
        }
        self.stacked[..d].copy_from_slice(&state.truth);
        self.stacked[d..].copy_from_slice(&state.nudged);
        if history.is_empty() {
            history.push(state.t, crate::system::observe(&system.obs, &state.truth))?;
            self.next_obs = state.t + history.dt_obs();
        }

        match self.cfg.scheme {
            Scheme::Rk4 => self.advance_fixed(system, state, t_end, history)?,
            Scheme::Rk45 => self.advance_adaptive(system, state, t_end, history)?,
        }
        state.truth.copy_from_slice(&self.stacked[..d]);
        state.nudged.copy_from_slice(&self.stacked[d..]);
        Ok(())
    }

    fn advance_fixed(
        &mut self,
        system: &CoupledSystem,
        state: &mut CoupledState,
        t_end: f64,
        history: &mut ObservationHistory,
    ) -> Result<()> {
        let dt = self.cfg.dt;
        if self.steps == 0 || (self.t0 + self.steps as f64 * dt - state.t).abs() > 1e-9 * dt {
            self.t0 = state.t;
            self.steps = 0;
        }
        let n_steps = ((t_end - state.t) / dt).round().max(1.0) as u64;
        let obs_every = (history.dt_obs() / dt).round().max(1.0) as u64;
        let d = system.dim();
        let scratch = &mut self.scratch;
        let mut rhs = |_t: f64, y: &[f64], out: &mut [f64]| system.stacked_rhs(y, out, scratch);
        for _ in 0..n_steps {
            rk4_step_in_place(&mut rhs, state.t, &mut self.stacked, dt, &mut self.ws)?;
            self.steps += 1;
            state.t = self.t0 + self.steps as f64 * dt;
            if self.steps % obs_every == 0 {
                history.push(state.t, crate::system::observe(&system.obs, &self.stacked[..d]))?;
            }
        }
        Ok(())
    }

    fn advance_adaptive(
        &mut self,
        system: &CoupledSystem,
        state: &mut CoupledState,
        t_end: f64,
        history: &mut ObservationHistory,
    ) -> Result<()> {
        let d = system.dim();
        let tols = Tolerances {
            rel: self.cfg.rel_tol,
            abs: self.cfg.abs_tol,
        };
        let dt_obs = history.dt_obs();
        let mut interp = vec![0.0; 2 * d];
        let scratch = &mut self.scratch;
        let mut rhs = |_t: f64, y: &[f64], out: &mut [f64]| system.stacked_rhs(y, out, scratch);
        while state.t < t_end - 1e-14 * t_end.abs().max(1.0) {
            let dt_try = self.dt_adaptive.min(t_end - state.t);
            let step = rk45_step(&mut rhs, state.t, &self.stacked, dt_try, tols)?;
            while self.next_obs <= step.t_next + 1e-12 * step.t_next.abs().max(1.0) {
                let s = ((self.next_obs - state.t) / step.dt_used).clamp(0.0, 1.0);
                hermite(
                    &self.stacked,
                    &step.slope_start,
                    &step.state,
                    &step.slope_end,
                    step.dt_used,
                    s,
                    &mut interp,
                );
                history.push(self.next_obs, crate::system::observe(&system.obs, &interp[..d]))?;
                self.next_obs += dt_obs;
            }
            self.stacked.copy_from_slice(&step.state);
            state.t = step.t_next;
            self.dt_adaptive = step.dt_next;
        }
        Ok(())
    }
}

/// Integrates truth and nudged states over `t_span`, returning the final
/// states and the recorded observation history.
#[allow(clippy::too_many_arguments)]
pub fn advance_coupled(
    truth_model: &SystemModel,
    nudged_model: &SystemModel,
    lambda_true: &ParameterVector,
    lambda_proxy: &ParameterVector,
    states: (&StateVector, &StateVector),
    nudge: &NudgeConfig,
    obs: &ObservationOperator,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<(StateVector, StateVector, ObservationHistory)> {
    let system = CoupledSystem::new(
        truth_model.clone(),
        nudged_model.clone(),
        lambda_true.clone(),
        lambda_proxy.clone(),
        nudge.clone(),
        obs.clone(),
    )?;
    let mut state = CoupledState::new(t_span.0, states.0.to_vec(), states.1.to_vec());
    let mut integ = CoupledIntegrator::new(*cfg, system.dim(), t_span.0)?;
    let mut history = ObservationHistory::new(cfg.observation_spacing(), 8)?;
    integ.advance(&system, &mut state, t_span.1, &mut history)?;
    Ok((
        StateVector::new(state.truth)?,
        StateVector::new(state.nudged)?,
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{ElementaryDiagonal, LinearOperatorSet};
    use std::sync::Arc;

    fn exp_rhs(_t: f64, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }

    #[test]
    fn rk4_zero_rhs_keeps_state() {
        let mut rhs = |_t: f64, _y: &[f64], out: &mut [f64]| out.fill(0.0);
        let y = rk4_step(&mut rhs, 0.0, &[1.5, -2.0], 0.3).unwrap();
        assert_eq!(y, vec![1.5, -2.0]);
    }

    #[test]
    fn rk4_exponential() {
        let y = rk4_step(&mut exp_rhs, 0.0, &[1.0], 0.1).unwrap();
        // 1 + h + h²/2 + h³/6 + h⁴/24 at h = 0.1
        assert!((y[0] - 1.105_170_833_333_333_3).abs() < 1e-15);
        assert!((y[0] - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_blowup_reports_time() {
        let mut rhs = |_t: f64, _y: &[f64], out: &mut [f64]| out.fill(f64::NAN);
        assert!(matches!(rk4_step(&mut rhs, 2.5, &[1.0], 0.1), Err(Error::Blowup { t }) if t == 2.5));
    }

    #[test]
    fn rk4_skew_rotation_nearly_conserves_norm() {
        let mut rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = -y[1];
            out[1] = y[0];
        };
        let dt: f64 = 0.01;
        let y = rk4_step(&mut rhs, 0.0, &[1.0, 0.0], dt).unwrap();
        let drift = ((y[0] * y[0] + y[1] * y[1]).sqrt() - 1.0).abs();
        // exact norm factor is sqrt(1 - h^6/72 + h^8/576)
        assert!(drift <= dt.powi(5), "{drift}");
    }

    #[test]
    fn rk4_global_order_four() {
        let solve = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut y = vec![1.0];
            let mut ws = Rk4Workspace::new(1);
            for i in 0..n {
                rk4_step_in_place(&mut exp_rhs, i as f64 * dt, &mut y, dt, &mut ws).unwrap();
            }
            (y[0] - 1f64.exp()).abs()
        };
        let ratio = solve(20) / solve(40);
        assert!((16.0 * 0.7..=16.0 * 1.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk45_zero_rhs_grows_step() {
        let mut rhs = |_t: f64, _y: &[f64], out: &mut [f64]| out.fill(0.0);
        let tol = Tolerances { rel: 1e-9, abs: 1e-11 };
        let step = rk45_step(&mut rhs, 0.0, &[1.0], 0.01, tol).unwrap();
        assert_eq!(step.rejections, 0);
        assert_eq!(step.dt_used, 0.01);
        assert!((step.dt_next - 0.01 * MAX_FACTOR).abs() < 1e-15);
    }

    #[test]
    fn rk45_rejects_stiff_trial_step() {
        let mut rhs = |_t: f64, y: &[f64], out: &mut [f64]| out[0] = -1000.0 * y[0];
        let tol = Tolerances { rel: 1e-6, abs: 1e-9 };
        let step = rk45_step(&mut rhs, 0.0, &[1.0], 0.5, tol).unwrap();
        assert!(step.rejections > 0);
        assert!(step.dt_used < 0.5);
    }

    #[test]
    fn rk45_underflow_is_stiffness_error() {
        let mut rhs = |_t: f64, _y: &[f64], out: &mut [f64]| out[0] = f64::INFINITY;
        let tol = Tolerances { rel: 1e-6, abs: 1e-9 };
        assert!(matches!(rk45_step(&mut rhs, 0.0, &[1.0], 0.1, tol), Err(Error::Blowup { .. })));
        let mut rhs = |t: f64, _y: &[f64], out: &mut [f64]| out[0] = if t > 0.0 { f64::NAN } else { 1.0 };
        assert!(matches!(rk45_step(&mut rhs, 0.0, &[1.0], 0.1, tol), Err(Error::Stiff { .. })));
    }

    #[test]
    fn rk45_exponential_global_error() {
        let tol = Tolerances { rel: 1e-9, abs: 1e-11 };
        let (mut t, mut y, mut dt): (f64, Vec<f64>, f64) = (0.0, vec![1.0], 0.1);
        while t < 1.0 - 1e-15 {
            let s = rk45_step(&mut exp_rhs, t, &y, dt.min(1.0 - t), tol).unwrap();
            t = s.t_next;
            y = s.state;
            dt = s.dt_next;
        }
        assert!((y[0] - 1f64.exp()).abs() < 1e-7);
    }

    fn history_of(f: impl Fn(f64) -> f64, t_end: f64, dt: f64, n: usize) -> ObservationHistory {
        let mut h = ObservationHistory::new(dt, n.max(4)).unwrap();
        for i in (0..n).rev() {
            let t = t_end - i as f64 * dt;
            h.push(t, vec![f(t)]).unwrap();
        }
        h
    }

    #[test]
    fn backward_fd_exact_on_polynomials() {
        let h = history_of(|t| t, 2.0, 0.37, 2);
        assert!((backward_fd(&h, 1).unwrap().unwrap()[0] - 1.0).abs() < 1e-12);
        let h = history_of(|t| t * t, 1.0, 0.1, 3);
        assert!((backward_fd(&h, 2).unwrap().unwrap()[0] - 2.0).abs() < 1e-12);
        let h = history_of(|t| t * t * t, 3.0, 1.0, 4);
        assert!((backward_fd(&h, 3).unwrap().unwrap()[0] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn backward_fd_not_ready_and_bad_order() {
        let h = history_of(|t| t, 1.0, 0.1, 2);
        assert_eq!(backward_fd(&h, 2).unwrap(), None);
        assert!(backward_fd(&h, 4).is_err());
    }

    #[test]
    fn history_rejects_nonuniform_spacing() {
        let mut h = ObservationHistory::new(0.1, 4).unwrap();
        h.push(0.0, vec![0.0]).unwrap();
        assert!(h.push(0.25, vec![0.0]).is_err());
        assert!(h.push(0.0, vec![0.0]).is_err());
        h.push(0.1, vec![0.0]).unwrap();
        assert!(ObservationHistory::new(0.1, 3).is_err());
    }

    #[test]
    fn backward_fd_convergence_orders() {
        for order in 1..=3 {
            let err = |dt: f64| {
                let h = history_of(f64::sin, 1.0, dt, order + 1);
                (backward_fd(&h, order).unwrap().unwrap()[0] - 1f64.cos()).abs()
            };
            let ratio = err(0.02) / err(0.01);
            let nominal = 2f64.powi(order as i32);
            assert!(
                (nominal * 0.7..=nominal * 1.3).contains(&ratio),
                "order {order}: ratio {ratio}"
            );
        }
    }

    fn scalar_coupled(lambda_proxy: f64, mu: f64) -> CoupledSystem {
        let ops = LinearOperatorSet::new(vec![Arc::new(ElementaryDiagonal {
            dim: 1,
            index: 0,
            coeff: -1.0,
        })]);
        let model =
            SystemModel::new(1, ops, Arc::new(|_u: &[f64], out: &mut [f64]| out[0] = 1.0)).unwrap();
        let obs = ObservationOperator::full(1);
        CoupledSystem::new(
            model.clone(),
            model,
            ParameterVector::new(vec![2.0]).unwrap(),
            ParameterVector::new(vec![lambda_proxy]).unwrap(),
            NudgeConfig::uniform(mu, &obs).unwrap(),
            obs,
        )
        .unwrap()
    }

    #[test]
    fn scalar_nudged_steady_state() {
        let sys = scalar_coupled(1.0, 10.0);
        for cfg in [IntegratorConfig::rk4(1e-3), IntegratorConfig::rk45(1e-3, 1e-12, 1e-14)] {
            let (u, ut, hist) = advance_coupled(
                &sys.truth_model,
                &sys.nudged_model,
                &sys.lambda_true,
                &sys.lambda_proxy,
                (&StateVector::new(vec![0.5]).unwrap(), &StateVector::new(vec![0.0]).unwrap()),
                &sys.nudge,
                &sys.obs,
                (0.0, 5.0),
                &cfg,
            )
            .unwrap();
            assert!((u[0] - 0.5).abs() < 1e-12);
            assert!((ut[0] - 6.0 / 11.0).abs() < 1e-10, "{cfg:?}: {}", ut[0]);
            let (t_last, _) = hist.latest().unwrap();
            assert!((t_last - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_twin_stays_identical() {
        let sys = scalar_coupled(2.0, 10.0);
        let mut state = CoupledState::new(0.0, vec![0.1], vec![0.1]);
        let mut integ = CoupledIntegrator::new(IntegratorConfig::rk4(1e-2), 1, 0.0).unwrap();
        let mut hist = ObservationHistory::new(1e-2, 4).unwrap();
        integ.advance(&sys, &mut state, 3.0, &mut hist).unwrap();
        assert_eq!(state.truth, state.nudged);
    }

    #[test]
    fn adaptive_history_is_uniform() {
        let sys = scalar_coupled(1.0, 10.0);
        let mut state = CoupledState::new(0.0, vec![0.2], vec![0.0]);
        let mut cfg = IntegratorConfig::rk45(1e-3, 1e-9, 1e-11);
        cfg.dt_obs = Some(0.01);
        let mut integ = CoupledIntegrator::new(cfg, 1, 0.0).unwrap();
        let mut hist = ObservationHistory::new(0.01, 16).unwrap();
        integ.advance(&sys, &mut state, 1.0, &mut hist).unwrap();
        // truth solves u' = 1 − 2u exactly: u(t) = 1/2 − 0.3 e^{−2t}
        let (t, v) = hist.latest().unwrap();
        assert!((t - 1.0).abs() < 1e-9);
        assert!((v[0] - (0.5 - 0.3 * (-2.0 * t).exp())).abs() < 1e-8);
    }
}
