//! Truth and nudged convection runs stepped in lockstep.

use super::estimate::{rls_pr_ra_update, rni_plus_ra_pr_update, rni_ra_pr_update};
use super::grid::{RbcGrid, C64};
use super::solver::{imex_step, ImexState, RbcFields, RbcForm, RbcNudge, RbcParams, RbcSolver, CFL_LIMIT, NUDGE_STABILITY_CAP};
use crate::error::{Error, Result};
use crate::estimators::{Algorithm, Degeneracy, EstimatorConfig, UpdateOutcome};
use crate::harness::Twin;
use crate::integrate::{backward_fd, ObservationHistory};
use crate::system::ParameterVector;

/// Largest step keeping the advective CFL number at `target` for `fields`,
/// shortened so that `interval` is a whole number of steps.
pub fn stable_dt(solver: &mut RbcSolver, fields: &RbcFields, target: f64, interval: f64) -> Result<f64> {
    if !(target > 0.0 && target <= CFL_LIMIT && interval > 0.0) {
        return Err(Error::config("CFL target must lie in (0, 0.5] and the interval be positive"));
    }
    let (_, _, max_u, max_w) = solver.advection(fields);
    let rate = solver.cfl_number(max_u, max_w, 1.0);
    let dt = if rate > 0.0 { target / rate } else { interval };
    let steps = (interval / dt).ceil().max(1.0);
    Ok(interval / steps)
}

/// Convection twin experiment with parameters `λ = (Ra, Pr)`.
pub struct RbcTwin {
    solver: RbcSolver,
    pub truth: ImexState,
    pub nudged: ImexState,
    truth_params: RbcParams,
    lambda: ParameterVector,
    /// Gains after capping by the step size.
    pub nudge: RbcNudge,
    pub dt: f64,
    steps: u64,
    modes: Vec<usize>,
    history: ObservationHistory,
}

impl RbcTwin {
    /// Both systems start at `t = 0`; the nudged system uses the form of
    /// `truth_params` with `(Ra, Pr) = lambda0`.
    pub fn new(
        grid: RbcGrid,
        truth_params: RbcParams,
        truth: RbcFields,
        nudged: RbcFields,
        lambda0: ParameterVector,
        nudge: RbcNudge,
        dt: f64,
    ) -> Result<Self> {
        if lambda0.len() != 2 {
            return Err(Error::config("Rayleigh–Bénard twins estimate λ = (Ra, Pr)"));
        }
        if !(dt > 0.0) {
            return Err(Error::config("time step must be positive"));
        }
        let modes = grid.observed_modes(nudge.n_obs);
        let mut twin = RbcTwin {
            solver: RbcSolver::new(grid),
            truth: ImexState::new(0.0, truth),
            nudged: ImexState::new(0.0, nudged),
            truth_params,
            lambda: lambda0,
            nudge: nudge.capped(dt, NUDGE_STABILITY_CAP),
            dt,
            steps: 0,
            modes,
            history: ObservationHistory::new(dt, 4)?,
        };
        twin.record_observation()?;
        Ok(twin)
    }

    pub fn grid(&self) -> &RbcGrid {
        &self.solver.grid
    }

    fn observed_truth(&self) -> RbcFields {
        self.truth.fields.project(&self.solver.grid, self.nudge.n_obs)
    }

    fn record_observation(&mut self) -> Result<()> {
        let z = &self.truth.fields.zeta;
        let flat = self.modes.iter().flat_map(|&s| [z[s].re, z[s].im]).collect();
        self.history.push(self.time(), flat)
    }

    fn nudged_params(&self) -> RbcParams {
        RbcParams {
            ra: self.lambda[0],
            pr: self.lambda[1],
            form: self.truth_params.form,
        }
    }

    fn step(&mut self) -> Result<()> {
        let obs = self.observed_truth();
        let tc = self.truth_params.coefficients();
        let nc = self.nudged_params().coefficients();
        imex_step(&mut self.solver, &tc, &mut self.truth, self.dt, None)?;
        imex_step(&mut self.solver, &nc, &mut self.nudged, self.dt, Some((&self.nudge, &obs)))?;
        self.steps += 1;
        self.truth.t = self.time();
        self.nudged.t = self.truth.t;
        self.record_observation()
    }
}

impl Twin for RbcTwin {
    fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    fn advance_to(&mut self, t: f64) -> Result<()> {
        let target = (t / self.dt).round();
        if target < 0.0 || (t / self.dt - target).abs() > 1e-6 {
            return Err(Error::config(format!("t = {t} is not on the step grid of dt = {}", self.dt)));
        }
        while (self.steps as f64) < target {
            self.step()?;
        }
        Ok(())
    }

    fn errors(&self) -> (f64, f64, f64) {
        let g = &self.solver.grid;
        let d = self.nudged.fields.diff(&self.truth.fields);
        let abs = d.norm(g);
        let rel = abs / self.truth.fields.norm(g);
        (abs, rel, d.project(g, self.nudge.n_obs).norm(g))
    }

    fn mu_min(&self) -> f64 {
        if self.nudge.mu2 > 0.0 {
            self.nudge.mu1.min(self.nudge.mu2)
        } else {
            self.nudge.mu1
        }
    }

    fn lambda(&self) -> &ParameterVector {
        &self.lambda
    }

    fn set_lambda(&mut self, lambda: ParameterVector) {
        self.lambda = lambda;
    }

    fn propose(&mut self, cfg: &EstimatorConfig, lambda: &ParameterVector) -> Result<UpdateOutcome> {
        let form = self.truth_params.form;
        let expected = if cfg.algorithm == Algorithm::Rls { RbcForm::PrOutside } else { RbcForm::PrSplit };
        if form != expected {
            return Err(Error::config(format!(
                "{} updates need the {} form, twin uses {}",
                cfg.algorithm.name(),
                expected.name(),
                form.name()
            )));
        }
        let obs = self.observed_truth();
        let nudged = self.nudged.fields.clone();
        match cfg.algorithm {
            Algorithm::Rni => rni_ra_pr_update(&mut self.solver, &obs, &nudged, lambda, &self.nudge),
            Algorithm::RniPlus => rni_plus_ra_pr_update(&mut self.solver, &obs, &nudged, lambda, &self.nudge),
            Algorithm::Rls => match backward_fd(&self.history, cfg.fd_order)? {
                None => Ok(UpdateOutcome::Deferred(Degeneracy::NotReady)),
                Some(flat) => {
                    let mut dz = self.solver.grid.zeros();
                    for (k, &s) in self.modes.iter().enumerate() {
                        dz[s] = C64::new(flat[2 * k], flat[2 * k + 1]);
                    }
                    rls_pr_ra_update(&mut self.solver, &nudged, &dz, &self.nudge, cfg.cond_threshold)
                }
            },
        }
    }

    fn param_names(&self) -> Vec<String> {
        vec!["Ra".into(), "Pr".into()]
    }
}
