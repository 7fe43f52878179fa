//! Twin experiments: a truth run observed through `I_h` drives a nudged copy
//! whose parameters are updated on a schedule.

use crate::error::{Error, Result};
use crate::estimators::{
    rls_assemble, rls_solve, rni_plus_update, rni_update, Algorithm, Degeneracy, EstimatorConfig, EstimatorState,
    ScheduleEvent, UpdateOutcome,
};
use crate::integrate::{backward_fd, CoupledIntegrator, CoupledState, CoupledSystem, IntegratorConfig, ObservationHistory};
use crate::system::{l2_diff, l2_norm, observe, ParameterVector};

/// A coupled truth/nudged pair that can be stepped and asked for updates.
pub trait Twin {
    fn time(&self) -> f64;
    fn advance_to(&mut self, t: f64) -> Result<()>;
    /// `(‖ũ − u‖, ‖ũ − u‖/‖u‖, ‖I_h(ũ − u)‖)`.
    fn errors(&self) -> (f64, f64, f64);
    fn mu_min(&self) -> f64;
    fn lambda(&self) -> &ParameterVector;
    fn set_lambda(&mut self, lambda: ParameterVector);
    fn propose(&mut self, cfg: &EstimatorConfig, lambda: &ParameterVector) -> Result<UpdateOutcome>;
    fn param_names(&self) -> Vec<String>;
}

/// Generic ODE twin integrated with the coupled RK integrator.
pub struct OdeTwin {
    pub system: CoupledSystem,
    pub state: CoupledState,
    integ: CoupledIntegrator,
    history: ObservationHistory,
    names: Vec<String>,
}

impl OdeTwin {
    pub fn new(system: CoupledSystem, state: CoupledState, cfg: IntegratorConfig, names: Vec<String>) -> Result<Self> {
        if names.len() != system.lambda_proxy.len() {
            return Err(Error::config("one name per parameter is required"));
        }
        let integ = CoupledIntegrator::new(cfg, system.dim(), state.t)?;
        let history = ObservationHistory::new(cfg.observation_spacing(), 8)?;
        Ok(OdeTwin {
            system,
            state,
            integ,
            history,
            names,
        })
    }
}

impl Twin for OdeTwin {
    fn time(&self) -> f64 {
        self.state.t
    }

    fn advance_to(&mut self, t: f64) -> Result<()> {
        self.integ.advance(&self.system, &mut self.state, t, &mut self.history)
    }

    fn errors(&self) -> (f64, f64, f64) {
        let abs = l2_diff(&self.state.nudged, &self.state.truth);
        let rel = abs / l2_norm(&self.state.truth);
        let w: Vec<f64> = self.state.nudged.iter().zip(&self.state.truth).map(|(a, b)| a - b).collect();
        (abs, rel, l2_norm(&observe(&self.system.obs, &w)))
    }

    fn mu_min(&self) -> f64 {
        self.system.nudge.mu_min(&self.system.obs)
    }

    fn lambda(&self) -> &ParameterVector {
        &self.system.lambda_proxy
    }

    fn set_lambda(&mut self, lambda: ParameterVector) {
        self.system.lambda_proxy = lambda;
    }

    fn propose(&mut self, cfg: &EstimatorConfig, lambda: &ParameterVector) -> Result<UpdateOutcome> {
        let sys = &self.system;
        let truth_obs = observe(&sys.obs, &self.state.truth);
        match cfg.algorithm {
            Algorithm::Rni => {
                let w: Vec<f64> = self.state.nudged.iter().zip(&truth_obs).map(|(a, b)| a - b).collect();
                rni_update(&sys.nudged_model, &sys.obs, &sys.nudge, &self.state.nudged, &w, lambda)
            }
            Algorithm::RniPlus => {
                rni_plus_update(&sys.nudged_model, &sys.obs, &sys.nudge, &self.state.nudged, &truth_obs, lambda)
            }
            Algorithm::Rls => match backward_fd(&self.history, cfg.fd_order)? {
                None => Ok(UpdateOutcome::Deferred(Degeneracy::NotReady)),
                Some(dobs) => {
                    let normal = rls_assemble(&sys.nudged_model, &sys.obs, &self.state.nudged, &dobs)?;
                    rls_solve(&normal, cfg.cond_threshold)
                }
            },
        }
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }
}

/// One recorded sample of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub t: f64,
    pub state_error_l2: f64,
    pub state_error_rel: f64,
    pub observed_error: f64,
    /// Present only when the true parameters are supplied.
    pub param_error_rel: Option<f64>,
    pub params: Vec<f64>,
    pub delta_hat: Option<f64>,
    pub cond: Option<f64>,
    /// `update`, `skip:<reason>` or empty.
    pub event: String,
}

/// Rows of a run plus the error that stopped it early, if any.
#[derive(Debug)]
pub struct TwinRun {
    pub rows: Vec<Row>,
    pub failure: Option<Error>,
    pub skips: usize,
    pub updates: usize,
}

/// Steps `twin` to `t_final`, recording a row every `record_interval` and
/// offering an update whenever the estimator is due. A numerical failure
/// ends the run with the rows recorded so far.
pub fn run_twin(
    twin: &mut dyn Twin,
    estimator: Option<EstimatorConfig>,
    t_final: f64,
    record_interval: f64,
    lambda_true: Option<&ParameterVector>,
) -> Result<TwinRun> {
    if !(record_interval > 0.0) || !(t_final > twin.time()) {
        return Err(Error::config("record interval and final time must be positive"));
    }
    let t0 = twin.time();
    let mut est = match estimator {
        Some(cfg) => Some(EstimatorState::new(cfg, twin.lambda().clone(), t0)?),
        None => None,
    };
    let param_err = |lam: &ParameterVector| lambda_true.map(|truth| lam.relative_error(truth));

    let mut rows = Vec::new();
    let mut skips = 0;
    let mut updates = 0;
    let mut prev_param_err = param_err(twin.lambda());
    let record = |twin: &dyn Twin, event: String, delta_hat, cond| {
        let (l2, rel, obs) = twin.errors();
        Row {
            t: twin.time(),
            state_error_l2: l2,
            state_error_rel: rel,
            observed_error: obs,
            param_error_rel: param_err(twin.lambda()),
            params: twin.lambda().to_vec(),
            delta_hat,
            cond,
            event,
        }
    };
    rows.push(record(&*twin, String::new(), None, None));

    let mut n_record = 1u64;
    let tol = 1e-9 * record_interval;
    loop {
        let next_record = t0 + n_record as f64 * record_interval;
        let next = match &est {
            Some(e) => next_record.min(e.next_update),
            None => next_record,
        };
        if next > t_final + tol {
            break;
        }
        if let Err(e) = twin.advance_to(next) {
            return Ok(TwinRun {
                rows,
                failure: Some(e),
                skips,
                updates,
            });
        }
        let mut event = String::new();
        let mut delta_hat = None;
        let mut cond = None;
        if let Some(e) = est.as_mut() {
            let (_, _, obs_err) = twin.errors();
            let mu = twin.mu_min();
            let cfg = e.config.clone();
            let t = twin.time();
            let outcome = e.schedule_and_apply(t, obs_err, mu, |lam| twin.propose(&cfg, lam));
            match outcome {
                Ok(ScheduleEvent::NotDue) => {}
                Ok(ScheduleEvent::Updated) => {
                    updates += 1;
                    let entry = e.history.last().expect("update recorded");
                    twin.set_lambda(entry.lambda.clone());
                    cond = Some(entry.cond);
                    let err = param_err(twin.lambda());
                    if let (Some(before), Some(after)) = (prev_param_err, err) {
                        if before > 0.0 {
                            delta_hat = Some(1.0 - after / before);
                        }
                    }
                    prev_param_err = err;
                    event = "update".into();
                }
                Ok(ScheduleEvent::Skipped(reason)) => {
                    skips += 1;
                    event = format!("skip:{reason}");
                }
                Err(err) => {
                    rows.push(record(&*twin, "abort".into(), None, None));
                    return Ok(TwinRun {
                        rows,
                        failure: Some(err),
                        skips,
                        updates,
                    });
                }
            }
        }
        if (twin.time() - next_record).abs() <= tol {
            n_record += 1;
            rows.push(record(&*twin, event, delta_hat, cond));
        } else if !event.is_empty() {
            rows.push(record(&*twin, event, delta_hat, cond));
        }
    }
    Ok(TwinRun {
        rows,
        failure: None,
        skips,
        updates,
    })
}
