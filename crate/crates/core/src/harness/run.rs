//! Building experiments from a configuration and executing them.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{ExperimentConfig, Preset};
use super::output::{emit_csv, emit_plot_data, fmt_f64, RunRecord};
use super::twin::{run_twin, OdeTwin, Row, Twin};
use crate::error::{Error, Result};
use crate::estimators::{Algorithm, EstimatorConfig};
use crate::integrate::{rk4_step_in_place, CoupledState, CoupledSystem, IntegratorConfig, Rk4Workspace};
use crate::l96::{self, L96ObservationSpec, ParamSlot};
use crate::rbc::{
    evolve, read_snapshot, spinup, stable_dt, write_snapshot, ImexState, RbcForm, RbcGrid, RbcNudge, RbcParams,
    RbcSolver, RbcTwin, Snapshot,
};
use crate::system::{
    l2_norm, ElementaryDiagonal, LinearOperator, LinearOperatorSet, NudgeConfig, ObservationOperator,
    ParameterVector, SystemModel,
};

/// Largest step used while spinning up convection.
const RBC_SPINUP_DT: f64 = 1e-4;
/// Fraction of the run forming the trailing averaging window.
pub const TRAILING_FRACTION: f64 = 0.2;

/// A ready-to-run twin with its true parameters and extra metadata.
pub struct Experiment {
    pub twin: Box<dyn Twin + Send>,
    pub truth: ParameterVector,
    pub metadata: Vec<(String, String)>,
}

fn knob_usize(cfg: &ExperimentConfig, key: &str) -> Result<usize> {
    let v = cfg.knob(key);
    if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::config(format!("override `{key}` must be a non-negative integer, got {v}")))
    }
}

/// Nudged copy started from the truth with the true parameters.
fn exact_twin(cfg: &ExperimentConfig) -> bool {
    cfg.algorithm.is_none() && cfg.knob("exact_twin") != 0.0
}

pub fn l96_params(cfg: &ExperimentConfig) -> Result<l96::L96Params> {
    let p = l96::params_with_divisor(
        knob_usize(cfg, "n_slow")?,
        knob_usize(cfg, "n_fast")?,
        cfg.knob("forcing"),
        cfg.knob("damping_divisor"),
    );
    p.validate()?;
    Ok(p)
}

fn build_l96(cfg: &ExperimentConfig) -> Result<Experiment> {
    let p = l96_params(cfg)?;
    let obs = L96ObservationSpec::slow_only();
    let slots = cfg.unknowns.iter().map(|s| s.parse()).collect::<Result<Vec<ParamSlot>>>()?;
    let (model, truth) = l96::build_model(&p, &obs, &slots)?;
    let op = obs.operator(&p)?;
    let nudge = NudgeConfig::uniform(cfg.mu, &op)?;
    let truth_state = l96::random_init(&p, cfg.seed).into_inner();
    let (proxy, nudged_state) = if exact_twin(cfg) {
        (truth.clone(), truth_state.clone())
    } else {
        (
            ParameterVector::new(vec![cfg.knob("initial_guess"); slots.len()])?,
            l96::random_init(&p, cfg.seed.wrapping_add(1)).into_inner(),
        )
    };
    let system = CoupledSystem::new(model.clone(), model, truth.clone(), proxy, nudge, op)?;
    let state = CoupledState::new(0.0, truth_state, nudged_state);
    let dt = cfg.dt.ok_or_else(|| Error::config("l96-default needs a fixed dt"))?;
    let twin = OdeTwin::new(system, state, IntegratorConfig::rk4(dt), cfg.unknowns.clone())?;
    Ok(Experiment {
        twin: Box::new(twin),
        truth,
        metadata: vec![("observed".into(), "all slow variables".into())],
    })
}

/// `du/dt = −λu + 1` observed fully; both systems start at their steady
/// states `1/λ` and `(1 + μ/λ)/(λ̃ + μ)`.
pub fn scalar_model() -> Result<SystemModel> {
    let op: Arc<dyn LinearOperator> = Arc::new(ElementaryDiagonal {
        dim: 1,
        index: 0,
        coeff: -1.0,
    });
    SystemModel::new(1, LinearOperatorSet::new(vec![op]), Arc::new(|_u: &[f64], out: &mut [f64]| out[0] = 1.0))
}

fn build_scalar(cfg: &ExperimentConfig) -> Result<Experiment> {
    let lam = cfg.knob("lambda_true");
    let guess = if exact_twin(cfg) { lam } else { cfg.knob("initial_guess") };
    if !(lam > 0.0) || !(guess + cfg.mu > 0.0) {
        return Err(Error::config("scalar-toy needs lambda_true > 0 and initial_guess + mu > 0"));
    }
    let model = scalar_model()?;
    let obs = ObservationOperator::full(1);
    let nudge = NudgeConfig::uniform(cfg.mu, &obs)?;
    let u_star = 1.0 / lam;
    let u_tilde = (1.0 + cfg.mu * u_star) / (guess + cfg.mu);
    let truth = ParameterVector::new(vec![lam])?;
    let system = CoupledSystem::new(model.clone(), model, truth.clone(), ParameterVector::new(vec![guess])?, nudge, obs)?;
    let state = CoupledState::new(0.0, vec![u_star], vec![u_tilde]);
    let dt = cfg.dt.ok_or_else(|| Error::config("scalar-toy needs a fixed dt"))?;
    let twin = OdeTwin::new(system, state, IntegratorConfig::rk4(dt), cfg.unknowns.clone())?;
    Ok(Experiment {
        twin: Box::new(twin),
        truth,
        metadata: Vec::new(),
    })
}

pub fn rbc_form(algorithm: Option<Algorithm>) -> RbcForm {
    match algorithm {
        Some(Algorithm::Rls) => RbcForm::PrOutside,
        _ => RbcForm::PrSplit,
    }
}

pub fn rbc_grid(cfg: &ExperimentConfig) -> Result<RbcGrid> {
    RbcGrid::new(knob_usize(cfg, "nx")?, knob_usize(cfg, "nz")?, 4.0, 1.0)
}

/// The convective initial state: the configured snapshot or a fresh spin-up.
pub fn rbc_initial_state(cfg: &ExperimentConfig, params: &RbcParams, grid: &RbcGrid) -> Result<Snapshot> {
    match &cfg.initial_state {
        Some(path) => {
            let snap = read_snapshot(path)?;
            if snap.grid != *grid {
                return Err(Error::config(format!(
                    "snapshot {} is on a {}×{} grid, configuration asks for {}×{}",
                    path.display(),
                    snap.grid.nx,
                    snap.grid.nz,
                    grid.nx,
                    grid.nz
                )));
            }
            Ok(snap)
        }
        None => {
            let t = cfg.knob("spinup_time");
            Ok(Snapshot {
                grid: grid.clone(),
                t,
                params: *params,
                fields: spinup(params, grid, t, cfg.seed, RBC_SPINUP_DT)?,
            })
        }
    }
}

fn build_rbc(cfg: &ExperimentConfig) -> Result<Experiment> {
    let form = rbc_form(cfg.algorithm);
    let params = RbcParams::new(cfg.knob("ra"), cfg.knob("pr"), form)?;
    let grid = rbc_grid(cfg)?;
    let snap = rbc_initial_state(cfg, &params, &grid)?;
    let n_obs = knob_usize(cfg, "n_obs")?;
    let nudge = RbcNudge::new(cfg.mu1, cfg.mu2, n_obs)?;
    let step_unit = cfg.update_interval.min(cfg.record_interval);
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => stable_dt(&mut RbcSolver::new(grid.clone()), &snap.fields, cfg.knob("cfl"), step_unit)?,
    };
    let truth = ParameterVector::new(vec![params.ra, params.pr])?;
    let (nudged, guess) = if exact_twin(cfg) {
        (snap.fields.clone(), truth.clone())
    } else {
        (
            snap.fields.project(&grid, knob_usize(cfg, "init_modes")?),
            ParameterVector::new(vec![cfg.knob("ra_guess"), cfg.knob("pr_guess")])?,
        )
    };
    let twin = RbcTwin::new(grid, params, snap.fields.clone(), nudged, guess, nudge, dt)?;
    let metadata = vec![
        ("form".into(), form.name().to_string()),
        (
            "boundary_conditions".into(),
            "free-slip walls with fixed temperature (Fourier x sine basis), not the no-slip Chebyshev setup".into(),
        ),
        ("dt_used".into(), fmt_f64(dt)),
        ("mu1_used".into(), fmt_f64(twin.nudge.mu1)),
        ("mu2_used".into(), fmt_f64(twin.nudge.mu2)),
    ];
    Ok(Experiment {
        twin: Box::new(twin),
        truth,
        metadata,
    })
}

pub fn build(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    match cfg.preset {
        Preset::L96Default => build_l96(cfg),
        Preset::RbcDefault => build_rbc(cfg),
        Preset::ScalarToy => build_scalar(cfg),
    }
}

fn base_metadata(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let mut m = vec![("relaxest_version".to_string(), env!("CARGO_PKG_VERSION").to_string())];
    m.extend(cfg.echo());
    m
}

fn estimator_config(cfg: &ExperimentConfig) -> Option<EstimatorConfig> {
    cfg.algorithm.map(|a| {
        let mut e = EstimatorConfig::new(a, cfg.update_interval);
        e.fd_order = cfg.fd_order;
        e.cond_threshold = cfg.knob("cond_threshold");
        e
    })
}

/// A finished or aborted run: the record always holds the rows computed,
/// `error` the failure that stopped it.
pub struct RunOutcome {
    pub record: RunRecord,
    pub error: Option<Error>,
}

/// Runs an experiment in memory. Configuration errors are returned
/// directly; numerical failures end the run and are kept in the outcome.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut exp = build(cfg)?;
    let truth = cfg.test_mode.then(|| exp.truth.clone());
    let res = run_twin(exp.twin.as_mut(), estimator_config(cfg), cfg.t_final, cfg.record_interval, truth.as_ref())?;
    let mut metadata = base_metadata(cfg);
    metadata.extend(exp.metadata);
    metadata.push(("updates".into(), res.updates.to_string()));
    metadata.push(("skips".into(), res.skips.to_string()));
    let record = RunRecord {
        metadata,
        param_names: exp.twin.param_names(),
        truth: truth.map(|t| t.into_inner()),
        rows: res.rows,
        failure: res.failure.as_ref().map(|e| e.to_string()),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        record,
        error: res.failure,
    })
}

/// Writes `run.csv` and `plot.csv` into `dir`.
pub fn write_record(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    emit_csv(record, &dir.join("run.csv"))?;
    emit_plot_data(record, &dir.join("plot.csv"))
}

/// Truth-only integration recording `‖u(t)‖`; convection also leaves a
/// snapshot of the final state in `state.bin`.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let n = (cfg.t_final / cfg.record_interval).round() as usize;
    let times: Vec<f64> = (1..=n).map(|k| k as f64 * cfg.record_interval).collect();
    let mut out = Vec::with_capacity(n + 1);
    match cfg.preset {
        Preset::RbcDefault => {
            let params = RbcParams::new(cfg.knob("ra"), cfg.knob("pr"), rbc_form(cfg.algorithm))?;
            let grid = rbc_grid(cfg)?;
            let mut solver = RbcSolver::new(grid.clone());
            let init = match &cfg.initial_state {
                Some(_) => rbc_initial_state(cfg, &params, &grid)?.fields,
                None => crate::rbc::seeded_perturbation(&grid, cfg.seed, 1e-2),
            };
            let mut state = ImexState::new(0.0, init);
            out.push((0.0, state.fields.norm(&grid)));
            let dt_max = cfg.dt.unwrap_or(RBC_SPINUP_DT);
            for &t in &times {
                evolve(&mut solver, &params.coefficients(), &mut state, t, dt_max)?;
                out.push((t, state.fields.norm(&grid)));
            }
            let snap = Snapshot {
                grid,
                t: state.t,
                params,
                fields: state.fields,
            };
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            write_snapshot(&cfg.output_dir.join("state.bin"), &snap)?;
        }
        Preset::L96Default | Preset::ScalarToy => {
            let dt = cfg.dt.ok_or_else(|| Error::config("ODE presets need a fixed dt"))?;
            let (mut u, mut rhs): (Vec<f64>, Box<dyn FnMut(f64, &[f64], &mut [f64])>) = match cfg.preset {
                Preset::L96Default => {
                    let p = l96_params(cfg)?;
                    let u = l96::random_init(&p, cfg.seed).into_inner();
                    (
                        u,
                        Box::new(move |_t, y, dy| match l96::rhs(&p, y) {
                            Ok(v) => dy.copy_from_slice(&v),
                            Err(_) => dy.fill(f64::NAN),
                        }),
                    )
                }
                _ => {
                    let lam = cfg.knob("lambda_true");
                    (vec![0.0], Box::new(move |_t, y, dy| dy[0] = 1.0 - lam * y[0]))
                }
            };
            let per_record = (cfg.record_interval / dt).round();
            let mut ws = Rk4Workspace::new(u.len());
            let mut step = 0u64;
            out.push((0.0, l2_norm(&u)));
            for &t_rec in &times {
                for _ in 0..per_record as u64 {
                    rk4_step_in_place(&mut rhs, step as f64 * dt, &mut u, dt, &mut ws)?;
                    step += 1;
                }
                out.push((t_rec, l2_norm(&u)));
            }
        }
    }
    Ok(out)
}

/// Summary of one sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub index: usize,
    pub values: Vec<String>,
    pub status: String,
    pub final_row: Option<Row>,
    /// Mean relative state and parameter errors over the trailing window.
    pub trailing_state_error: Option<f64>,
    pub trailing_param_error: Option<f64>,
}

fn trailing_mean(rows: &[Row], t0: f64, f: impl Fn(&Row) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter(|r| r.t >= t0 - 1e-12).filter_map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Every combination of the axes, in row-major order (last axis fastest).
pub fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, (_, vals)| {
        acc.iter()
            .flat_map(|prefix| {
                vals.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

/// Runs every cell of the product of `axes` in parallel. Each cell writes
/// its record under `cell_NNN`; failures are recorded and do not stop the
/// sweep. Cells come back in index order.
pub fn sweep(template: &ExperimentConfig, axes: &[(String, Vec<String>)], write: bool) -> Result<Vec<SweepCell>> {
    if axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::config("sweep axes must be non-empty"));
    }
    let combos = cartesian(axes);
    let mut cfgs = Vec::with_capacity(combos.len());
    for (i, combo) in combos.iter().enumerate() {
        let mut cfg = template.clone();
        for ((key, _), v) in axes.iter().zip(combo) {
            cfg.set_field(key, v)?;
        }
        cfg.output_dir = template.output_dir.join(format!("cell_{i:03}"));
        cfg.validate()?;
        cfgs.push(cfg);
    }
    let cells = cfgs
        .par_iter()
        .enumerate()
        .map(|(index, cfg)| {
            let values = combos[index].clone();
            let outcome = run(cfg).and_then(|o| {
                if write {
                    write_record(&o.record, &cfg.output_dir)?;
                }
                Ok(o)
            });
            match outcome {
                Ok(o) => {
                    let t0 = (1.0 - TRAILING_FRACTION) * cfg.t_final;
                    SweepCell {
                        index,
                        values,
                        status: o.error.map_or("ok".to_string(), |e| format!("failed: {e}")),
                        final_row: o.record.rows.last().cloned(),
                        trailing_state_error: trailing_mean(&o.record.rows, t0, |r| Some(r.state_error_rel)),
                        trailing_param_error: trailing_mean(&o.record.rows, t0, |r| r.param_error_rel),
                    }
                }
                Err(e) => SweepCell {
                    index,
                    values,
                    status: format!("failed: {e}"),
                    final_row: None,
                    trailing_state_error: None,
                    trailing_param_error: None,
                },
            }
        })
        .collect();
    Ok(cells)
}

/// Summary CSV of a sweep, one line per cell in index order.
pub fn sweep_summary(axes: &[(String, Vec<String>)], cells: &[SweepCell]) -> String {
    let mut head = vec!["cell".to_string()];
    head.extend(axes.iter().map(|(k, _)| k.clone()));
    head.extend(
        [
            "t_final",
            "state_error_rel",
            "param_error_rel",
            "trailing_state_error_rel",
            "trailing_param_error_rel",
            "status",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let mut s = head.join(",") + "\n";
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    for c in cells {
        let mut cells_out = vec![c.index.to_string()];
        cells_out.extend(c.values.iter().cloned());
        cells_out.push(opt(c.final_row.as_ref().map(|r| r.t)));
        cells_out.push(opt(c.final_row.as_ref().map(|r| r.state_error_rel)));
        cells_out.push(opt(c.final_row.as_ref().and_then(|r| r.param_error_rel)));
        cells_out.push(opt(c.trailing_state_error));
        cells_out.push(opt(c.trailing_param_error));
        cells_out.push(c.status.replace(',', ";"));
        s += &(cells_out.join(",") + "\n");
    }
    s
}
