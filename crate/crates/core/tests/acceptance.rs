//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints its verdict; exits non-zero if any check fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relaxest::estimators::{rls_solve, Algorithm, RlsNormalSystem, UpdateOutcome};
use relaxest::harness::run::{rbc_grid, rbc_initial_state};
use relaxest::harness::{csv_string, run, sweep, ExperimentConfig, OdeTwin, Preset, Row, RunRecord, Twin};
use relaxest::integrate::{
    backward_fd, rk4_step_in_place, CoupledState, CoupledSystem, IntegratorConfig, ObservationHistory, Rk4Workspace,
};
use relaxest::l96::{
    self, bounds, build_model, default_params, energy_residual, first_slow_slots, random_init, L96ObservationSpec,
};
use relaxest::rbc::{write_snapshot, RbcForm, RbcParams};
use relaxest::system::{l2_norm, NudgeConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn estimate(cfg: &ExperimentConfig) -> RunRecord {
    let out = run(cfg).expect("configuration is valid");
    out.record
}

fn l96_cfg(alg: Option<Algorithm>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::L96Default);
    cfg.algorithm = alg;
    cfg.test_mode = true;
    cfg
}

fn l96_fast_synchronization() -> Verdict {
    let start = Instant::now();
    let p = default_params();
    let obs = L96ObservationSpec::slow_only();
    let (model, truth) = build_model(&p, &obs, &first_slow_slots(1)).unwrap();
    let op = obs.operator(&p).unwrap();
    let nudge = NudgeConfig::uniform(50.0, &op).unwrap();
    let system = CoupledSystem::new(model.clone(), model, truth.clone(), truth, nudge, op).unwrap();
    let state = CoupledState::new(0.0, random_init(&p, 1).into_inner(), random_init(&p, 2).into_inner());
    let mut twin = OdeTwin::new(system, state, IntegratorConfig::rk4(1e-3), vec!["d_0".into()]).unwrap();
    let fast = p.n_slow..p.dim();
    let fast_error = |tw: &OdeTwin| {
        let s = &tw.state;
        let num: f64 = fast.clone().map(|i| (s.nudged[i] - s.truth[i]).powi(2)).sum();
        let den: f64 = fast.clone().map(|i| s.truth[i].powi(2)).sum();
        (num / den).sqrt()
    };
    let mut first_below = None;
    let mut err = f64::NAN;
    for n in 1..=200 {
        twin.advance_to(n as f64 * 0.1).unwrap();
        err = fast_error(&twin);
        if err < 1e-8 && first_below.is_none() {
            first_below = Some(twin.time());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        first_below.is_some() && elapsed < 60.0,
        format!(
            "unobserved fast relative error at t=20 is {err:.3e} (target < 1e-8{}); runtime {elapsed:.1} s",
            first_below.map_or(String::new(), |t| format!(", first reached at t={t:.1}"))
        ),
    )
}

fn l96_rni_recovery() -> Verdict {
    let start = Instant::now();
    let rec = estimate(&l96_cfg(Some(Algorithm::Rni)));
    let elapsed = start.elapsed().as_secs_f64();
    let last = rec.last().unwrap();
    let perr = last.param_error_rel.unwrap();
    let deltas: Vec<(f64, f64)> = rec.rows.iter().filter_map(|r| r.delta_hat.map(|d| (r.t, d))).collect();
    let nonpositive: Vec<f64> = deltas.iter().filter(|&&(_, d)| d <= 0.0).map(|&(t, _)| t).collect();
    verdict(
        rec.failure.is_none() && perr <= 1e-10 && elapsed < 300.0,
        format!(
            "final relative parameter error at t={} is {perr:.3e} (target <= 1e-10); \
             contraction estimate nonpositive at {} of {} updates{}; runtime {elapsed:.1} s",
            last.t,
            nonpositive.len(),
            deltas.len(),
            nonpositive.last().map_or(String::new(), |t| format!(", last at t={t:.1}"))
        ),
    )
}

/// Geometric mean of the parameter error over `t >= t0`.
fn plateau(rows: &[Row], t0: f64) -> f64 {
    let logs: Vec<f64> = rows
        .iter()
        .filter(|r| r.t >= t0 - 1e-9)
        .map(|r| r.param_error_rel.unwrap().max(1e-300).ln())
        .collect();
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn l96_rls_plateau() -> Verdict {
    let level = |dt: f64| {
        let mut cfg = l96_cfg(Some(Algorithm::Rls));
        cfg.fd_order = 3;
        cfg.dt = Some(dt);
        cfg.t_final = 120.0;
        let rec = estimate(&cfg);
        assert!(rec.failure.is_none(), "{:?}", rec.failure);
        plateau(&rec.rows, 100.0)
    };
    let coarse = level(1e-3);
    let fine = level(5e-4);
    let ratio = coarse / fine;
    verdict(
        coarse <= 1e-6 && (4.0..=16.0).contains(&ratio),
        format!(
            "plateau over t in [100, 120]: {coarse:.3e} at dt=1e-3 (target <= 1e-6), {fine:.3e} at dt=5e-4; \
             ratio {ratio:.2} (target in [4, 16])"
        ),
    )
}

fn scalar_iterates(alg: Algorithm) -> (Vec<f64>, Option<String>) {
    let mut cfg = ExperimentConfig::preset(Preset::ScalarToy);
    cfg.algorithm = Some(alg);
    cfg.test_mode = true;
    let rec = estimate(&cfg);
    let iterates = rec.rows.iter().filter(|r| r.event == "update").map(|r| r.params[0]).collect();
    (iterates, rec.failure)
}

fn scalar_toy() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for alg in [Algorithm::Rni, Algorithm::Rls] {
        let (it, failure) = scalar_iterates(alg);
        let first = it.first().copied().unwrap_or(f64::NAN);
        let errs: Vec<f64> = it.iter().map(|l| (l - 2.0).abs()).collect();
        let within = errs.iter().take(30).position(|&e| e <= 1e-10);
        let reached = within.map_or(errs.len(), |i| i + 1);
        let monotone = errs[..reached].windows(2).all(|w| w[1] <= w[0]);
        let stays = errs[reached.min(errs.len())..].iter().all(|&e| e <= 1e-10);
        let ok =
            failure.is_none() && (first - 11.0 / 6.0).abs() <= 1e-9 && monotone && stays && within.is_some();
        pass &= ok;
        parts.push(format!(
            "{alg}: first iterate {first:.16} (|diff from 11/6| = {:.1e}), monotone {monotone}, \
             within 1e-10 after {} updates and {} there, final error {:.1e}",
            (first - 11.0 / 6.0).abs(),
            within.map_or("more than 30".to_string(), |i| (i + 1).to_string()),
            if stays { "stays" } else { "does not stay" },
            errs.last().copied().unwrap_or(f64::NAN)
        ));
    }
    verdict(pass, parts.join("; "))
}

fn rls_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, cols) = (10, 3);
    let mut worst = 0.0f64;
    let mut flagged = 0;
    for _ in 0..100 {
        let l: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sys = RlsNormalSystem::from_dense(rows, cols, l.clone(), f.clone()).unwrap();
        let x = match rls_solve(&sys, 1e8).unwrap() {
            UpdateOutcome::Accepted(p) => p.lambda.into_inner(),
            UpdateOutcome::Deferred(d) => panic!("well-posed system deferred: {d}"),
        };
        let a = DMatrix::from_row_slice(rows, cols, &l);
        let pinv = a.pseudo_inverse(1e-14).unwrap();
        let oracle = pinv * nalgebra::DVector::from_vec(f);
        let diff: f64 = x.iter().zip(oracle.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / oracle.norm());

        let mut dup = l;
        for r in 0..rows {
            dup[r * cols + 2] = dup[r * cols];
        }
        let f2: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sys = RlsNormalSystem::from_dense(rows, cols, dup, f2).unwrap();
        if rls_solve(&sys, 1e8).unwrap().is_deferred() {
            flagged += 1;
        }
    }
    verdict(
        worst <= 1e-10 && flagged == 100,
        format!("worst relative difference from the pseudo-inverse {worst:.2e}; duplicated columns deferred {flagged}/100"),
    )
}

fn absorbing_ball() -> Verdict {
    let p = default_params();
    let rho_sq = bounds(&p).unwrap().rho_star_sq;
    let limit = rho_sq * (1.0 + 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut peak = 0.0f64;
    let dt = 1e-3;
    for _ in 0..10 {
        let mut y: Vec<f64> = (0..p.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = (rng.gen_range(0.0..rho_sq) / y.iter().map(|x| x * x).sum::<f64>()).sqrt();
        y.iter_mut().for_each(|x| *x *= r);
        let mut ws = Rk4Workspace::new(p.dim());
        let mut f = |_t: f64, u: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&l96::rhs(&p, u).expect("dimension is fixed"));
        };
        for n in 0..50_000 {
            rk4_step_in_place(&mut f, n as f64 * dt, &mut y, dt, &mut ws).unwrap();
            peak = peak.max(l2_norm(&y).powi(2));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let y: Vec<f64> = (0..p.dim()).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let e = energy_residual(&p, &y).unwrap();
        worst = worst.max(e.residual.abs() / e.from_rhs.abs().max(e.from_balance.abs()));
    }
    verdict(
        peak <= limit && worst <= 1e-12,
        format!(
            "largest squared norm {peak:.6e} against radius {rho_sq:.6e}; worst relative energy residual {worst:.2e}"
        ),
    )
}

fn fd_history(f: impl Fn(f64) -> f64, t_end: f64, dt: f64, n: usize) -> ObservationHistory {
    let mut h = ObservationHistory::new(dt, n.max(4)).unwrap();
    for i in (0..n).rev() {
        let t = t_end - i as f64 * dt;
        h.push(t, vec![f(t)]).unwrap();
    }
    h
}

fn backward_differences() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for order in 1..=3usize {
        let poly = |t: f64| (0..=order).map(|k| (k as f64 + 1.0) * t.powi(k as i32)).sum::<f64>();
        let dpoly = |t: f64| (1..=order).map(|k| (k as f64 + 1.0) * k as f64 * t.powi(k as i32 - 1)).sum::<f64>();
        let t_end = 1.3;
        let est = backward_fd(&fd_history(poly, t_end, 0.05, order + 1), order).unwrap().unwrap()[0];
        let exact_err = (est - dpoly(t_end)).abs();
        let err = |dt: f64| {
            let h = fd_history(f64::sin, 1.0, dt, order + 1);
            (backward_fd(&h, order).unwrap().unwrap()[0] - 1f64.cos()).abs()
        };
        let observed = (err(0.01) / err(0.005)).log2();
        let ok = exact_err <= 1e-12 && (observed - order as f64).abs() <= 0.3;
        pass &= ok;
        parts.push(format!("order {order}: polynomial error {exact_err:.1e}, observed order {observed:.3}"));
    }
    verdict(pass, parts.join("; "))
}

fn rbc_cfg(alg: Algorithm, snapshot: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::RbcDefault);
    cfg.algorithm = Some(alg);
    cfg.test_mode = true;
    cfg.initial_state = Some(snapshot.to_path_buf());
    cfg
}

fn component_errors(row: &Row, truth: &[f64]) -> Vec<f64> {
    row.params.iter().zip(truth).map(|(p, t)| (p - t).abs() / t.abs()).collect()
}

fn state_error_at(rows: &[Row], t: f64) -> f64 {
    rows.iter().find(|r| r.t >= t - 1e-9).map_or(f64::NAN, |r| r.state_error_rel)
}

fn rbc_desk_scale() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let snapshot = dir.path().join("convection.bin");
    let base = ExperimentConfig::preset(Preset::RbcDefault);
    let params = RbcParams::new(base.knob("ra"), base.knob("pr"), RbcForm::PrSplit).unwrap();
    let snap = rbc_initial_state(&base, &params, &rbc_grid(&base).unwrap()).unwrap();
    write_snapshot(&snapshot, &snap).unwrap();
    let truth = [base.knob("ra"), base.knob("pr")];

    let mut pass = true;
    let mut parts = Vec::new();
    for alg in [Algorithm::Rls, Algorithm::RniPlus] {
        let rec = estimate(&rbc_cfg(alg, &snapshot));
        let first = component_errors(&rec.rows[0], &truth);
        let last_row = rec.last().unwrap();
        let last = component_errors(last_row, &truth);
        let orders: Vec<f64> = first.iter().zip(&last).map(|(a, b)| (a / b.max(1e-300)).log10()).collect();
        let early = state_error_at(&rec.rows, 0.2);
        let ok = rec.failure.is_none()
            && orders.iter().all(|&o| o >= 6.0)
            && last_row.state_error_rel < early;
        pass &= ok;
        parts.push(format!(
            "{alg}: Ra error {:.1e} -> {:.1e}, Pr error {:.1e} -> {:.1e} ({:.1} and {:.1} orders), \
             state error {early:.1e} at t=0.2 -> {:.1e} at t={}{}",
            first[0],
            last[0],
            first[1],
            last[1],
            orders[0],
            orders[1],
            last_row.state_error_rel,
            last_row.t,
            rec.failure.as_ref().map_or(String::new(), |f| format!(", stopped: {f}"))
        ));
    }
    let rec = estimate(&rbc_cfg(Algorithm::Rni, &snapshot));
    let initial = rec.rows[0].param_error_rel.unwrap();
    let last_row = rec.last().unwrap();
    let final_err = last_row.param_error_rel.unwrap();
    let fails = rec.failure.is_some() || final_err >= initial;
    pass &= fails;
    parts.push(format!(
        "rni (expected not to converge): parameter error {initial:.1e} -> {final_err:.1e} at t={}{}",
        last_row.t,
        rec.failure.as_ref().map_or(String::new(), |f| format!(", stopped: {f}"))
    ));
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 1800.0;
    parts.push(format!("runtime {elapsed:.0} s"));
    verdict(pass, parts.join("; "))
}

fn data_rows(rec: &RunRecord) -> String {
    csv_string(rec).lines().filter(|l| !l.starts_with("# wall_time_s")).collect::<Vec<_>>().join("\n")
}

fn determinism() -> Verdict {
    let mut cfgs = Vec::new();
    let mut l96 = l96_cfg(Some(Algorithm::Rni));
    l96.t_final = 3.0;
    cfgs.push(l96.clone());
    l96.algorithm = Some(Algorithm::Rls);
    cfgs.push(l96);
    let mut scalar = ExperimentConfig::preset(Preset::ScalarToy);
    scalar.test_mode = true;
    cfgs.push(scalar);
    let mut rbc = ExperimentConfig::preset(Preset::RbcDefault);
    rbc.test_mode = true;
    rbc.t_final = 0.1;
    for (k, v) in [("nx", 32.0), ("nz", 16.0), ("n_obs", 6.0), ("spinup_time", 0.05)] {
        rbc.set_override(k, v).unwrap();
    }
    cfgs.push(rbc);

    let mut identical = 0;
    for cfg in &cfgs {
        if data_rows(&estimate(cfg)) == data_rows(&estimate(cfg)) {
            identical += 1;
        }
    }
    let mut template = l96_cfg(Some(Algorithm::Rni));
    template.t_final = 1.0;
    let axes = vec![("mu".to_string(), vec!["10".to_string(), "50".to_string()])];
    let a = sweep(&template, &axes, false).unwrap();
    let b = sweep(&template, &axes, false).unwrap();
    let sweep_same = a == b;
    verdict(
        identical == cfgs.len() && sweep_same,
        format!("{identical}/{} repeated runs byte-identical; repeated sweep identical: {sweep_same}", cfgs.len()),
    )
}

fn main() -> ExitCode {
    let checks: Vec<(&str, fn() -> Verdict)> = vec![
        ("l96 synchronization of unobserved fast variables", l96_fast_synchronization),
        ("l96 rni parameter recovery", l96_rni_recovery),
        ("l96 rls plateau and its dt scaling", l96_rls_plateau),
        ("scalar toy iterates", scalar_toy),
        ("rls against the pseudo-inverse", rls_oracle),
        ("l96 absorbing ball and energy balance", absorbing_ball),
        ("backward difference orders", backward_differences),
        ("convection at desk scale", rbc_desk_scale),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let v = check();
        println!("acceptance {} {}: {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
