//! Parameter updates driven by the nudged state: relaxation Newton
//! iteration (RNI), its refinement with observed-projection nonlinear terms
//! (RNI+), and relaxation least squares (RLS). Also the update scheduler
//! and the contraction diagnostics reported per update.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::system::{dot, l2_norm, observe, NudgeConfig, ObservationOperator, ParameterVector, SystemModel};

/// Relative threshold below which an RNI inner product counts as zero.
pub const RNI_DEGENERACY_TOL: f64 = 1e-14;
/// Default largest accepted condition number of the RLS design matrix.
pub const DEFAULT_COND_THRESHOLD: f64 = 1e8;
/// Default number of consecutive deferrals before giving up.
pub const DEFAULT_MAX_SKIPS: usize = 100;
/// Consecutive exact rank failures before the RLS degeneracy is reported
/// as permanent.
pub const RANK_WARNING_AFTER: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Rni,
    RniPlus,
    Rls,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rni => "rni",
            Algorithm::RniPlus => "rni+",
            Algorithm::Rls => "rls",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rni" => Ok(Algorithm::Rni),
            "rni+" | "rni-plus" | "rniplus" | "rni_plus" => Ok(Algorithm::RniPlus),
            "rls" => Ok(Algorithm::Rls),
            other => Err(Error::config(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Why an update was deferred to the next interval.
#[derive(Clone, Debug, PartialEq)]
pub enum Degeneracy {
    /// Observed state error vanishes; nothing to learn from.
    ZeroInnovation,
    /// `⟨L_k ũ, I_h w⟩` is negligible for parameter `k`.
    SmallInnerProduct { param: usize },
    /// Least-squares columns are exactly dependent.
    RankDeficient { rank: usize },
    IllConditioned { cond: f64 },
    /// The Prandtl component of a two-parameter solve is (nearly) zero.
    NearZeroPrandtl,
    /// Not enough observation samples for the time derivative.
    NotReady,
}

impl fmt::Display for Degeneracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degeneracy::ZeroInnovation => write!(f, "zero observed innovation"),
            Degeneracy::SmallInnerProduct { param } => {
                write!(f, "negligible inner product for parameter {param}")
            }
            Degeneracy::RankDeficient { rank } => write!(f, "rank-deficient system (rank {rank})"),
            Degeneracy::IllConditioned { cond } => write!(f, "ill-conditioned system (cond {cond:e})"),
            Degeneracy::NearZeroPrandtl => write!(f, "near-zero Prandtl component"),
            Degeneracy::NotReady => write!(f, "time-derivative history not ready"),
        }
    }
}

/// An accepted parameter proposal with the norms used by the diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub lambda: ParameterVector,
    /// Spectral norm of the inverse update matrix (`L̃⁻¹` or `K̃⁻¹`).
    pub inverse_norm: f64,
    /// Condition number of the solve (1 for diagonal RNI systems).
    pub cond: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOutcome {
    Accepted(Proposal),
    Deferred(Degeneracy),
}

impl UpdateOutcome {
    pub fn proposal(&self) -> Option<&Proposal> {
        match self {
            UpdateOutcome::Accepted(p) => Some(p),
            UpdateOutcome::Deferred(_) => None,
        }
    }

    pub fn lambda(&self) -> Option<&ParameterVector> {
        self.proposal().map(|p| &p.lambda)
    }

    pub fn is_deferred(&self) -> bool {
        matches!(self, UpdateOutcome::Deferred(_))
    }
}

/// Diagonal RNI system: `E_k = ½‖√(I_h M) P_k I_h w‖²` and
/// `L̃_kk = ½⟨L_k ũ, I_h w⟩`, where `P_k` restricts to the rows `L_k` writes.
/// For operators acting on every row all `E_k` coincide.
#[derive(Clone, Debug, PartialEq)]
pub struct RniWorkspace {
    pub energy: Vec<f64>,
    pub ldiag: Vec<f64>,
    /// `½‖L_k ũ‖·‖P_k I_h w‖`, the scale the degeneracy test is relative to.
    pub ldiag_scale: Vec<f64>,
}

fn support_rows(model: &SystemModel, k: usize) -> Option<Vec<usize>> {
    model.linear_ops().get(k).range_support()
}

/// Restriction of `v` to `rows` (all of it when `rows` is `None`).
fn restricted<'a>(v: &'a [f64], rows: &'a Option<Vec<usize>>) -> Box<dyn Iterator<Item = (usize, f64)> + 'a> {
    match rows {
        Some(r) => Box::new(r.iter().map(move |&i| (i, v[i]))),
        None => Box::new(v.iter().copied().enumerate()),
    }
}

impl RniWorkspace {
    pub fn assemble(
        model: &SystemModel,
        obs: &ObservationOperator,
        nudge: &NudgeConfig,
        u_tilde: &[f64],
        w_obs: &[f64],
    ) -> Result<Self> {
        let d = model.dim();
        if u_tilde.len() != d || w_obs.len() != d || obs.dim() != d || nudge.gains().len() != d {
            return Err(Error::config("RNI inputs have inconsistent dimensions"));
        }
        let w_obs = observe(obs, w_obs);
        let gains = nudge.gains();
        let p = model.num_params();
        let mut energy = Vec::with_capacity(p);
        let mut ldiag = Vec::with_capacity(p);
        let mut ldiag_scale = Vec::with_capacity(p);
        let mut lu = vec![0.0; d];
        for k in 0..p {
            let rows = support_rows(model, k);
            let (e, wn) = restricted(&w_obs, &rows).fold((0.0, 0.0), |(e, wn), (i, wi)| {
                (e + gains[i] * wi * wi, wn + wi * wi)
            });
            model.linear_ops().get(k).apply_into(u_tilde, &mut lu);
            energy.push(0.5 * e);
            ldiag.push(0.5 * dot(&lu, &w_obs));
            ldiag_scale.push(0.5 * l2_norm(&lu) * wn.sqrt());
        }
        Ok(RniWorkspace {
            energy,
            ldiag,
            ldiag_scale,
        })
    }

    /// Spectral norm of `L̃⁻¹` (infinite when singular).
    pub fn inverse_norm(&self) -> f64 {
        self.ldiag
            .iter()
            .map(|l| if *l == 0.0 { f64::INFINITY } else { 1.0 / l.abs() })
            .fold(0.0, f64::max)
    }

    fn first_degenerate(&self) -> Option<Degeneracy> {
        if self.energy.iter().all(|&e| e == 0.0) {
            return Some(Degeneracy::ZeroInnovation);
        }
        self.ldiag
            .iter()
            .zip(&self.ldiag_scale)
            .position(|(l, s)| !(*s > 0.0) || !(l.abs() > RNI_DEGENERACY_TOL * s))
            .map(|param| Degeneracy::SmallInnerProduct { param })
    }
}

/// True when every `L̃_kk` is nonnegligible relative to its scale.
pub fn rni_solvable(ws: &RniWorkspace) -> bool {
    ws.first_degenerate().is_none()
}

fn rni_step(ws: &RniWorkspace, lambda: &ParameterVector, correction: Option<&[f64]>) -> Result<UpdateOutcome> {
    if let Some(reason) = ws.first_degenerate() {
        return Ok(UpdateOutcome::Deferred(reason));
    }
    let next = lambda
        .iter()
        .enumerate()
        .map(|(k, lam)| {
            // 2E_k − C_k over 2L̃_kk; C vanishes for plain RNI
            let c = correction.map_or(0.0, |c| c[k]);
            lam - (ws.energy[k] - 0.5 * c) / ws.ldiag[k]
        })
        .collect();
    Ok(UpdateOutcome::Accepted(Proposal {
        lambda: ParameterVector::new(next)?,
        inverse_norm: ws.inverse_norm(),
        cond: 1.0,
    }))
}

/// `Λ' = Λ − L̃⁻¹ E`, i.e. `λ_k' = λ_k − ‖√M P_k I_h w‖² / ⟨L_k ũ, I_h w⟩`.
pub fn rni_update(
    model: &SystemModel,
    obs: &ObservationOperator,
    nudge: &NudgeConfig,
    u_tilde: &[f64],
    w_obs: &[f64],
    lambda: &ParameterVector,
) -> Result<UpdateOutcome> {
    check_lambda(model, lambda)?;
    let ws = RniWorkspace::assemble(model, obs, nudge, u_tilde, w_obs)?;
    rni_step(&ws, lambda, None)
}

/// RNI with the nonlinear term reinstated through observed projections:
/// `λ_k' = λ_k − (⟨M I_h w, P_k I_h w⟩ − C_k) / ⟨L_k ũ, I_h w⟩` with
/// `C_k = ⟨F(I_h ũ) − F(I_h u), P_k I_h w⟩`.
pub fn rni_plus_update(
    model: &SystemModel,
    obs: &ObservationOperator,
    nudge: &NudgeConfig,
    u_tilde: &[f64],
    truth_obs: &[f64],
    lambda: &ParameterVector,
) -> Result<UpdateOutcome> {
    check_lambda(model, lambda)?;
    let d = model.dim();
    if truth_obs.len() != d {
        return Err(Error::config("observed truth has the wrong dimension"));
    }
    let nudged_obs = observe(obs, u_tilde);
    let truth_obs = observe(obs, truth_obs);
    let w_obs: Vec<f64> = nudged_obs.iter().zip(&truth_obs).map(|(a, b)| a - b).collect();
    let ws = RniWorkspace::assemble(model, obs, nudge, u_tilde, &w_obs)?;
    if ws.first_degenerate().is_some() {
        return rni_step(&ws, lambda, None);
    }
    let f_nudged = model.nonlinearity(&nudged_obs);
    let f_truth = model.nonlinearity(&truth_obs);
    let df: Vec<f64> = f_nudged.iter().zip(&f_truth).map(|(a, b)| a - b).collect();
    let correction: Vec<f64> = (0..model.num_params())
        .map(|k| {
            let rows = support_rows(model, k);
            restricted(&w_obs, &rows).map(|(i, wi)| df[i] * wi).sum()
        })
        .collect();
    rni_step(&ws, lambda, Some(&correction))
}

fn check_lambda(model: &SystemModel, lambda: &ParameterVector) -> Result<()> {
    if lambda.len() != model.num_params() {
        return Err(Error::config(format!(
            "expected {} parameters, got {}",
            model.num_params(),
            lambda.len()
        )));
    }
    Ok(())
}

/// Overdetermined system `Lmat Λ ≈ f` restricted to observed rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RlsNormalSystem {
    /// Observed-row by parameter, row-major; column `k` is `I_h L_k ũ`.
    pub lmat: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// `d(I_h u)/dt − I_h F(ũ)` on observed rows.
    pub f: Vec<f64>,
    /// `LᵀL`, row-major `cols × cols`.
    pub k: Vec<f64>,
    /// Ratio of extreme singular values of `lmat`.
    pub cond_estimate: f64,
    /// Smallest eigenvalue of `K`.
    pub k_min_eigenvalue: f64,
}

impl RlsNormalSystem {
    /// Builds the system from a dense row-major matrix and right-hand side.
    pub fn from_dense(rows: usize, cols: usize, lmat: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        if lmat.len() != rows * cols || f.len() != rows {
            return Err(Error::config("least-squares system has inconsistent shape"));
        }
        if cols == 0 || rows < cols {
            return Err(Error::config(format!(
                "least-squares system needs rows >= cols >= 1, got {rows}x{cols}"
            )));
        }
        let mut k = vec![0.0; cols * cols];
        for a in 0..cols {
            for b in a..cols {
                let s: f64 = (0..rows).map(|r| lmat[r * cols + a] * lmat[r * cols + b]).sum();
                k[a * cols + b] = s;
                k[b * cols + a] = s;
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(cols, cols, &k));
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let cond_estimate = if min > 0.0 { (max / min).sqrt() } else { f64::INFINITY };
        Ok(RlsNormalSystem {
            lmat,
            rows,
            cols,
            f,
            k,
            cond_estimate,
            k_min_eigenvalue: min,
        })
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.lmat[r * self.cols + c]).collect()
    }

    /// `Lᵀ f`.
    pub fn lt_f(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.lmat[r * self.cols + c] * self.f[r]).sum())
            .collect()
    }

    pub fn residual_sq(&self, lambda: &[f64]) -> f64 {
        (0..self.rows)
            .map(|r| {
                let row = &self.lmat[r * self.cols..(r + 1) * self.cols];
                let e = dot(row, lambda) - self.f[r];
                e * e
            })
            .sum()
    }
}

pub fn rls_assemble(
    model: &SystemModel,
    obs: &ObservationOperator,
    u_tilde: &[f64],
    dobs_dt: &[f64],
) -> Result<RlsNormalSystem> {
    let d = model.dim();
    if u_tilde.len() != d || dobs_dt.len() != d || obs.dim() != d {
        return Err(Error::config("RLS inputs have inconsistent dimensions"));
    }
    let rows: Vec<usize> = obs.observed_indices().collect();
    let p = model.num_params();
    let mut lmat = vec![0.0; rows.len() * p];
    let mut lu = vec![0.0; d];
    for k in 0..p {
        model.linear_ops().get(k).apply_into(u_tilde, &mut lu);
        for (r, &i) in rows.iter().enumerate() {
            lmat[r * p + k] = lu[i];
        }
    }
    let fu = model.nonlinearity(u_tilde);
    let f = rows.iter().map(|&i| dobs_dt[i] - fu[i]).collect();
    RlsNormalSystem::from_dense(rows.len(), p, lmat, f)
}

/// Householder QR with column pivoting of a row-major `rows × cols` matrix.
/// Returns the packed factor, the Householder scalars and the permutation.
fn pivoted_qr(a: &mut [f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut tau = vec![0.0; cols];
    let mut col_norms: Vec<f64> = (0..cols)
        .map(|c| (0..rows).map(|r| a[r * cols + c].powi(2)).sum())
        .collect();
    for j in 0..cols {
        // pivot: largest remaining column norm
        let (best, _) = col_norms[j..]
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
        let best = best + j;
        if best != j {
            for r in 0..rows {
                a.swap(r * cols + j, r * cols + best);
            }
            col_norms.swap(j, best);
            perm.swap(j, best);
        }
        let norm: f64 = (j..rows).map(|r| a[r * cols + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            tau[j] = 0.0;
            continue;
        }
        let alpha = if a[j * cols + j] > 0.0 { -norm } else { norm };
        let v0 = a[j * cols + j] - alpha;
        // v = [1, a[j+1..]/v0]; tau = −v0/alpha
        for r in (j + 1)..rows {
            a[r * cols + j] /= v0;
        }
        tau[j] = -v0 / alpha;
        a[j * cols + j] = alpha;
        for c in (j + 1)..cols {
            let mut s = a[j * cols + c];
            for r in (j + 1)..rows {
                s += a[r * cols + j] * a[r * cols + c];
            }
            s *= tau[j];
            a[j * cols + c] -= s;
            for r in (j + 1)..rows {
                a[r * cols + c] -= s * a[r * cols + j];
            }
        }
        for c in (j + 1)..cols {
            col_norms[c] = (j + 1..rows).map(|r| a[r * cols + c].powi(2)).sum();
        }
    }
    (tau, perm)
}

/// Least-squares solution of `Lmat Λ ≈ f` by pivoted QR of `Lmat`.
pub fn rls_solve(system: &RlsNormalSystem, cond_threshold: f64) -> Result<UpdateOutcome> {
    if !(cond_threshold >= 1.0) {
        return Err(Error::config("condition threshold must be >= 1"));
    }
    let (rows, cols) = (system.rows, system.cols);
    let mut a = system.lmat.clone();
    let (tau, perm) = pivoted_qr(&mut a, rows, cols);

    let r00 = a[0].abs();
    let rank_tol = (rows.max(cols) as f64) * f64::EPSILON * r00;
    let rank = (0..cols).take_while(|&j| a[j * cols + j].abs() > rank_tol).count();
    if r00 == 0.0 || rank < cols {
        return Ok(UpdateOutcome::Deferred(Degeneracy::RankDeficient { rank }));
    }
    let r_ratio = r00 / a[(cols - 1) * cols + cols - 1].abs();
    let cond = if system.cond_estimate.is_finite() {
        system.cond_estimate.max(r_ratio)
    } else {
        r_ratio
    };
    if cond > cond_threshold {
        return Ok(UpdateOutcome::Deferred(Degeneracy::IllConditioned { cond }));
    }

    // Qᵀ f
    let mut qtf = system.f.clone();
    for j in 0..cols {
        let mut s = qtf[j];
        for r in (j + 1)..rows {
            s += a[r * cols + j] * qtf[r];
        }
        s *= tau[j];
        qtf[j] -= s;
        for r in (j + 1)..rows {
            qtf[r] -= s * a[r * cols + j];
        }
    }
    // R x = (Qᵀ f)[..cols]
    let mut x = vec![0.0; cols];
    for j in (0..cols).rev() {
        let mut s = qtf[j];
        for c in (j + 1)..cols {
            s -= a[j * cols + c] * x[c];
        }
        x[j] = s / a[j * cols + j];
    }
    let mut lambda = vec![0.0; cols];
    for (j, &p) in perm.iter().enumerate() {
        lambda[p] = x[j];
    }
    let inverse_norm = if system.k_min_eigenvalue > 0.0 {
        1.0 / system.k_min_eigenvalue
    } else {
        f64::INFINITY
    };
    Ok(UpdateOutcome::Accepted(Proposal {
        lambda: ParameterVector::new(lambda)?,
        inverse_norm,
        cond,
    }))
}

/// Settings for scheduled updates.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub algorithm: Algorithm,
    /// Time between updates.
    pub update_interval: f64,
    /// Backward-difference order for the observed time derivative (RLS).
    pub fd_order: usize,
    pub cond_threshold: f64,
    pub max_skips: usize,
}

impl EstimatorConfig {
    pub fn new(algorithm: Algorithm, update_interval: f64) -> Self {
        EstimatorConfig {
            algorithm,
            update_interval,
            fd_order: 3,
            cond_threshold: DEFAULT_COND_THRESHOLD,
            max_skips: DEFAULT_MAX_SKIPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.update_interval > 0.0) {
            return Err(Error::config("update interval must be positive"));
        }
        if !(1..=3).contains(&self.fd_order) {
            return Err(Error::config("fd_order must be 1, 2 or 3"));
        }
        if !(self.cond_threshold >= 1.0) {
            return Err(Error::config("condition threshold must be >= 1"));
        }
        if self.max_skips == 0 {
            return Err(Error::config("max_skips must be positive"));
        }
        Ok(())
    }
}

/// One accepted update.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub t: f64,
    pub lambda: ParameterVector,
    /// `‖I_h w‖` at the update time.
    pub observed_error: f64,
    pub inverse_norm: f64,
    /// Smallest nudging gain on observed components.
    pub mu_min: f64,
    pub cond: f64,
}

/// Result of offering an update opportunity to the scheduler.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleEvent {
    NotDue,
    Updated,
    Skipped(Degeneracy),
}

/// Live estimator: current iterate, schedule and accepted-update history.
#[derive(Clone, Debug)]
pub struct EstimatorState {
    pub config: EstimatorConfig,
    pub lambda_current: ParameterVector,
    pub next_update: f64,
    pub skip_count: usize,
    pub consecutive_rank_failures: usize,
    pub permanent_degeneracy_warned: bool,
    pub history: Vec<HistoryEntry>,
}

impl EstimatorState {
    /// First update is due one interval after `t0`.
    pub fn new(config: EstimatorConfig, lambda0: ParameterVector, t0: f64) -> Result<Self> {
        config.validate()?;
        let next_update = t0 + config.update_interval;
        Ok(EstimatorState {
            config,
            lambda_current: lambda0,
            next_update,
            skip_count: 0,
            consecutive_rank_failures: 0,
            permanent_degeneracy_warned: false,
            history: Vec::new(),
        })
    }

    pub fn is_due(&self, t: f64) -> bool {
        t >= self.next_update - 1e-9 * self.config.update_interval
    }

    /// Runs `attempt` when an update is due and applies its outcome.
    pub fn schedule_and_apply<A>(&mut self, t: f64, observed_error: f64, mu_min: f64, attempt: A) -> Result<ScheduleEvent>
    where
        A: FnOnce(&ParameterVector) -> Result<UpdateOutcome>,
    {
        if !self.is_due(t) {
            return Ok(ScheduleEvent::NotDue);
        }
        self.next_update += self.config.update_interval;
        match attempt(&self.lambda_current)? {
            UpdateOutcome::Accepted(p) => {
                if let Some(last) = self.history.last() {
                    debug_assert!(t > last.t);
                }
                self.lambda_current = p.lambda.clone();
                self.history.push(HistoryEntry {
                    t,
                    lambda: p.lambda,
                    observed_error,
                    inverse_norm: p.inverse_norm,
                    mu_min,
                    cond: p.cond,
                });
                self.skip_count = 0;
                self.consecutive_rank_failures = 0;
                Ok(ScheduleEvent::Updated)
            }
            UpdateOutcome::Deferred(reason) => {
                self.skip_count += 1;
                if matches!(reason, Degeneracy::RankDeficient { .. }) {
                    self.consecutive_rank_failures += 1;
                    if self.consecutive_rank_failures >= RANK_WARNING_AFTER && !self.permanent_degeneracy_warned {
                        self.permanent_degeneracy_warned = true;
                        log::warn!(
                            "least-squares columns dependent for {} consecutive updates; \
                             these parameters cannot be separated from the observations",
                            self.consecutive_rank_failures
                        );
                    }
                } else {
                    self.consecutive_rank_failures = 0;
                }
                if self.skip_count >= self.config.max_skips {
                    return Err(Error::PermanentDegeneracy {
                        skips: self.skip_count,
                        t,
                        dump: format!(
                            "last reason: {reason}; lambda = {:?}; accepted updates = {}",
                            self.lambda_current.as_slice(),
                            self.history.len()
                        ),
                    });
                }
                Ok(ScheduleEvent::Skipped(reason))
            }
        }
    }
}

/// Per-update convergence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionDiagnostics {
    pub t: f64,
    pub observed_error: f64,
    pub inverse_norm: f64,
    pub mu_min: f64,
    /// `‖ΔΛ⁽ⁿ⁺¹⁾‖ / ‖ΔΛ⁽ⁿ⁾‖`; needs the true parameters.
    pub ratio: Option<f64>,
    /// `1 − ratio`.
    pub delta_hat: Option<f64>,
}

/// Diagnostics for every history entry after the first.
pub fn contraction_report(
    history: &[HistoryEntry],
    lambda_true: Option<&ParameterVector>,
) -> Result<Vec<ContractionDiagnostics>> {
    if history.len() < 2 {
        return Err(Error::config("contraction report needs at least two updates"));
    }
    Ok(history
        .windows(2)
        .map(|pair| {
            let (prev, cur) = (&pair[0], &pair[1]);
            let ratio = lambda_true.and_then(|truth| {
                let before = crate::system::l2_diff(&prev.lambda, truth);
                let after = crate::system::l2_diff(&cur.lambda, truth);
                (before > 0.0).then(|| after / before)
            });
            ContractionDiagnostics {
                t: cur.t,
                observed_error: cur.observed_error,
                inverse_norm: cur.inverse_norm,
                mu_min: cur.mu_min,
                ratio,
                delta_hat: ratio.map(|r| 1.0 - r),
            }
        })
        .collect())
}
