//! Rayleigh and Prandtl number updates for the nudged convection system.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use super::grid::{RbcGrid, C64};
use super::solver::{RbcFields, RbcNudge, RbcSolver};
use crate::error::{Error, Result};
use crate::estimators::{Degeneracy, Proposal, UpdateOutcome};
use crate::system::ParameterVector;

const REL_DEGENERACY: f64 = 1e-14;
/// Smallest accepted `|(A⁻¹b)₁|` in the least-squares solve.
pub const MIN_PRANDTL_COMPONENT: f64 = 1e-12;

fn sub(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn projected(grid: &RbcGrid, f: &[C64], n_obs: usize) -> Vec<C64> {
    let mut out = f.to_vec();
    grid.galerkin_project(&mut out, n_obs);
    out
}

/// `w = −∂x ψ` of a vorticity field, in sine coefficients.
fn vertical_velocity(grid: &RbcGrid, zeta: &[C64]) -> Vec<C64> {
    grid.velocities(zeta).1
}

fn accepted(ra: f64, pr_inv: f64, den: [f64; 2]) -> Result<UpdateOutcome> {
    let lambda = ParameterVector::new(vec![ra, 1.0 / pr_inv])?;
    let inverse_norm = den.iter().map(|d| 1.0 / d.abs()).fold(0.0, f64::max);
    Ok(UpdateOutcome::Accepted(Proposal {
        lambda,
        inverse_norm,
        cond: 1.0,
    }))
}

/// Newton-type update of `(Ra, Pr⁻¹)` for the split form. With
/// `corrections` the dropped advection, diffusion and buoyancy terms are
/// reinstated using observed projections.
fn split_form_update(
    solver: &mut RbcSolver,
    truth_obs: &RbcFields,
    nudged: &RbcFields,
    lambda: &ParameterVector,
    nudge: &RbcNudge,
    corrections: bool,
) -> Result<UpdateOutcome> {
    if lambda.len() != 2 {
        return Err(Error::config("Rayleigh–Bénard updates need λ = (Ra, Pr)"));
    }
    if !(nudge.mu2 > 0.0) {
        return Err(Error::config("Newton-type updates need temperature nudging (mu2 > 0)"));
    }
    let (ra, pr_inv) = (lambda[0], 1.0 / lambda[1]);
    let g = solver.grid.clone();
    let n = nudge.n_obs;
    let zeta_o = projected(&g, &truth_obs.zeta, n);
    let theta_o = projected(&g, &truth_obs.theta, n);
    let zt_o = projected(&g, &nudged.zeta, n);
    let tt_o = projected(&g, &nudged.theta, n);
    let z = sub(&zt_o, &zeta_o);
    let eta = sub(&tt_o, &theta_o);

    let theta_x = g.deriv_x(&theta_o);
    let lap_theta = g.laplacian(&theta_o);
    let den_ra = g.inner(&theta_x, &z);
    let den_pr = g.inner(&eta, &lap_theta);
    let zz = g.inner(&z, &z);
    let ee = g.inner(&eta, &eta);
    if zz == 0.0 && ee == 0.0 {
        return Ok(UpdateOutcome::Deferred(Degeneracy::ZeroInnovation));
    }
    if den_ra.abs() <= REL_DEGENERACY * g.norm(&theta_x) * zz.sqrt() || den_ra == 0.0 {
        return Ok(UpdateOutcome::Deferred(Degeneracy::SmallInnerProduct { param: 0 }));
    }
    if den_pr.abs() <= REL_DEGENERACY * g.norm(&lap_theta) * ee.sqrt() || den_pr == 0.0 {
        return Ok(UpdateOutcome::Deferred(Degeneracy::SmallInnerProduct { param: 1 }));
    }

    let mut num_ra = nudge.mu1 * zz;
    let mut num_pr = nudge.mu2 * ee;
    if corrections {
        let (adv_z, adv_eta, _, _) = solver.advection_with(&zt_o, &z, &eta);
        let (err_z, err_theta, _, _) = solver.advection_with(&z, &zeta_o, &theta_o);
        let lap_z = g.laplacian(&z);
        let lap_eta = g.laplacian(&eta);
        let eta_x = g.deriv_x(&eta);
        let w_err = vertical_velocity(&g, &z);
        let mut corr_z = g.zeros();
        let mut corr_eta = g.zeros();
        for s in 0..g.len() {
            corr_z[s] = adv_z[s] + err_z[s] - lap_z[s] - ra * eta_x[s];
            corr_eta[s] = adv_eta[s] + err_theta[s] - w_err[s] - pr_inv * lap_eta[s];
        }
        g.galerkin_project(&mut corr_z, n);
        g.galerkin_project(&mut corr_eta, n);
        num_ra += g.inner(&z, &corr_z);
        num_pr += g.inner(&eta, &corr_eta);
    }
    accepted(ra - num_ra / den_ra, pr_inv - num_pr / den_pr, [den_ra, den_pr])
}

/// Plain relaxation Newton update:
/// `Ra′ = R̃a − μ₁‖I_h z‖²/⟨I_h θ_x, I_h z⟩` and
/// `(Pr⁻¹)′ = P̃r⁻¹ − μ₂‖I_h η‖²/⟨I_h η, I_h Δθ⟩`.
/// `lambda` and the accepted proposal are `(Ra, Pr)`.
pub fn rni_ra_pr_update(
    solver: &mut RbcSolver,
    truth_obs: &RbcFields,
    nudged: &RbcFields,
    lambda: &ParameterVector,
    nudge: &RbcNudge,
) -> Result<UpdateOutcome> {
    split_form_update(solver, truth_obs, nudged, lambda, nudge, false)
}

/// Refined Newton update: the plain numerators gain
/// `⟨I_h z, I_h(ũ·∇z + w·∇ζ) − ΔI_h z − R̃a I_h η_x⟩` and
/// `⟨I_h η, I_h(ũ·∇η + w·∇θ) − I_h w_z − P̃r⁻¹ΔI_h η⟩`,
/// every product formed from observed projections.
pub fn rni_plus_ra_pr_update(
    solver: &mut RbcSolver,
    truth_obs: &RbcFields,
    nudged: &RbcFields,
    lambda: &ParameterVector,
    nudge: &RbcNudge,
) -> Result<UpdateOutcome> {
    split_form_update(solver, truth_obs, nudged, lambda, nudge, true)
}

/// The 2×2 least-squares system for `(Pr, Pr·Ra)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbcRlsSystem {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
}

/// Assembles `A` and `b` from the nudged fields and the observed `ζ_t`.
pub fn rls_pr_ra_assemble(
    solver: &mut RbcSolver,
    nudged: &RbcFields,
    dzeta_obs_dt: &[C64],
    n_obs: usize,
) -> Result<RbcRlsSystem> {
    let g = solver.grid.clone();
    if dzeta_obs_dt.len() != g.len() {
        return Err(Error::config("ζ_t must have one coefficient per mode"));
    }
    let lap = projected(&g, &g.laplacian(&nudged.zeta), n_obs);
    let tx = projected(&g, &g.deriv_x(&nudged.theta), n_obs);
    let (adv, _, _, _) = solver.advection(nudged);
    let mut rhs = projected(&g, &adv, n_obs);
    let dz = projected(&g, dzeta_obs_dt, n_obs);
    for (r, d) in rhs.iter_mut().zip(&dz) {
        *r += d;
    }
    let off = g.inner(&tx, &lap);
    Ok(RbcRlsSystem {
        a: Matrix2::new(g.inner(&lap, &lap), off, off, g.inner(&tx, &tx)),
        b: Vector2::new(g.inner(&rhs, &lap), g.inner(&rhs, &tx)),
    })
}

/// Solves the 2×2 system. The condition number reported and compared with
/// `cond_threshold` is that of `D^{-1/2} A D^{-1/2}` with `D = diag(A)`.
/// The proposal is `(Ra, Pr)` with
/// `Pr = (A⁻¹b)₁`, `Ra = (A⁻¹b)₂/(A⁻¹b)₁`.
pub fn rls_pr_ra_solve(sys: &RbcRlsSystem, cond_threshold: f64) -> Result<UpdateOutcome> {
    let a = sys.a;
    let scale = a[(0, 0)] * a[(1, 1)];
    let det = a.determinant();
    if !(scale > 0.0) || det <= REL_DEGENERACY * scale {
        let rank = usize::from(a[(0, 0)] > 0.0 || a[(1, 1)] > 0.0);
        return Ok(UpdateOutcome::Deferred(Degeneracy::RankDeficient { rank }));
    }
    let lo = SymmetricEigen::new(a).eigenvalues.min();
    let c = (a[(0, 1)] / scale.sqrt()).abs();
    let cond = (1.0 + c) / (1.0 - c);
    if !(cond <= cond_threshold) {
        return Ok(UpdateOutcome::Deferred(Degeneracy::IllConditioned { cond }));
    }
    let x1 = (a[(1, 1)] * sys.b[0] - a[(0, 1)] * sys.b[1]) / det;
    let x2 = (a[(0, 0)] * sys.b[1] - a[(1, 0)] * sys.b[0]) / det;
    if x1.abs() < MIN_PRANDTL_COMPONENT {
        return Ok(UpdateOutcome::Deferred(Degeneracy::NearZeroPrandtl));
    }
    Ok(UpdateOutcome::Accepted(Proposal {
        lambda: ParameterVector::new(vec![x2 / x1, x1])?,
        inverse_norm: 1.0 / lo,
        cond,
    }))
}

/// Least-squares update of `(Pr, Ra)` from vorticity data alone.
pub fn rls_pr_ra_update(
    solver: &mut RbcSolver,
    nudged: &RbcFields,
    dzeta_obs_dt: &[C64],
    nudge: &RbcNudge,
    cond_threshold: f64,
) -> Result<UpdateOutcome> {
    let sys = rls_pr_ra_assemble(solver, nudged, dzeta_obs_dt, nudge.n_obs)?;
    rls_pr_ra_solve(&sys, cond_threshold)
}
