//! Vorticity–temperature equations, nudging and CNAB2 time stepping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{RbcGrid, Transforms, ZBasis, C64};
use crate::error::{Error, Result};

/// Where the Prandtl number appears.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RbcForm {
    /// `ζ_t + u·∇ζ = PrΔζ + Pr Ra θ_x`, `θ_t + u·∇θ = Δθ`.
    PrOutside,
    /// `ζ_t + u·∇ζ = Δζ + Ra θ_x`, `θ_t + u·∇θ = Pr⁻¹Δθ`.
    PrSplit,
}

impl RbcForm {
    pub fn name(self) -> &'static str {
        match self {
            RbcForm::PrOutside => "pr-outside",
            RbcForm::PrSplit => "pr-split",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbcParams {
    pub ra: f64,
    pub pr: f64,
    pub form: RbcForm,
}

impl RbcParams {
    pub fn new(ra: f64, pr: f64, form: RbcForm) -> Result<Self> {
        if !(ra > 0.0 && ra.is_finite() && pr > 0.0 && pr.is_finite()) {
            return Err(Error::config(format!("Ra = {ra} and Pr = {pr} must be positive")));
        }
        Ok(RbcParams { ra, pr, form })
    }

    pub fn coefficients(&self) -> RbcCoefficients {
        match self.form {
            RbcForm::PrOutside => RbcCoefficients {
                visc: self.pr,
                buoy: self.pr * self.ra,
                kappa: 1.0,
                background: 1.0,
                advection: 1.0,
            },
            RbcForm::PrSplit => RbcCoefficients {
                visc: 1.0,
                buoy: self.ra,
                kappa: 1.0 / self.pr,
                background: 1.0,
                advection: 1.0,
            },
        }
    }
}

/// Coefficients of `ζ_t = −a u·∇ζ + νΔζ + b θ_x`,
/// `θ_t = −a u·∇θ + c w + κΔθ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbcCoefficients {
    pub visc: f64,
    pub buoy: f64,
    pub kappa: f64,
    /// Advection of the conductive profile (`c`).
    pub background: f64,
    pub advection: f64,
}

/// Vorticity and temperature deviation, as sine coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct RbcFields {
    pub zeta: Vec<C64>,
    pub theta: Vec<C64>,
}

impl RbcFields {
    pub fn zeros(grid: &RbcGrid) -> Self {
        RbcFields {
            zeta: grid.zeros(),
            theta: grid.zeros(),
        }
    }

    pub fn project(&self, grid: &RbcGrid, n_obs: usize) -> Self {
        let mut out = self.clone();
        grid.galerkin_project(&mut out.zeta, n_obs);
        grid.galerkin_project(&mut out.theta, n_obs);
        out
    }

    /// `√(‖ζ‖² + ‖θ‖²)`.
    pub fn norm(&self, grid: &RbcGrid) -> f64 {
        (grid.inner(&self.zeta, &self.zeta) + grid.inner(&self.theta, &self.theta)).sqrt()
    }

    pub fn diff(&self, other: &RbcFields) -> RbcFields {
        let sub = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        RbcFields {
            zeta: sub(&self.zeta, &other.zeta),
            theta: sub(&self.theta, &other.theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.zeta.iter().chain(&self.theta).all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Nudging gains and the Galerkin cutoff of `I_h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbcNudge {
    pub mu1: f64,
    pub mu2: f64,
    pub n_obs: usize,
}

impl RbcNudge {
    pub fn new(mu1: f64, mu2: f64, n_obs: usize) -> Result<Self> {
        if !(mu1 > 0.0) || !(mu2 >= 0.0) || !mu1.is_finite() || !mu2.is_finite() {
            return Err(Error::config("need mu1 > 0 and mu2 >= 0"));
        }
        if n_obs == 0 {
            return Err(Error::config("observation cutoff must be >= 1"));
        }
        Ok(RbcNudge { mu1, mu2, n_obs })
    }

    /// Gains reduced so that `μ·dt ≤ cap`, keeping the explicit treatment stable.
    pub fn capped(&self, dt: f64, cap: f64) -> Self {
        RbcNudge {
            mu1: self.mu1.min(cap / dt),
            mu2: self.mu2.min(cap / dt),
            n_obs: self.n_obs,
        }
    }
}

/// Largest `μ·dt` used for explicitly treated nudging.
pub const NUDGE_STABILITY_CAP: f64 = 0.5;
/// Advective CFL limit.
pub const CFL_LIMIT: f64 = 0.5;

/// Explicit part of the tendencies plus the grid maxima of the velocity.
pub struct Explicit {
    pub zeta: Vec<C64>,
    pub theta: Vec<C64>,
    pub max_u: f64,
    pub max_w: f64,
}

/// Transforms and buffers for evaluating tendencies on one grid.
pub struct RbcSolver {
    pub grid: RbcGrid,
    tf: Transforms,
    bufs: [Vec<C64>; 5],
}

impl RbcSolver {
    pub fn new(grid: RbcGrid) -> Self {
        let tf = Transforms::new(&grid);
        let bufs = std::array::from_fn(|_| grid.zeros());
        RbcSolver { grid, tf, bufs }
    }

    /// `u·∇ζ` and `u·∇θ` (dealiased) with the grid maxima of `|u|`, `|w|`.
    pub fn advection(&mut self, f: &RbcFields) -> (Vec<C64>, Vec<C64>, f64, f64) {
        self.advection_with(&f.zeta, &f.zeta, &f.theta)
    }

    /// `u(ζ_v)·∇ζ_a` and `u(ζ_v)·∇θ_a`.
    pub fn advection_with(&mut self, zeta_vel: &[C64], zeta: &[C64], theta: &[C64]) -> (Vec<C64>, Vec<C64>, f64, f64) {
        let g = &self.grid;
        let (u, w) = g.velocities(zeta_vel);
        let zx = g.deriv_x(zeta);
        let zz = g.deriv_z(zeta);
        let tx = g.deriv_x(theta);
        let tz = g.deriv_z(theta);
        let i = C64::new(0.0, 1.0);
        let pack = |a: &[C64], b: &[C64]| -> Vec<C64> { a.iter().zip(b).map(|(x, y)| x + i * y).collect() };
        let [cos_a, sin_a, cos_b, sin_b, prod] = &mut self.bufs;
        // cosine: u + i ζ_z, θ_z ; sine: w + i ζ_x, θ_x
        self.tf.synthesize(&pack(&u, &zz), ZBasis::Cosine, cos_a);
        self.tf.synthesize(&pack(&w, &zx), ZBasis::Sine, sin_a);
        self.tf.synthesize(&tz, ZBasis::Cosine, cos_b);
        self.tf.synthesize(&tx, ZBasis::Sine, sin_b);
        let mut max_u: f64 = 0.0;
        let mut max_w: f64 = 0.0;
        for p in 0..prod.len() {
            let (uu, zzv) = (cos_a[p].re, cos_a[p].im);
            let (ww, zxv) = (sin_a[p].re, sin_a[p].im);
            max_u = max_u.max(uu.abs());
            max_w = max_w.max(ww.abs());
            let nz = uu * zxv + ww * zzv;
            let nt = uu * sin_b[p].re + ww * cos_b[p].re;
            prod[p] = C64::new(nz, nt);
        }
        let mut packed = g.zeros();
        self.tf.analyze(prod, &mut packed);
        let (mut az, mut at) = (g.zeros(), g.zeros());
        self.tf.unpack(&packed, &mut az, &mut at);
        g.dealias(&mut az);
        g.dealias(&mut at);
        (az, at, max_u, max_w)
    }

    /// Explicitly treated tendencies: advection, buoyancy, background
    /// advection and nudging towards the observed truth.
    pub fn explicit_terms(
        &mut self,
        c: &RbcCoefficients,
        f: &RbcFields,
        nudging: Option<(&RbcNudge, &RbcFields)>,
    ) -> Explicit {
        let (adv_z, adv_t, max_u, max_w) = self.advection(f);
        let g = &self.grid;
        let mut ez = g.zeros();
        let mut et = g.zeros();
        let i = C64::new(0.0, 1.0);
        for s in 0..g.len() {
            if !g.kept[s] {
                continue;
            }
            let kx = g.kx[s / g.nz];
            let k2 = g.k2[s];
            // w = −∂x ψ = −i kx ζ/k²
            let w = -i * kx * f.zeta[s] / k2;
            ez[s] = -c.advection * adv_z[s] + c.buoy * i * kx * f.theta[s];
            et[s] = -c.advection * adv_t[s] + c.background * w;
        }
        if let Some((nudge, truth_obs)) = nudging {
            for s in g.observed_modes(nudge.n_obs) {
                ez[s] -= nudge.mu1 * (f.zeta[s] - truth_obs.zeta[s]);
                et[s] -= nudge.mu2 * (f.theta[s] - truth_obs.theta[s]);
            }
        }
        Explicit {
            zeta: ez,
            theta: et,
            max_u,
            max_w,
        }
    }

    /// Full tendencies `(ζ_t, θ_t)`.
    pub fn rhs(
        &mut self,
        c: &RbcCoefficients,
        f: &RbcFields,
        nudging: Option<(&RbcNudge, &RbcFields)>,
    ) -> Result<RbcFields> {
        let e = self.explicit_terms(c, f, nudging);
        let g = &self.grid;
        let mut out = RbcFields {
            zeta: e.zeta,
            theta: e.theta,
        };
        for s in 0..g.len() {
            out.zeta[s] -= c.visc * g.k2[s] * f.zeta[s];
            out.theta[s] -= c.kappa * g.k2[s] * f.theta[s];
        }
        g.dealias(&mut out.zeta);
        g.dealias(&mut out.theta);
        if !out.is_finite() {
            return Err(Error::Blowup { t: f64::NAN });
        }
        Ok(out)
    }

    pub fn cfl_number(&self, max_u: f64, max_w: f64, dt: f64) -> f64 {
        dt * (max_u / self.grid.dx() + max_w / self.grid.dz())
    }
}

/// Fields with the CNAB2 history of one system.
#[derive(Clone, Debug)]
pub struct ImexState {
    pub t: f64,
    pub fields: RbcFields,
    prev: Option<(Vec<C64>, Vec<C64>)>,
    /// Advective CFL number of the last step.
    pub last_cfl: f64,
}

impl ImexState {
    pub fn new(t: f64, fields: RbcFields) -> Self {
        ImexState {
            t,
            fields,
            prev: None,
            last_cfl: 0.0,
        }
    }

    /// Forget the explicit history; the next step is first order.
    pub fn restart(&mut self) {
        self.prev = None;
    }
}

/// One Crank–Nicolson / Adams–Bashforth-2 step (forward Euler for the
/// explicit part on the first step). Rejects the step if the advective CFL
/// number exceeds the limit.
pub fn imex_step(
    solver: &mut RbcSolver,
    c: &RbcCoefficients,
    state: &mut ImexState,
    dt: f64,
    nudging: Option<(&RbcNudge, &RbcFields)>,
) -> Result<()> {
    let e = solver.explicit_terms(c, &state.fields, nudging);
    let cfl = solver.cfl_number(e.max_u, e.max_w, dt);
    if cfl > CFL_LIMIT {
        return Err(Error::Cfl {
            t: state.t,
            dt,
            advisory_dt: 0.9 * dt * CFL_LIMIT / cfl,
        });
    }
    let g = &solver.grid;
    let f = &mut state.fields;
    for s in 0..g.len() {
        if !g.kept[s] {
            f.zeta[s] = C64::new(0.0, 0.0);
            f.theta[s] = C64::new(0.0, 0.0);
            continue;
        }
        let (ez, et) = match &state.prev {
            Some((pz, pt)) => (1.5 * e.zeta[s] - 0.5 * pz[s], 1.5 * e.theta[s] - 0.5 * pt[s]),
            None => (e.zeta[s], e.theta[s]),
        };
        let az = 0.5 * dt * c.visc * g.k2[s];
        let at = 0.5 * dt * c.kappa * g.k2[s];
        f.zeta[s] = ((1.0 - az) * f.zeta[s] + dt * ez) / (1.0 + az);
        f.theta[s] = ((1.0 - at) * f.theta[s] + dt * et) / (1.0 + at);
    }
    state.prev = Some((e.zeta, e.theta));
    state.t += dt;
    state.last_cfl = cfl;
    if !state.fields.is_finite() {
        return Err(Error::Blowup { t: state.t });
    }
    Ok(())
}

/// Small seeded temperature perturbation of the conductive state in the
/// lowest few modes.
pub fn seeded_perturbation(grid: &RbcGrid, seed: u64, amplitude: f64) -> RbcFields {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = RbcFields::zeros(grid);
    for ns in 0..=4isize {
        for m in 1..=4 {
            let c = if ns == 0 {
                C64::new(rng.gen_range(-1.0..1.0), 0.0)
            } else {
                C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            } * amplitude;
            f.theta[grid.idx(grid.n_index(ns), m)] = c;
            f.theta[grid.idx(grid.n_index(-ns), m)] = c.conj();
        }
    }
    f
}

/// Advances `state` to `t_end` without nudging. The step starts at `dt_max`,
/// shrinks to the advisory value whenever the CFL limit is hit and grows
/// back while the flow allows.
pub fn evolve(solver: &mut RbcSolver, c: &RbcCoefficients, state: &mut ImexState, t_end: f64, dt_max: f64) -> Result<()> {
    if !(dt_max > 0.0) {
        return Err(Error::config("maximum step must be positive"));
    }
    let mut dt = dt_max;
    while state.t < t_end - 1e-12 {
        let step = dt.min(t_end - state.t);
        match imex_step(solver, c, state, step, None) {
            Ok(()) => {
                if state.last_cfl < 0.25 * CFL_LIMIT && dt < dt_max {
                    dt = (1.25 * dt).min(dt_max);
                    state.restart();
                }
            }
            Err(Error::Cfl { advisory_dt, .. }) => {
                dt = advisory_dt;
                state.restart();
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Integrates a seeded perturbation of the conductive state to `t_end`.
pub fn spinup(params: &RbcParams, grid: &RbcGrid, t_end: f64, seed: u64, dt_max: f64) -> Result<RbcFields> {
    if !(t_end > 0.0) {
        return Err(Error::config("spin-up needs a positive end time"));
    }
    let mut solver = RbcSolver::new(grid.clone());
    let mut state = ImexState::new(0.0, seeded_perturbation(grid, seed, 1e-2));
    evolve(&mut solver, &params.coefficients(), &mut state, t_end, dt_max)?;
    Ok(state.fields)
}
