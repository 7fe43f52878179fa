//! Two-layer Lorenz 96 model with damping coefficients as unknowns.
//!
//! State layout: `u_0..u_{K-1}` followed by `v_{k,j}` at `K + k·J + (j-1)`
//! for `j = 1..J`. Unknown dampings enter as `λ·(−e_i e_iᵀ)`, so the
//! estimated value equals the positive damping itself.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::system::{
    dot, ElementaryDiagonal, LinearOperator, LinearOperatorSet, NudgeConfig, ObservationOperator, ParameterVector,
    StateVector, SystemModel,
};

#[derive(Clone, Debug, PartialEq)]
pub struct L96Params {
    /// Number of slow variables `K`.
    pub n_slow: usize,
    /// Fast variables per slow variable `J`.
    pub n_fast: usize,
    pub forcing: f64,
    pub d_slow: Vec<f64>,
    /// Row-major `K × J`.
    pub d_fast: Vec<f64>,
    /// Row-major `K × J`.
    pub gamma: Vec<f64>,
}

impl L96Params {
    pub fn dim(&self) -> usize {
        self.n_slow * (self.n_fast + 1)
    }

    /// Index of `v_{k,j}` in the state vector, `j` one-based.
    pub fn fast_index(&self, k: usize, j: usize) -> usize {
        self.n_slow + k * self.n_fast + (j - 1)
    }

    pub fn d_fast_at(&self, k: usize, j: usize) -> f64 {
        self.d_fast[k * self.n_fast + j - 1]
    }

    pub fn gamma_at(&self, k: usize, j: usize) -> f64 {
        self.gamma[k * self.n_fast + j - 1]
    }

    /// True damping value for a parameter slot.
    pub fn damping(&self, slot: ParamSlot) -> f64 {
        match slot {
            ParamSlot::Slow(k) => self.d_slow[k],
            ParamSlot::Fast(k, j) => self.d_fast_at(k, j),
        }
    }

    pub fn slot_index(&self, slot: ParamSlot) -> usize {
        match slot {
            ParamSlot::Slow(k) => k,
            ParamSlot::Fast(k, j) => self.fast_index(k, j),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slow < 4 || self.n_fast == 0 {
            return Err(Error::config("L96 needs at least 4 slow and 1 fast variable"));
        }
        let kj = self.n_slow * self.n_fast;
        if self.d_slow.len() != self.n_slow || self.d_fast.len() != kj || self.gamma.len() != kj {
            return Err(Error::config("L96 coefficient arrays have the wrong length"));
        }
        if self.d_slow.iter().chain(&self.d_fast).any(|d| !(*d > 0.0)) {
            return Err(Error::config("L96 damping coefficients must be positive"));
        }
        if !self.forcing.is_finite() || self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::config("L96 forcing and coupling must be finite"));
        }
        Ok(())
    }

    fn check_slot(&self, slot: ParamSlot) -> Result<()> {
        let ok = match slot {
            ParamSlot::Slow(k) => k < self.n_slow,
            ParamSlot::Fast(k, j) => k < self.n_slow && (1..=self.n_fast).contains(&j),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("parameter slot {slot} is out of range")))
        }
    }
}

/// Default coefficients with the cosine phase `2π(k+1)/divisor`.
/// The fast coupling uses the fast index in the phase so that all rows agree.
pub fn params_with_divisor(n_slow: usize, n_fast: usize, forcing: f64, divisor: f64) -> L96Params {
    let d_slow = (0..n_slow)
        .map(|k| 1.0 + 0.7 * (2.0 * PI * (k as f64 + 1.0) / divisor).cos())
        .collect();
    const D_FAST: [f64; 5] = [0.2, 0.5, 1.0, 2.0, 5.0];
    let fast_row: Vec<f64> = (1..=n_fast).map(|j| D_FAST[(j - 1) % D_FAST.len()]).collect();
    let gamma_row: Vec<f64> = (1..=n_fast)
        .map(|j| 0.1 + 0.25 * (2.0 * PI * j as f64 / divisor).cos())
        .collect();
    L96Params {
        n_slow,
        n_fast,
        forcing,
        d_slow,
        d_fast: fast_row.iter().copied().cycle().take(n_slow * n_fast).collect(),
        gamma: gamma_row.iter().copied().cycle().take(n_slow * n_fast).collect(),
    }
}

pub fn default_params() -> L96Params {
    params_with_divisor(40, 5, 5.0, 5.0)
}

/// An unknown damping coefficient: `d_k` or `d_{k,j}` (`j` one-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamSlot {
    Slow(usize),
    Fast(usize, usize),
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSlot::Slow(k) => write!(f, "d_{k}"),
            ParamSlot::Fast(k, j) => write!(f, "d_{k}_{j}"),
        }
    }
}

impl FromStr for ParamSlot {
    type Err = Error;

    /// Accepts `d_K` and `d_K_J`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse L96 parameter slot '{s}'"));
        let rest = s.trim().strip_prefix("d_").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split('_').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            [k] => Ok(ParamSlot::Slow(num(k)?)),
            [k, j] => Ok(ParamSlot::Fast(num(k)?, num(j)?)),
            _ => Err(bad()),
        }
    }
}

/// Observed fast pairs `(k, j)`; every slow variable is observed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct L96ObservationSpec {
    pub observed_fast: BTreeSet<(usize, usize)>,
}

impl L96ObservationSpec {
    pub fn slow_only() -> Self {
        Self::default()
    }

    pub fn validate(&self, params: &L96Params) -> Result<()> {
        for &(k, j) in &self.observed_fast {
            if k >= params.n_slow || !(1..=params.n_fast).contains(&j) {
                return Err(Error::config(format!("observed fast pair ({k}, {j}) is out of range")));
            }
        }
        Ok(())
    }

    pub fn operator(&self, params: &L96Params) -> Result<ObservationOperator> {
        self.validate(params)?;
        let mut mask = vec![false; params.dim()];
        mask[..params.n_slow].iter_mut().for_each(|m| *m = true);
        for &(k, j) in &self.observed_fast {
            mask[params.fast_index(k, j)] = true;
        }
        Ok(ObservationOperator::mask(mask))
    }
}

/// Right-hand side with the `unknowns` damping terms left out.
fn known_part(params: &L96Params, unknowns: &[ParamSlot]) -> impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static {
    let mut known_damping: Vec<f64> = params.d_slow.iter().chain(&params.d_fast).copied().collect();
    for &slot in unknowns {
        known_damping[params.slot_index(slot)] = 0.0;
    }
    let (nk, nj, forcing) = (params.n_slow, params.n_fast, params.forcing);
    let gamma = params.gamma.clone();
    move |x: &[f64], out: &mut [f64]| {
        let (u, v) = x.split_at(nk);
        let (out_u, out_v) = out.split_at_mut(nk);
        for k in 0..nk {
            let um1 = u[(k + nk - 1) % nk];
            let um2 = u[(k + nk - 2) % nk];
            let up1 = u[(k + 1) % nk];
            let vk = &v[k * nj..(k + 1) * nj];
            let gk = &gamma[k * nj..(k + 1) * nj];
            let coupling = dot(gk, vk);
            out_u[k] = um1 * (up1 - um2) + coupling * u[k] - known_damping[k] * u[k] + forcing;
            let uk2 = u[k] * u[k];
            for j in 0..nj {
                let i = k * nj + j;
                out_v[i] = -known_damping[nk + i] * vk[j] - gk[j] * uk2;
            }
        }
    }
}

/// Full right-hand side with every coefficient at its true value.
pub fn rhs(params: &L96Params, state: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    if state.len() != params.dim() {
        return Err(Error::config("state has the wrong dimension for these parameters"));
    }
    let mut out = vec![0.0; state.len()];
    known_part(params, &[])(state, &mut out);
    Ok(out)
}

/// The generic model for `params` with `unknowns` moved into linear
/// operators, and the true values of those unknowns.
pub fn build_model(
    params: &L96Params,
    obs: &L96ObservationSpec,
    unknowns: &[ParamSlot],
) -> Result<(SystemModel, ParameterVector)> {
    params.validate()?;
    obs.validate(params)?;
    let mut seen = BTreeSet::new();
    for &slot in unknowns {
        params.check_slot(slot)?;
        if !seen.insert(slot) {
            return Err(Error::config(format!("parameter slot {slot} listed twice")));
        }
        if let ParamSlot::Fast(k, j) = slot {
            if !obs.observed_fast.contains(&(k, j)) {
                return Err(Error::config(format!(
                    "unknown damping {slot} requires v_{{{k},{j}}} to be observed"
                )));
            }
        }
    }
    if unknowns.is_empty() {
        return Err(Error::config("at least one unknown damping is required"));
    }
    let dim = params.dim();
    let ops: Vec<Arc<dyn LinearOperator>> = unknowns
        .iter()
        .map(|&slot| {
            Arc::new(ElementaryDiagonal {
                dim,
                index: params.slot_index(slot),
                coeff: -1.0,
            }) as Arc<dyn LinearOperator>
        })
        .collect();
    let truth = ParameterVector::new(unknowns.iter().map(|&s| params.damping(s)).collect())?;
    let nonlinearity = known_part(params, unknowns);
    let model = SystemModel::new(dim, LinearOperatorSet::new(ops), Arc::new(nonlinearity))?;
    Ok((model, truth))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L96Bounds {
    pub d_star: f64,
    pub rho_star_sq: f64,
    pub gamma_norm_sq: f64,
    pub d_norm_sq: f64,
    pub rho_dot_star_sq: f64,
}

/// Absorbing-ball radius and time-derivative bound.
pub fn bounds(params: &L96Params) -> Result<L96Bounds> {
    params.validate()?;
    let d_star = params.d_slow.iter().chain(&params.d_fast).copied().fold(f64::INFINITY, f64::min);
    let rho_star_sq = 2.0 * params.n_slow as f64 * params.forcing.powi(2) / (d_star * d_star);
    let gamma_norm_sq = params.gamma[..params.n_fast].iter().map(|g| g * g).sum::<f64>();
    let d_norm_sq = params.d_slow.iter().chain(&params.d_fast).map(|d| d * d).sum::<f64>();
    let rho_dot_star_sq = 4.0 * ((1.0 + gamma_norm_sq) * rho_star_sq + d_norm_sq + gamma_norm_sq) * rho_star_sq;
    Ok(L96Bounds {
        d_star,
        rho_star_sq,
        gamma_norm_sq,
        d_norm_sq,
        rho_dot_star_sq,
    })
}

/// `½ d/dt(‖u‖² + ‖v‖²)` evaluated from the right-hand side and from the
/// closed-form balance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyBalance {
    pub from_rhs: f64,
    pub from_balance: f64,
    pub residual: f64,
}

pub fn energy_residual(params: &L96Params, state: &[f64]) -> Result<EnergyBalance> {
    if state.len() != params.dim() {
        return Err(Error::config("state has the wrong dimension for these parameters"));
    }
    let from_rhs = dot(state, &rhs(params, state)?);
    let (u, v) = state.split_at(params.n_slow);
    let from_balance = -params.d_slow.iter().zip(u).map(|(d, x)| d * x * x).sum::<f64>()
        - params.d_fast.iter().zip(v).map(|(d, x)| d * x * x).sum::<f64>()
        + params.forcing * u.iter().sum::<f64>();
    Ok(EnergyBalance {
        from_rhs,
        from_balance,
        residual: from_rhs - from_balance,
    })
}

/// Share of the state that is observed when all slow variables and
/// `n_fast_observed` fast ones are.
pub fn observed_fraction(n_slow: usize, n_fast: usize, n_fast_observed: usize) -> f64 {
    (n_slow + n_fast_observed) as f64 / (n_slow * (n_fast + 1)) as f64
}

/// One of the sufficient nudging conditions and whether it holds.
#[derive(Clone, Debug, PartialEq)]
pub struct MuCondition {
    pub name: &'static str,
    pub holds: bool,
    /// Left minus right side of the inequality at its tightest point.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtaBounds {
    pub eta_star: f64,
    pub eta_dot_star: f64,
    /// Smallest gain over observed components.
    pub mu_star: f64,
    pub conditions: Vec<MuCondition>,
}

impl EtaBounds {
    pub fn all_hold(&self) -> bool {
        self.conditions.iter().all(|c| c.holds)
    }
}

/// Error-bound constants and the sufficient conditions on the nudging
/// gains for a model-error radius `delta`.
pub fn bound_eta(
    params: &L96Params,
    obs: &L96ObservationSpec,
    nudge: &NudgeConfig,
    delta: f64,
) -> Result<EtaBounds> {
    if !(delta >= 0.0) {
        return Err(Error::config("model-error radius must be nonnegative"));
    }
    let b = bounds(params)?;
    let op = obs.operator(params)?;
    if nudge.gains().len() != params.dim() {
        return Err(Error::config("nudging gains have the wrong dimension"));
    }
    let gains = nudge.gains();
    let (nk, nj) = (params.n_slow, params.n_fast);
    let rho = b.rho_star_sq.sqrt();
    let gnorm = b.gamma_norm_sq.sqrt();
    let eta_sq = 2.0 * b.rho_star_sq / b.d_star;
    let mu_star = nudge.mu_min(&op);

    let gamma_margin = (0..nk)
        .map(|k| {
            let dmin = (1..=nj).map(|j| params.d_fast_at(k, j)).fold(f64::INFINITY, f64::min);
            gains[k] - b.gamma_norm_sq * b.rho_star_sq / dmin
        })
        .fold(f64::INFINITY, f64::min);
    let ball_rhs = 4.0 * delta + 2.0 * (2.0 + (nk as f64 + 1.0) * gnorm) * rho;
    let ball_margin = gains[..nk].iter().map(|m| m - ball_rhs).fold(f64::INFINITY, f64::min);
    let fast_margin = obs
        .observed_fast
        .iter()
        .map(|&(k, j)| gains[params.fast_index(k, j)] - 2.0 * delta)
        .fold(f64::INFINITY, f64::min);
    let dot_a_margin = mu_star - 2.0 * delta;
    let m = mu_star;
    let cubic_rhs = 16.0 * (4.0 + gnorm) * rho / 3.0 * m * m
        + 16.0 * eta_sq.sqrt() * delta * m.powf(1.5)
        + 64.0 * b.gamma_norm_sq * (eta_sq * delta * delta / (3.0 * b.d_star) + b.rho_star_sq) * m
        + 8.0 * b.gamma_norm_sq * eta_sq * (32.0 * delta * delta / 3.0 + 1.0);
    let dot_b_margin = m.powi(3) - cubic_rhs;

    let eta_dot_sq = 4.0 * b.rho_dot_star_sq / b.d_star
        * (2.0 * eta_sq * (16.0 + 5.0 * b.gamma_norm_sq) / mu_star
            + 4.0 * b.gamma_norm_sq * eta_sq / b.d_star
            + 4.0 * b.rho_dot_star_sq
            + 1.0);

    let cond = |name, margin: f64| MuCondition {
        name,
        holds: margin >= 0.0,
        margin,
    };
    Ok(EtaBounds {
        eta_star: eta_sq.sqrt(),
        eta_dot_star: eta_dot_sq.sqrt(),
        mu_star,
        conditions: vec![
            cond("slow_gain_coupling", gamma_margin),
            cond("slow_gain_ball", ball_margin),
            cond("fast_gain", fast_margin),
            cond("mu_dot_a", dot_a_margin),
            cond("mu_dot_b", dot_b_margin),
        ],
    })
}

/// Entries i.i.d. uniform on `[0, 1)` from a seeded generator.
pub fn random_init(params: &L96Params, seed: u64) -> StateVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..params.dim()).map(|_| rng.gen::<f64>()).collect();
    StateVector::new(v).expect("uniform samples are finite")
}

/// The first `n` slow dampings.
pub fn first_slow_slots(n: usize) -> Vec<ParamSlot> {
    (0..n).map(ParamSlot::Slow).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn defaults() {
        let p = default_params();
        assert_eq!(p.dim(), 240);
        assert_eq!(p.forcing, 5.0);
        assert!((p.d_slow[4] - 1.7).abs() < 1e-15);
        let b = bounds(&p).unwrap();
        assert_eq!(b.d_star, 0.2);
        assert!((b.rho_star_sq - 50000.0).abs() < 50000.0 * 1e-12);
        let slow_min = p.d_slow.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((slow_min - (1.0 + 0.7 * (4.0 * PI / 5.0).cos())).abs() < 1e-15);
        for k in 1..p.n_slow {
            assert_eq!(p.gamma[k * 5..k * 5 + 5], p.gamma[..5]);
        }
    }

    #[test]
    fn rho_scaling_and_zero_forcing() {
        let mut p = default_params();
        let base = bounds(&p).unwrap().rho_star_sq;
        p.forcing = 10.0;
        assert!((bounds(&p).unwrap().rho_star_sq - 4.0 * base).abs() < 1e-9);
        p.forcing = 0.0;
        assert_eq!(bounds(&p).unwrap().rho_star_sq, 0.0);
        p.d_fast[3] = 0.0;
        assert!(bounds(&p).is_err());
    }

    #[test]
    fn zero_and_uniform_states() {
        let p = default_params();
        let (m, truth) = build_model(&p, &L96ObservationSpec::slow_only(), &first_slow_slots(3)).unwrap();
        let mut out = vec![0.0; 240];
        let mut scratch = vec![0.0; 240];
        m.rhs_into(&truth, &vec![0.0; 240], &mut out, &mut scratch);
        assert!(out[..40].iter().all(|&x| x == 5.0));
        assert!(out[40..].iter().all(|&x| x == 0.0));

        let c = 0.8;
        let mut x = vec![0.0; 240];
        x[..40].iter_mut().for_each(|u| *u = c);
        m.rhs_into(&truth, &x, &mut out, &mut scratch);
        for k in 0..40 {
            assert!((out[k] - (-p.d_slow[k] * c + 5.0)).abs() < 1e-14);
            for j in 1..=5 {
                assert!((out[p.fast_index(k, j)] + p.gamma_at(k, j) * c * c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknowns_match_known_model() {
        let p = default_params();
        let mut obs = L96ObservationSpec::slow_only();
        obs.observed_fast.insert((2, 3));
        let slots = [ParamSlot::Slow(0), ParamSlot::Slow(7), ParamSlot::Fast(2, 3)];
        let (m, truth) = build_model(&p, &obs, &slots).unwrap();
        assert_eq!(truth.as_slice(), &[p.d_slow[0], p.d_slow[7], p.d_fast_at(2, 3)]);
        let x = random_init(&p, 3);
        let mut a = vec![0.0; 240];
        let mut b = vec![0.0; 240];
        let mut s = vec![0.0; 240];
        a.copy_from_slice(&rhs(&p, &x).unwrap());
        m.rhs_into(&truth, &x, &mut b, &mut s);
        for i in 0..240 {
            assert!((a[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn unobserved_fast_unknown_rejected() {
        let p = default_params();
        let err = build_model(&p, &L96ObservationSpec::slow_only(), &[ParamSlot::Fast(0, 1)]);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(build_model(&p, &L96ObservationSpec::slow_only(), &[ParamSlot::Slow(40)]).is_err());
        assert!(build_model(&p, &L96ObservationSpec::slow_only(), &[ParamSlot::Slow(1), ParamSlot::Slow(1)]).is_err());
    }

    #[test]
    fn energy_identity() {
        let p = default_params();
        let zero = energy_residual(&p, &vec![0.0; 240]).unwrap();
        assert_eq!((zero.from_rhs, zero.from_balance, zero.residual), (0.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let mut x: Vec<f64> = (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if trial % 2 == 0 {
                x[40..].iter_mut().for_each(|v| *v = 0.0);
            }
            let e = energy_residual(&p, &x).unwrap();
            let scale = e.from_rhs.abs().max(e.from_balance.abs());
            assert!(e.residual.abs() <= 1e-12 * scale, "{e:?}");
        }
    }

    #[test]
    fn fractions() {
        assert!((observed_fraction(40, 2, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((observed_fraction(40, 5, 0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(observed_fraction(40, 5, 200), 1.0);
    }

    #[test]
    fn eta_conditions() {
        let p = default_params();
        let obs = L96ObservationSpec::slow_only();
        let op = obs.operator(&p).unwrap();
        let nudge = NudgeConfig::uniform(50.0, &op).unwrap();
        let eb = bound_eta(&p, &obs, &nudge, 0.0).unwrap();
        let fast = eb.conditions.iter().find(|c| c.name == "fast_gain").unwrap();
        assert!(fast.holds);
        assert_eq!(eb.mu_star, 50.0);
        assert!((eb.eta_star.powi(2) - 2.0 * 50000.0 / 0.2).abs() < 1e-6);
        assert!(!eb.all_hold());

        let mut obs2 = obs.clone();
        obs2.observed_fast.insert((0, 1));
        let op2 = obs2.operator(&p).unwrap();
        for delta in [0.0, 0.1, 10.0] {
            let mut mu = 0.01;
            let mut prev: Option<Vec<bool>> = None;
            while mu < 1e9 {
                let n = NudgeConfig::uniform(mu, &op2).unwrap();
                let flags: Vec<bool> =
                    bound_eta(&p, &obs2, &n, delta).unwrap().conditions.iter().map(|c| c.holds).collect();
                if let Some(prev) = prev {
                    for (a, b) in prev.iter().zip(&flags) {
                        assert!(!a || *b, "condition flipped at mu = {mu}");
                    }
                }
                prev = Some(flags);
                mu *= 2.0;
            }
            assert!(prev.unwrap().iter().all(|&h| h));
        }
    }

    #[test]
    fn random_init_properties() {
        let p = default_params();
        let a = random_init(&p, 42);
        assert_eq!(a, random_init(&p, 42));
        assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
        let b = random_init(&p, 43);
        let differ = a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 > 0.9 * 240.0);
    }

    #[test]
    fn slot_names() {
        assert_eq!("d_3".parse::<ParamSlot>().unwrap(), ParamSlot::Slow(3));
        assert_eq!("d_3_2".parse::<ParamSlot>().unwrap(), ParamSlot::Fast(3, 2));
        assert_eq!(ParamSlot::Fast(3, 2).to_string(), "d_3_2");
        assert!("x_3".parse::<ParamSlot>().is_err());
    }
}
