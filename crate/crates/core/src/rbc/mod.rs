//! Two-dimensional Rayleigh–Bénard convection between free-slip walls,
//! in vorticity–streamfunction form on a Fourier × sine basis.

pub mod estimate;
pub mod grid;
pub mod snapshot;
pub mod solver;
pub mod twin;

pub use estimate::{rls_pr_ra_assemble, rls_pr_ra_solve, rls_pr_ra_update, rni_plus_ra_pr_update, rni_ra_pr_update, RbcRlsSystem};
pub use grid::{RbcGrid, Transforms, ZBasis, C64};
pub use solver::{
    evolve, imex_step, seeded_perturbation, spinup, ImexState, RbcCoefficients, RbcFields, RbcForm, RbcNudge, RbcParams,
    RbcSolver,
};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot};
pub use twin::{stable_dt, RbcTwin};
