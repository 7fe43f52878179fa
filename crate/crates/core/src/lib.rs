//! Simultaneous state reconstruction and parameter estimation for
//! dissipative systems by nudging (continuous data assimilation).
//!
//! The generic machinery works on any parameter-linear model
//! `du/dt = Σ λ_k L_k u + F(u)` ([`system`]); the [`estimators`] module
//! implements the relaxation Newton iteration (RNI), its refined variant
//! (RNI+) and relaxation least squares (RLS). Two testbeds are provided:
//! the two-layer Lorenz 96 model ([`l96`]) and 2D Rayleigh–Bénard
//! convection in vorticity form ([`rbc`]).

pub mod error;
pub mod estimators;
pub mod harness;
pub mod integrate;
pub mod l96;
pub mod rbc;
pub mod system;

pub use error::{Error, Result};
