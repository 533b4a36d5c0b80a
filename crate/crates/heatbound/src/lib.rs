//! Finite element study harness for the heat equation with guaranteed
//! a posteriori error bounds in the energy norm.
//!
//! The library solves `∂_t u − Δu = f` with homogeneous Dirichlet conditions
//! by implicit Euler in time and conforming P1 elements in space (1D intervals
//! or 2D triangles), reconstructs the discrete solution in time three ways
//! (piecewise constant, continuous piecewise affine, and their midpoint), and
//! builds a patchwise equilibrated Raviart–Thomas–Nédélec flux whose
//! divergence balances the discrete residual exactly. From these it evaluates
//! the temporal jump and flux estimators, data-oscillation surrogates, exact
//! energy errors against manufactured solutions, and effectivity indices.
//!
//! A companion semi-discrete module treats single Fourier modes (scalar ODEs)
//! in closed form, where the Pythagoras/hypercircle identities between the
//! reconstructions hold exactly and the efficiency counterexample can be
//! swept over the mode parameter.
//!
//! The `heatbound` binary drives the studies; see the crate README.

pub mod equilibration;
pub mod estimators;
pub mod fem;
pub mod harness;
pub mod mesh;
pub(crate) mod par;
pub mod problem;
pub mod quadrature;
pub mod semidiscrete;
pub mod timestep;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("solver failure in {context}: residual {residual:.3e} after {iterations} iterations (tol {tol:.3e})")]
    SolveFailure {
        context: String,
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    /// Power iteration did not plateau; carries the last Rayleigh estimate.
    #[error("power iteration stagnated; last estimate {estimate:.6e}")]
    PowerIterationStagnated { estimate: f64 },

    /// An internal consistency check failed; signals a construction bug or a
    /// broken upstream solve, not bad user input.
    #[error("integrity check failed: {0}")]
    Integrity(String),

    /// Lookup of a named catalog entry failed.
    #[error("unknown problem {name:?}; available: {available}")]
    UnknownProblem { name: String, available: String },

    #[error("mesh format error: {0}")]
    MeshFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
