//! Nonlinear eigenvalue problems `(A - μ)ψ - εf(ψ) = 0` on finite-difference
//! grids: eigentriples, a Lyapunov–Schmidt fixed-point solver, antilinear
//! symmetry checks and Newton continuation of solution branches.

// `!(x > 0.0)` is used deliberately so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// A failed branch carries its partial points; failures are rare and not hot.
#![allow(clippy::result_large_err)]

pub mod continuation;
pub mod error;
pub mod grid;
pub mod gridfn;
pub mod linalg;
pub mod ls_solver;
pub mod models;
pub mod nonlinearity;
pub mod sparse;
pub mod spectra;
pub mod symmetry;

pub use error::{Error, Result};
pub use num_complex::Complex64 as c64;
