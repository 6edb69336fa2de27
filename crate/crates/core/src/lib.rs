//! Numerical toolkit for linear Poincaré flows of divergence-free vector
//! fields: integration, cocycles, spectra, domination tests and
//! certified perturbations.

// `!(x <= tol)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domination;
pub mod error;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod perturb;
pub mod poincare;
pub mod spectrum;
pub mod stats;
pub mod synthetic;
pub mod textio;
