//! Green-function mass of positive elliptic operators `Δ_g + f` on
//! discretized conformally flat tori.
//!
//! The mass at the marked point `p` is the constant term of the Green
//! function after its singular part has been removed. It is computed by a
//! direct solve and, independently, by minimizing a quadratic functional.
//! Everything is discrete and exact where it can be: identities such as the
//! cut-off formula or the homothety law hold to rounding error.

// `!(x > 0.0)` rejects NaN along with the nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod expr;
pub mod family;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod manifold;
pub mod mass;
pub mod quadrature;
pub mod richardson;
pub mod solver;

pub use error::{MassError, Result};
pub use expr::Expr;
pub use grid::{ScalarField, TorusGrid};
pub use manifold::{assemble, build_metric, ConformalMetric, OperatorSpec, Potential};
