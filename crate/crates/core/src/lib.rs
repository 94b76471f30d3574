//! Ensemble optimal control of the Liouville (continuity) equation with
//! bilinear drift controls `u1(t) + x * u2(t)`.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

// Negated comparisons reject NaN; stencil loops read best indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod adjoint;
pub mod cli;
pub mod config;
pub mod drift;
pub mod error;
pub mod forward;
pub mod grid;
pub mod optimizer;
pub mod oracles;
pub mod real;
pub mod reduced;

pub use error::{Error, Result};
pub use real::Real;

pub type Grid = grid::GridSpec<f64>;
pub type Times = grid::TimeGrid<f64>;
pub type Field = grid::ScalarField<f64>;
pub type Control = drift::ControlPath<f64>;
pub type Bounds = drift::BoxBounds<f64>;
pub type Drift = drift::DriftSpec<f64>;
pub type Cost = drift::CostSpec<f64>;
