//! Controlled double integral equations of Fredholm and Volterra type on
//! trapezoid grids: state and costate solvers, gradients, second variations
//! and sufficiency checks.

mod engine;
pub mod accessory;
pub mod bilinear;
pub mod error;
pub mod fredholm;
pub mod lqc;
pub mod multiarray;
pub mod optimizer;
pub mod presets;
pub mod problem;
pub mod quadrature;
pub mod volterra;

pub use error::{Error, Result};
pub use problem::{CoField, Control, Family, Field, Kernel, PairKernel, Problem};
pub use quadrature::{build_box_grid, build_grid, Grid, GridKind};
pub use accessory::{AccessoryData, PDReport, QuadIntegralForm, SecondVariationReport, Verdict};
pub use engine::{SolverOptions, StateDiagnostics};
