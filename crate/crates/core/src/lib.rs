//! Numerical laboratory for Ricci flow on warped products `N ×_f F` over a
//! circle base.

pub mod conjugate;
pub mod error;
pub mod fixtures;
pub mod flow;
pub mod functionals;
pub mod geometry;
pub mod grid;
pub mod harnack;
pub mod io;
pub mod pipeline;
pub mod reduced;
pub mod scenario;
pub mod tridiag;

pub use error::{Error, Result};
pub use geometry::{Gauge, WarpedGeometry};
pub use grid::Grid1D;
