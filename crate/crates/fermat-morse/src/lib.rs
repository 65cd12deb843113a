//! Fermat-metric geodesic and Morse-index toolkit for stationary scenarios.
//!
//! A stationary scenario (spatial metric g0, drift delta, lapse beta on a
//! chart atlas) determines a Randers metric F on the base. This crate
//! integrates F-geodesics, solves two-point connection problems, computes
//! conjugate instants and Morse indices through Jacobi fields and through a
//! discretized index form, lifts geodesics to lightlike and timelike curves
//! of the corresponding stationary spacetime, and checks Morse relations of
//! the resulting geodesic catalogs.

pub mod bridge;
pub mod chart;
pub mod cli;
pub mod error;
pub mod fd;
pub mod fields;
pub mod geodesic;
pub mod geometry;
pub mod hessian;
pub mod jacobi;
pub mod morse;
pub mod ode;
pub mod randers;
pub mod report;
pub mod scenario;
pub mod shooting;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}

pub use chart::{ChartPoint, Manifold};
pub use error::{Error, Result};
pub use scenario::{extend_static, StationaryScenario};
