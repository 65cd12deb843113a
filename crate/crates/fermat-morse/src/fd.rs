//! Finite-difference stencils used for derivative fallbacks and cross-checks.

use nalgebra::{DMatrix, DVector};

/// Step size heuristic for 4th-order central stencils at double precision.
pub fn step(coord: f64) -> f64 {
    1e-5 * (1.0 + coord.abs())
}

/// 4th-order central first derivative of a scalar-valued function.
pub fn d4_scalar(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// 4th-order central first derivative of a vector-valued function.
pub fn d4_vec(f: impl Fn(f64) -> DVector<f64>, h: f64) -> DVector<f64> {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// 4th-order central first derivative of a matrix-valued function.
pub fn d4_mat(f: impl Fn(f64) -> DMatrix<f64>, h: f64) -> DMatrix<f64> {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// 5-point central second derivative of a scalar function of one variable.
pub fn d2_5point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h)) / (12.0 * h * h)
}
