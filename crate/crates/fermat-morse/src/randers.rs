//! The Fermat metric of a stationary scenario in Randers form
//!   F(x, y) = sqrt(alpha(x)[y, y]) + omega(x)[y]
//! with alpha and the one-form omega assembled in `geometry`. This module
//! provides F, F^2 and all first and second derivatives of F^2 needed by the
//! Euler-Lagrange flow and the discrete Hessian.
//!
//! First derivatives and the y-Hessian (the fundamental tensor) are closed
//! form. Mixed and second x-derivatives apply one finite-difference level to
//! the analytic first derivatives, which keeps their error near 1e-10 instead
//! of the 1e-5 a nested difference would give.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::fd;
use crate::geometry;
use crate::scenario::StationaryScenario;

/// Randers data at a fixed point: alpha and the covector w with their
/// analytic first derivatives.
pub struct RandersPoint {
    pub alpha: DMatrix<f64>,
    pub w: DVector<f64>,
    pub dalpha: Vec<DMatrix<f64>>,
    pub dw: Vec<DVector<f64>>,
}

impl RandersPoint {
    pub fn at(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Self> {
        Ok(RandersPoint {
            alpha: geometry::alpha_mat(scn, x)?,
            w: geometry::w_cov(scn, x)?,
            dalpha: geometry::alpha_grad(scn, x)?,
            dw: geometry::w_cov_grad(scn, x)?,
        })
    }

    /// F(x, y). Positive for every y != 0 because alpha[eta, eta] < 1.
    pub fn f(&self, y: &DVector<f64>) -> f64 {
        let a = y.dot(&(&self.alpha * y)).sqrt();
        a + self.w.dot(y)
    }

    pub fn f2(&self, y: &DVector<f64>) -> f64 {
        let f = self.f(y);
        f * f
    }

    /// Gradient of F^2 in y: 2 F (alpha y / A + w) with A = sqrt(alpha[y, y]).
    pub fn f2_y(&self, y: &DVector<f64>) -> DVector<f64> {
        let u = &self.alpha * y;
        let a = y.dot(&u).sqrt();
        let f = a + self.w.dot(y);
        (u / a + &self.w) * (2.0 * f)
    }

    /// Gradient of F^2 in x, using the analytic field derivatives:
    /// (F^2)_{x_k} = 2 F (d_k alpha[y, y] / (2A) + (d_k w) . y).
    pub fn f2_x(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = y.len();
        let u = &self.alpha * y;
        let a = y.dot(&u).sqrt();
        let f = a + self.w.dot(y);
        DVector::from_fn(n, |k, _| {
            let da_yy = y.dot(&(&self.dalpha[k] * y));
            2.0 * f * (da_yy / (2.0 * a) + self.dw[k].dot(y))
        })
    }

    /// The fundamental tensor g_ij(x, y) = (1/2) (F^2)_{y_i y_j}:
    ///   g = alpha (1 + b/A) - b u u^T / A^3 + (u w^T + w u^T)/A + w w^T
    /// with u = alpha y, A = sqrt(y^T u), b = w . y. Satisfies
    /// F^2 = g[y, y] by homogeneity.
    pub fn fundamental_tensor(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let u = &self.alpha * y;
        let a = y.dot(&u).sqrt();
        let b = self.w.dot(y);
        let mut g = &self.alpha * (1.0 + b / a);
        g -= (&u * u.transpose()) * (b / (a * a * a));
        g += (&u * self.w.transpose() + &self.w * u.transpose()) / a;
        g += &self.w * self.w.transpose();
        g
    }

    pub fn f2_yy(&self, y: &DVector<f64>) -> DMatrix<f64> {
        self.fundamental_tensor(y) * 2.0
    }
}

pub fn f_value(scn: &StationaryScenario, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(RandersPoint::at(scn, x)?.f(y))
}

/// Mixed second derivative matrix M_{ik} = d^2 F^2 / (d y_i d x_k): one
/// finite-difference level in x applied to the analytic y-gradient.
pub fn f2_yx(scn: &StationaryScenario, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = fd::step(x[k]);
        let col = fd_vec_x(scn, x, k, h, |p| p.f2_y(y))?;
        out.set_column(k, &col);
    }
    Ok(out)
}

/// Second derivative matrix H_{kl} = d^2 F^2 / (d x_k d x_l), by one
/// finite-difference level on the analytic x-gradient.
pub fn f2_xx(scn: &StationaryScenario, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = fd::step(x[k]);
        let col = fd_vec_x(scn, x, k, h, |p| p.f2_x(y))?;
        out.set_column(k, &col);
    }
    // Symmetrize: mixed partials commute, the difference is FD noise.
    Ok((&out + out.transpose()) * 0.5)
}

fn fd_vec_x(
    scn: &StationaryScenario,
    x: &DVector<f64>,
    k: usize,
    h: f64,
    f: impl Fn(&RandersPoint) -> DVector<f64>,
) -> Result<DVector<f64>> {
    let eval = |t: f64| -> Result<DVector<f64>> {
        let mut xt = x.clone();
        xt[k] += t;
        Ok(f(&RandersPoint::at(scn, &xt)?))
    };
    Ok(
        (-eval(2.0 * h)? + eval(h)? * 8.0 - eval(-h)? * 8.0 + eval(-2.0 * h)?)
            / (12.0 * h),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::catalog;
    use nalgebra::dvector;

    fn drifted() -> StationaryScenario {
        let mut scn = catalog::sphere_drift(0.2);
        scn.beta = crate::fields::ScalarField::constant(1.0);
        scn
    }

    #[test]
    fn flat_f_is_euclidean_norm() {
        let scn = catalog::flat(2);
        let p = RandersPoint::at(&scn, &dvector![0.3, 0.4]).unwrap();
        let y = dvector![3.0, 4.0];
        assert!((p.f(&y) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn constant_drift_closed_form() {
        // For g0 = I, beta = 1, delta = (d, 0):
        // F = sqrt(|y|^2 + (d y1)^2) + d y1.
        let d = 0.3;
        let scn = catalog::flat_drift(dvector![d, 0.0]);
        let p = RandersPoint::at(&scn, &dvector![0.0, 0.0]).unwrap();
        let y = dvector![1.0, 2.0];
        let expect = (y.norm_squared() + (d * y[0]).powi(2)).sqrt() + d * y[0];
        assert!((p.f(&y) - expect).abs() < 1e-14);
        // Reversed direction uses the reversed metric value.
        let rev = (y.norm_squared() + (d * y[0]).powi(2)).sqrt() - d * y[0];
        assert!((p.f(&(-y)) - rev).abs() < 1e-14);
    }

    #[test]
    fn f2_y_matches_fd() {
        let scn = drifted();
        let x = dvector![0.4, -0.2];
        let y = dvector![0.7, 1.1];
        let p = RandersPoint::at(&scn, &x).unwrap();
        let grad = p.f2_y(&y);
        for i in 0..2 {
            let g = fd::d4_scalar(
                |t| {
                    let mut yt = y.clone();
                    yt[i] += t;
                    p.f2(&yt)
                },
                1e-5,
            );
            assert!((grad[i] - g).abs() < 1e-8);
        }
    }

    #[test]
    fn f2_x_matches_fd() {
        let scn = drifted();
        let x = dvector![0.4, -0.2];
        let y = dvector![0.7, 1.1];
        let grad = RandersPoint::at(&scn, &x).unwrap().f2_x(&y);
        for k in 0..2 {
            let g = fd::d4_scalar(
                |t| {
                    let mut xt = x.clone();
                    xt[k] += t;
                    RandersPoint::at(&scn, &xt).unwrap().f2(&y)
                },
                fd::step(x[k]),
            );
            assert!((grad[k] - g).abs() < 1e-8, "k = {k}: {} vs {}", grad[k], g);
        }
    }

    #[test]
    fn fundamental_tensor_is_y_hessian_and_recovers_f2() {
        let scn = drifted();
        let x = dvector![0.4, -0.2];
        let y = dvector![0.7, 1.1];
        let p = RandersPoint::at(&scn, &x).unwrap();
        let g = p.fundamental_tensor(&y);
        // Euler homogeneity: g[y, y] = F^2 and g y = (1/2)(F^2)_y.
        assert!((y.dot(&(&g * &y)) - p.f2(&y)).abs() < 1e-12);
        assert!(((&g * &y) * 2.0 - p.f2_y(&y)).norm() < 1e-12);
        // Against finite differences of the y-gradient.
        for j in 0..2 {
            let col = fd::d4_vec(
                |t| {
                    let mut yt = y.clone();
                    yt[j] += t;
                    p.f2_y(&yt)
                },
                1e-5,
            );
            assert!((g.column(j) * 2.0 - col).norm() < 1e-8);
        }
        // Positive definite.
        assert!(g.cholesky().is_some());
    }

    #[test]
    fn homogeneity_degree_one() {
        let scn = drifted();
        let p = RandersPoint::at(&scn, &dvector![0.1, 0.9]).unwrap();
        let y = dvector![-0.4, 0.8];
        for lam in [0.5, 2.0, 7.3] {
            assert!((p.f(&(&y * lam)) - lam * p.f(&y)).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_derivative_consistency() {
        // d/dx of (F^2)_y equals d/dy of (F^2)_x.
        let scn = drifted();
        let x = dvector![0.4, -0.2];
        let y = dvector![0.7, 1.1];
        let yx = f2_yx(&scn, &x, &y).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                let v = fd::d4_scalar(
                    |t| {
                        let mut yt = y.clone();
                        yt[i] += t;
                        RandersPoint::at(&scn, &x).unwrap().f2_x(&yt)[k]
                    },
                    1e-5,
                );
                assert!((yx[(i, k)] - v).abs() < 1e-7);
            }
        }
    }
}
