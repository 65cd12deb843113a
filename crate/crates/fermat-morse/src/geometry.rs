//! Chart-level differential geometry of the Randers Riemannian part alpha:
//! connection coefficients, curvature, the drift one-form eta and the
//! rotation operator Omega together with their directional derivatives.
//!
//! The alpha data is assembled from the scenario fields as
//!   alpha = g0~ + w w^T,     w = g0~ delta,     g0~ = g0 / beta,
//! and eta solves alpha eta = w. First derivatives of all of these are
//! analytic (chained through the field gradients); second-level objects
//! (curvature, derivatives of Omega) use one 4th-order finite-difference
//! level on top of analytic first derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::scenario::StationaryScenario;

/// Connection coefficients Gamma^k_{ij}, symmetric in (i, j).
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub n: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel { n, data: vec![0.0; n * n * n] }
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n + i) * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        self.data[(k * self.n + i) * self.n + j] = v;
    }

    /// Contraction Gamma^k_{ij} u^i v^j for each k.
    pub fn contract(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |k, _| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += self.get(k, i, j) * u[i] * v[j];
                }
            }
            s
        })
    }

    /// The matrix (Gamma(u))^k_j = Gamma^k_{ij} u^i acting on the second slot.
    pub fn contract_first(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |k, j| {
            let mut s = 0.0;
            for i in 0..n {
                s += self.get(k, i, j) * u[i];
            }
            s
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Curvature components R^i_{jkl} of alpha.
#[derive(Clone, Debug)]
pub struct Curvature {
    pub n: usize,
    data: Vec<f64>,
}

impl Curvature {
    pub fn zeros(n: usize) -> Self {
        Curvature { n, data: vec![0.0; n * n * n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[((i * self.n + j) * self.n + k) * self.n + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.data[((i * self.n + j) * self.n + k) * self.n + l] = v;
    }

    /// The vector R(u, v)w with components R^i_{jkl} w^j u^k v^l.
    pub fn apply(&self, u: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        s += self.get(i, j, k, l) * w[j] * u[k] * v[l];
                    }
                }
            }
            s
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn g0tilde(scn: &StationaryScenario, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let beta = scn.beta.value(x);
    if beta <= 0.0 {
        return Err(Error::InvalidScenario(format!("beta = {beta} <= 0")));
    }
    Ok(scn.g0.value(x) / beta)
}

pub fn g0tilde_grad(scn: &StationaryScenario, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let beta = scn.beta.value(x);
    let dbeta = scn.beta.grad(x);
    let g0 = scn.g0.value(x);
    let dg0 = scn.g0.grad(x);
    (0..x.len())
        .map(|k| &dg0[k] / beta - &g0 * (dbeta[k] / (beta * beta)))
        .collect()
}

/// The Randers covector w = g0~ delta (components of the one-form omega).
pub fn w_cov(scn: &StationaryScenario, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(g0tilde(scn, x)? * scn.delta.value(x))
}

pub fn w_cov_grad(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let gt = g0tilde(scn, x)?;
    let dgt = g0tilde_grad(scn, x);
    let delta = scn.delta.value(x);
    let ddelta = scn.delta.jacobian(x);
    Ok((0..x.len())
        .map(|k| &dgt[k] * &delta + &gt * ddelta.column(k))
        .collect())
}

/// The Riemannian part alpha = g0~ + w w^T.
pub fn alpha_mat(scn: &StationaryScenario, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let gt = g0tilde(scn, x)?;
    let w = &gt * scn.delta.value(x);
    Ok(gt + &w * w.transpose())
}

pub fn alpha_grad(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    let gt = g0tilde(scn, x)?;
    let dgt = g0tilde_grad(scn, x);
    let delta = scn.delta.value(x);
    let ddelta = scn.delta.jacobian(x);
    let w = &gt * &delta;
    Ok((0..x.len())
        .map(|k| {
            let dw = &dgt[k] * &delta + &gt * ddelta.column(k);
            &dgt[k] + &dw * w.transpose() + &w * dw.transpose()
        })
        .collect())
}

/// Shared evaluation chain: everything downstream of the field values at
/// one point, computed in one pass (field evaluations, one matrix inverse).
struct Chain {
    alpha: DMatrix<f64>,
    da: Vec<DMatrix<f64>>,
    ainv: DMatrix<f64>,
    gamma: Christoffel,
    dw: Vec<DVector<f64>>,
    w: DVector<f64>,
}

fn chain(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Chain> {
    let n = x.len();
    let beta = scn.beta.value(x);
    if beta <= 0.0 {
        return Err(Error::InvalidScenario(format!("beta = {beta} <= 0")));
    }
    let dbeta = scn.beta.grad(x);
    let g0 = scn.g0.value(x);
    let dg0 = scn.g0.grad(x);
    let delta = scn.delta.value(x);
    let ddelta = scn.delta.jacobian(x);
    let gt = &g0 / beta;
    let dgt: Vec<DMatrix<f64>> = (0..n)
        .map(|k| &dg0[k] / beta - &gt * (dbeta[k] / beta))
        .collect();
    let w = &gt * &delta;
    let dw: Vec<DVector<f64>> = (0..n)
        .map(|k| &dgt[k] * &delta + &gt * ddelta.column(k))
        .collect();
    let alpha = &gt + &w * w.transpose();
    let da: Vec<DMatrix<f64>> = (0..n)
        .map(|k| &dgt[k] + &dw[k] * w.transpose() + &w * dw[k].transpose())
        .collect();
    let ainv = alpha
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("alpha singular".into()))?;
    let mut gamma = Christoffel::zeros(n);
    for k in 0..n {
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for l in 0..n {
                    s += ainv[(k, l)] * (da[i][(l, j)] + da[j][(l, i)] - da[l][(i, j)]);
                }
                gamma.set(k, i, j, 0.5 * s);
                gamma.set(k, j, i, 0.5 * s);
            }
        }
    }
    Ok(Chain { alpha, da, ainv, gamma, dw, w })
}

impl Chain {
    fn eta(&self) -> DVector<f64> {
        &self.ainv * &self.w
    }

    fn eta_jacobian(&self) -> DMatrix<f64> {
        let n = self.w.len();
        let e = self.eta();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            out.set_column(k, &(&self.ainv * (&self.dw[k] - &self.da[k] * &e)));
        }
        out
    }

    fn omega(&self) -> DMatrix<f64> {
        let n = self.w.len();
        let e = self.eta();
        let de = self.eta_jacobian();
        // (nabla eta)^i_j = d_j eta^i + Gamma^i_{jm} eta^m
        let mut cov = de;
        for i in 0..n {
            for j in 0..n {
                for m in 0..n {
                    cov[(i, j)] += self.gamma.get(i, j, m) * e[m];
                }
            }
        }
        let adjoint = &self.ainv * cov.transpose() * &self.alpha;
        cov - adjoint
    }
}

/// Drift vector eta: the solution of alpha eta = w.
pub fn eta(scn: &StationaryScenario, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(chain(scn, x)?.eta())
}

/// Analytic Jacobian d eta^i / d x^k (k-th column is the derivative in the
/// k-th coordinate direction), from differentiating alpha eta = w.
pub fn eta_jacobian(scn: &StationaryScenario, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(chain(scn, x)?.eta_jacobian())
}

/// Levi-Civita connection coefficients of alpha at a chart point.
pub fn christoffel(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Christoffel> {
    Ok(chain(scn, x)?.gamma)
}

/// Curvature of alpha, assembled from finite differences of the analytic
/// connection coefficients.
pub fn curvature(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Curvature> {
    let n = x.len();
    let gamma = christoffel(scn, x)?;
    // dGamma[m] holds the partial derivative of Gamma in direction m.
    let mut dgamma: Vec<Christoffel> = Vec::with_capacity(n);
    for m in 0..n {
        let h = fd::step(x[m]);
        let eval = |t: f64| -> Result<Christoffel> {
            let mut xt = x.clone();
            xt[m] += t;
            christoffel(scn, &xt)
        };
        let g2p = eval(2.0 * h)?;
        let g1p = eval(h)?;
        let g1m = eval(-h)?;
        let g2m = eval(-2.0 * h)?;
        let mut d = Christoffel::zeros(n);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let v = (-g2p.get(k, i, j) + 8.0 * g1p.get(k, i, j) - 8.0 * g1m.get(k, i, j)
                        + g2m.get(k, i, j))
                        / (12.0 * h);
                    d.set(k, i, j, v);
                }
            }
        }
        dgamma.push(d);
    }
    let mut r = Curvature::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let mut v = dgamma[k].get(i, l, j) - dgamma[l].get(i, k, j);
                    for m in 0..n {
                        v += gamma.get(i, k, m) * gamma.get(m, l, j)
                            - gamma.get(i, l, m) * gamma.get(m, k, j);
                    }
                    r.set(i, j, k, l, v);
                }
            }
        }
    }
    Ok(r)
}

/// The rotation operator Omega = (nabla eta) - (nabla eta)^* where the
/// adjoint is taken with respect to alpha. Skew-symmetric for alpha.
pub fn omega_mat(scn: &StationaryScenario, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(chain(scn, x)?.omega())
}

/// Partial derivatives of Omega in each coordinate direction, by finite
/// differences of the analytic Omega field.
pub fn omega_grad(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let h = fd::step(x[m]);
        let eval = |t: f64| -> Result<DMatrix<f64>> {
            let mut xt = x.clone();
            xt[m] += t;
            omega_mat(scn, &xt)
        };
        let d = (-eval(2.0 * h)? + eval(h)? * 8.0 - eval(-h)? * 8.0 + eval(-2.0 * h)?)
            / (12.0 * h);
        out.push(d);
    }
    Ok(out)
}

/// Cached geometric data at one chart point, shared between the right-hand
/// sides that need several tensors at once.
pub struct GeomCache {
    pub alpha: DMatrix<f64>,
    pub gamma: Christoffel,
    pub omega: DMatrix<f64>,
    pub riemann: Option<Curvature>,
    pub omega_grad: Option<Vec<DMatrix<f64>>>,
    pub eta: Option<DVector<f64>>,
    pub eta_jac: Option<DMatrix<f64>>,
}

impl GeomCache {
    pub fn basic(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Self> {
        let ch = chain(scn, x)?;
        let omega = ch.omega();
        Ok(GeomCache {
            alpha: ch.alpha,
            gamma: ch.gamma,
            omega,
            riemann: None,
            omega_grad: None,
            eta: None,
            eta_jac: None,
        })
    }

    /// Everything the Jacobi systems need: adds curvature, Omega derivatives
    /// and the eta data.
    pub fn full(scn: &StationaryScenario, x: &DVector<f64>) -> Result<Self> {
        let ch = chain(scn, x)?;
        let omega = ch.omega();
        Ok(GeomCache {
            riemann: Some(curvature(scn, x)?),
            omega_grad: Some(omega_grad(scn, x)?),
            eta: Some(ch.eta()),
            eta_jac: Some(ch.eta_jacobian()),
            alpha: ch.alpha,
            gamma: ch.gamma,
            omega,
        })
    }

    /// Covariant directional derivative of Omega along J as a matrix:
    /// (nabla_J Omega)^i_j.
    pub fn nabla_omega(&self, j_vec: &DVector<f64>) -> DMatrix<f64> {
        let n = self.alpha.nrows();
        let domega = self.omega_grad.as_ref().expect("omega_grad not cached");
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            out += &domega[k] * j_vec[k];
        }
        // Connection correction: + Gamma(J) Omega - Omega Gamma(J)
        let gj = self.gamma.contract_first(j_vec);
        out += &gj * &self.omega - &self.omega * &gj;
        out
    }

    /// Covariant directional derivative of eta along J.
    pub fn nabla_eta(&self, j_vec: &DVector<f64>) -> DVector<f64> {
        let de = self.eta_jac.as_ref().expect("eta_jac not cached");
        let e = self.eta.as_ref().expect("eta not cached");
        de * j_vec + self.gamma.contract_first(j_vec) * e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::catalog;
    use nalgebra::dvector;

    #[test]
    fn flat_is_flat() {
        let scn = catalog::flat(2);
        let x = dvector![0.3, -1.1];
        assert!(christoffel(&scn, &x).unwrap().norm() < 1e-12);
        assert!(curvature(&scn, &x).unwrap().norm() < 1e-12);
        assert!(omega_mat(&scn, &x).unwrap().norm() < 1e-12);
    }

    #[test]
    fn constant_drift_is_flat() {
        let scn = catalog::flat_drift(dvector![0.4, -0.2]);
        let x = dvector![1.3, 0.1];
        assert!(christoffel(&scn, &x).unwrap().norm() < 1e-12);
        assert!(omega_mat(&scn, &x).unwrap().norm() < 1e-12);
    }

    #[test]
    fn g0tilde_scaling() {
        let mut scn = catalog::flat(2);
        scn.beta = crate::fields::ScalarField::constant(4.0);
        let g = g0tilde(&scn, &dvector![0.0, 0.0]).unwrap();
        assert!((g - DMatrix::identity(2, 2) * 0.25).norm() < 1e-14);
    }

    #[test]
    fn sphere_g0tilde_origin() {
        // Stereographic chart of the unit sphere at the chart center.
        let scn = catalog::sphere(1.0);
        let g = g0tilde(&scn, &dvector![0.0, 0.0]).unwrap();
        assert!((g - DMatrix::identity(2, 2) * 4.0).norm() < 1e-14);
    }

    #[test]
    fn christoffel_compatible_with_alpha() {
        // nabla alpha = 0: d_k alpha_ij = Gamma^m_{ki} alpha_mj + Gamma^m_{kj} alpha_im.
        let scn = catalog::sphere_drift(0.15);
        let x = dvector![0.4, -0.3];
        let da = alpha_grad(&scn, &x).unwrap();
        let a = alpha_mat(&scn, &x).unwrap();
        let gamma = christoffel(&scn, &x).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut rhs = 0.0;
                    for m in 0..2 {
                        rhs += gamma.get(m, k, i) * a[(m, j)] + gamma.get(m, k, j) * a[(i, m)];
                    }
                    assert!((da[k][(i, j)] - rhs).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sphere_sectional_curvature() {
        for rho in [1.0, 2.0] {
            let scn = catalog::sphere(rho);
            let x = dvector![0.3, 0.2];
            let a = alpha_mat(&scn, &x).unwrap();
            let r = curvature(&scn, &x).unwrap();
            // Orthonormalize a pair for alpha.
            let u = {
                let e = dvector![1.0, 0.0];
                let norm = (e.dot(&(&a * &e))).sqrt();
                e / norm
            };
            let v = {
                let mut e = dvector![0.0, 1.0];
                let proj = u.dot(&(&a * &e));
                e -= &u * proj;
                let norm = (e.dot(&(&a * &e))).sqrt();
                e / norm
            };
            let ruv = r.apply(&u, &v, &v);
            let sectional = u.dot(&(&a * &ruv));
            assert!(
                (sectional - 1.0 / (rho * rho)).abs() < 1e-6,
                "sectional {sectional} vs {}",
                1.0 / (rho * rho)
            );
        }
    }

    #[test]
    fn curvature_antisymmetry() {
        let scn = catalog::sphere_drift(0.2);
        let x = dvector![0.5, 0.1];
        let r = curvature(&scn, &x).unwrap();
        let u = dvector![0.3, -0.9];
        let v = dvector![1.1, 0.4];
        let w = dvector![-0.2, 0.8];
        let a = r.apply(&u, &v, &w);
        let b = r.apply(&v, &u, &w);
        assert!((a + b).norm() < 1e-8);
    }

    #[test]
    fn eta_jacobian_matches_fd() {
        let scn = catalog::sphere_drift(0.2);
        let x = dvector![0.4, -0.6];
        let de = eta_jacobian(&scn, &x).unwrap();
        for k in 0..2 {
            let h = fd::step(x[k]);
            let col = fd::d4_vec(
                |t| {
                    let mut xt = x.clone();
                    xt[k] += t;
                    eta(&scn, &xt).unwrap()
                },
                h,
            );
            assert!((de.column(k) - col).norm() < 1e-8);
        }
    }

    #[test]
    fn omega_skew_symmetric_for_alpha() {
        let scn = catalog::sphere_drift(0.2);
        let x = dvector![0.7, -0.2];
        let a = alpha_mat(&scn, &x).unwrap();
        let om = omega_mat(&scn, &x).unwrap();
        let u = dvector![0.6, 0.1];
        let v = dvector![-0.4, 0.9];
        let lhs = (&om * &u).dot(&(&a * &v));
        let rhs = -(u.dot(&(&a * (&om * &v))));
        assert!((lhs - rhs).abs() < 1e-8);
    }

    #[test]
    fn rotational_drift_omega_at_origin() {
        let eps = 0.07;
        let scn = catalog::flat_drift(dvector![0.0, 0.0]);
        let mut scn = scn;
        scn.delta = crate::fields::VectorField::rotation(eps);
        let om = omega_mat(&scn, &dvector![0.0, 0.0]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -2.0 * eps, 2.0 * eps, 0.0]);
        assert!((om - expected).norm() < 1e-9);
    }
}
