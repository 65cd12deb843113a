//! Catalog of metric, drift and scalar fields with analytic gradients and a
//! finite-difference fallback.
//!
//! Every field evaluates a value and a gradient (one matrix/vector/scalar per
//! coordinate direction). The analytic gradients are the production path; the
//! finite-difference mode exists so analytic formulas can be cross-checked.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    #[default]
    Analytic,
    FiniteDifference,
}

/// Symmetric matrix field used for the spatial metric g0.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MatrixFieldKind {
    Constant { matrix: Vec<Vec<f64>> },
    /// Round metric of the sphere of the given radius in stereographic
    /// coordinates: `4 r^4 / (r^2 + |x|^2)^2 * I`.
    RoundSphere { radius: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixField {
    #[serde(flatten)]
    pub kind: MatrixFieldKind,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
    /// Set when the field has been lifted to an extended base `M0 x R`.
    #[serde(skip)]
    pub extended: usize,
}

/// Vector field used for the drift delta.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VectorFieldKind {
    Constant { vector: Vec<f64> },
    /// `eps * (-x2, x1)`; on the sphere atlas this is the rotation generator
    /// about the polar axis and takes the same form in both charts.
    Rotation { eps: f64 },
    /// Gaussian bump times a fixed direction:
    /// `amplitude * exp(-|x - center|^2 / width^2) * direction`.
    RadialBump {
        amplitude: f64,
        width: f64,
        center: Vec<f64>,
        direction: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VectorField {
    #[serde(flatten)]
    pub kind: VectorFieldKind,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
    #[serde(skip)]
    pub extended: usize,
}

/// Positive scalar field used for beta.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScalarFieldKind {
    Constant { value: f64 },
    /// `base + amplitude * exp(-|x - center|^2 / width^2)`.
    RadialBump {
        base: f64,
        amplitude: f64,
        width: f64,
        center: Vec<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalarField {
    #[serde(flatten)]
    pub kind: ScalarFieldKind,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
    #[serde(skip)]
    pub extended: usize,
}

fn gaussian(x: &DVector<f64>, center: &[f64], width: f64) -> (f64, DVector<f64>) {
    let n = center.len();
    let mut d2 = 0.0;
    let mut diff = DVector::zeros(n);
    for i in 0..n {
        diff[i] = x[i] - center[i];
        d2 += diff[i] * diff[i];
    }
    let e = (-d2 / (width * width)).exp();
    let grad = diff * (-2.0 / (width * width) * e);
    (e, grad)
}

impl MatrixField {
    pub fn constant(m: DMatrix<f64>) -> Self {
        let matrix = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        MatrixField {
            kind: MatrixFieldKind::Constant { matrix },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn round_sphere(radius: f64) -> Self {
        MatrixField {
            kind: MatrixFieldKind::RoundSphere { radius },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        }
    }

    fn base_dim(&self, n: usize) -> usize {
        n - self.extended
    }

    fn base_value(&self, x: &DVector<f64>, b: usize) -> DMatrix<f64> {
        match &self.kind {
            MatrixFieldKind::Constant { matrix } => {
                DMatrix::from_fn(b, b, |i, j| matrix[i][j])
            }
            MatrixFieldKind::RoundSphere { radius } => {
                let r2 = radius * radius;
                let mut s = 0.0;
                for i in 0..b {
                    s += x[i] * x[i];
                }
                let lam = 4.0 * r2 * r2 / ((r2 + s) * (r2 + s));
                DMatrix::identity(b, b) * lam
            }
        }
    }

    /// Value at `x` (an n x n symmetric matrix; extended fields carry an
    /// identity block on the extra coordinates).
    pub fn value(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let b = self.base_dim(n);
        let inner = self.base_value(&x.rows(0, b).into_owned(), b);
        if self.extended == 0 {
            return inner;
        }
        let mut out = DMatrix::identity(n, n);
        out.view_mut((0, 0), (b, b)).copy_from(&inner);
        out
    }

    /// Gradient: one matrix per coordinate direction.
    pub fn grad(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        match self.derivative_mode {
            DerivativeMode::Analytic => self.grad_analytic(x),
            DerivativeMode::FiniteDifference => self.grad_fd(x),
        }
    }

    pub fn grad_analytic(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = x.len();
        let b = self.base_dim(n);
        let mut out = vec![DMatrix::zeros(n, n); n];
        match &self.kind {
            MatrixFieldKind::Constant { .. } => {}
            MatrixFieldKind::RoundSphere { radius } => {
                let r2 = radius * radius;
                let mut s = 0.0;
                for i in 0..b {
                    s += x[i] * x[i];
                }
                // d/dx_k [4 r^4 (r^2 + s)^-2] = -16 r^4 x_k (r^2 + s)^-3
                let c = -16.0 * r2 * r2 / ((r2 + s) * (r2 + s) * (r2 + s));
                for k in 0..b {
                    for i in 0..b {
                        out[k][(i, i)] = c * x[k];
                    }
                }
            }
        }
        out
    }

    pub fn grad_fd(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let h = fd::step(x[k]);
                fd::d4_mat(
                    |t| {
                        let mut xt = x.clone();
                        xt[k] += t;
                        self.value(&xt)
                    },
                    h,
                )
            })
            .collect()
    }
}

impl VectorField {
    pub fn zero(n: usize) -> Self {
        VectorField {
            kind: VectorFieldKind::Constant { vector: vec![0.0; n] },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        }
    }

    pub fn constant(v: DVector<f64>) -> Self {
        VectorField {
            kind: VectorFieldKind::Constant { vector: v.iter().copied().collect() },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        }
    }

    pub fn rotation(eps: f64) -> Self {
        VectorField {
            kind: VectorFieldKind::Rotation { eps },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        }
    }

    fn base_dim(&self, n: usize) -> usize {
        n - self.extended
    }

    pub fn value(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let b = self.base_dim(n);
        let mut out = DVector::zeros(n);
        match &self.kind {
            VectorFieldKind::Constant { vector } => {
                for i in 0..b {
                    out[i] = vector[i];
                }
            }
            VectorFieldKind::Rotation { eps } => {
                out[0] = -eps * x[1];
                out[1] = eps * x[0];
            }
            VectorFieldKind::RadialBump { amplitude, width, center, direction } => {
                let (e, _) = gaussian(&x.rows(0, b).into_owned(), center, *width);
                for i in 0..b {
                    out[i] = amplitude * e * direction[i];
                }
            }
        }
        out
    }

    /// Jacobian matrix `d delta^i / d x^j` (i row, j column).
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self.derivative_mode {
            DerivativeMode::Analytic => self.jacobian_analytic(x),
            DerivativeMode::FiniteDifference => self.jacobian_fd(x),
        }
    }

    pub fn jacobian_analytic(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let b = self.base_dim(n);
        let mut out = DMatrix::zeros(n, n);
        match &self.kind {
            VectorFieldKind::Constant { .. } => {}
            VectorFieldKind::Rotation { eps } => {
                out[(0, 1)] = -eps;
                out[(1, 0)] = *eps;
            }
            VectorFieldKind::RadialBump { amplitude, width, center, direction } => {
                let (_, grad_e) = gaussian(&x.rows(0, b).into_owned(), center, *width);
                for i in 0..b {
                    for j in 0..b {
                        out[(i, j)] = amplitude * direction[i] * grad_e[j];
                    }
                }
            }
        }
        out
    }

    pub fn jacobian_fd(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = fd::step(x[k]);
            let col = fd::d4_vec(
                |t| {
                    let mut xt = x.clone();
                    xt[k] += t;
                    self.value(&xt)
                },
                h,
            );
            out.set_column(k, &col);
        }
        out
    }
}

impl ScalarField {
    pub fn constant(value: f64) -> Self {
        ScalarField {
            kind: ScalarFieldKind::Constant { value },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        }
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    fn base_dim(&self, n: usize) -> usize {
        n - self.extended
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let b = self.base_dim(x.len());
        match &self.kind {
            ScalarFieldKind::Constant { value } => *value,
            ScalarFieldKind::RadialBump { base, amplitude, width, center } => {
                let (e, _) = gaussian(&x.rows(0, b).into_owned(), center, *width);
                base + amplitude * e
            }
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.derivative_mode {
            DerivativeMode::Analytic => self.grad_analytic(x),
            DerivativeMode::FiniteDifference => self.grad_fd(x),
        }
    }

    pub fn grad_analytic(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let b = self.base_dim(n);
        let mut out = DVector::zeros(n);
        match &self.kind {
            ScalarFieldKind::Constant { .. } => {}
            ScalarFieldKind::RadialBump { amplitude, width, center, .. } => {
                let (_, grad_e) = gaussian(&x.rows(0, b).into_owned(), center, *width);
                for i in 0..b {
                    out[i] = amplitude * grad_e[i];
                }
            }
        }
        out
    }

    pub fn grad_fd(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        DVector::from_fn(n, |k, _| {
            let h = fd::step(x[k]);
            fd::d4_scalar(
                |t| {
                    let mut xt = x.clone();
                    xt[k] += t;
                    self.value(&xt)
                },
                h,
            )
        })
    }

    /// Lower bound of the field over its valid range; used to validate
    /// positivity of beta once at construction.
    pub fn lower_bound(&self) -> f64 {
        match &self.kind {
            ScalarFieldKind::Constant { value } => *value,
            ScalarFieldKind::RadialBump { base, amplitude, .. } => base + amplitude.min(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn analytic_gradients_match_fd() {
        let x = dvector![0.3, -0.7];
        let g0 = MatrixField::round_sphere(1.2);
        let ga = g0.grad_analytic(&x);
        let gf = g0.grad_fd(&x);
        for k in 0..2 {
            assert!((&ga[k] - &gf[k]).norm() < 1e-6 * (1.0 + ga[k].norm()));
        }

        let d = VectorField {
            kind: VectorFieldKind::RadialBump {
                amplitude: 0.4,
                width: 0.8,
                center: vec![0.1, 0.2],
                direction: vec![1.0, -0.5],
            },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        };
        assert!((d.jacobian_analytic(&x) - d.jacobian_fd(&x)).norm() < 1e-6);

        let b = ScalarField {
            kind: ScalarFieldKind::RadialBump {
                base: 1.0,
                amplitude: -0.3,
                width: 1.1,
                center: vec![0.0, 0.0],
            },
            derivative_mode: DerivativeMode::Analytic,
            extended: 0,
        };
        assert!((b.grad_analytic(&x) - b.grad_fd(&x)).norm() < 1e-6);
    }

    #[test]
    fn extended_fields_block_structure() {
        let mut g0 = MatrixField::round_sphere(1.0);
        g0.extended = 1;
        let x = dvector![0.3, -0.7, 2.5];
        let v = g0.value(&x);
        assert_eq!(v.nrows(), 3);
        assert!((v[(2, 2)] - 1.0).abs() < 1e-15);
        assert_eq!(v[(0, 2)], 0.0);
        let g = g0.grad_analytic(&x);
        assert!(g[2].norm() == 0.0);

        let mut d = VectorField::rotation(0.1);
        d.extended = 1;
        let dv = d.value(&x);
        assert_eq!(dv.len(), 3);
        assert_eq!(dv[2], 0.0);
    }
}
