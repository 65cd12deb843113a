//! Chart atlas for the base manifolds in the built-in catalog.
//!
//! Three base manifolds are supported: Euclidean space (single chart), a flat
//! torus (single periodic chart, integration runs in the universal cover) and
//! the round sphere S^2 covered by two stereographic charts glued by the
//! inversion `x -> r^2 x / |x|^2`. A manifold can also be extended by a flat
//! factor (one extra coordinate `u`), which is how the timelike machinery gets
//! its one-dimension-higher base.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chart switch threshold for the stereographic atlas, in units of the
/// sphere radius. Whichever chart is active, the alternative chart places the
/// same point at radius r^2/|x|, so any trajectory can always be kept below
/// this threshold in one of the two charts.
pub const SPHERE_SWITCH_FACTOR: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Manifold {
    Euclidean { dim: usize },
    Torus { periods: Vec<f64> },
    Sphere { radius: f64 },
    /// `base x R`: one extra flat coordinate appended after the base coords.
    Extended { base: Box<Manifold> },
}

/// A point expressed in one chart of the atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub chart: usize,
    pub coords: DVector<f64>,
}

impl ChartPoint {
    pub fn new(chart: usize, coords: DVector<f64>) -> Self {
        ChartPoint { chart, coords }
    }
}

impl Manifold {
    pub fn dim(&self) -> usize {
        match self {
            Manifold::Euclidean { dim } => *dim,
            Manifold::Torus { periods } => periods.len(),
            Manifold::Sphere { .. } => 2,
            Manifold::Extended { base } => base.dim() + 1,
        }
    }

    pub fn n_charts(&self) -> usize {
        match self {
            Manifold::Sphere { .. } => 2,
            Manifold::Extended { base } => base.n_charts(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Manifold::Euclidean { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidScenario("dimension must be positive".into()));
                }
            }
            Manifold::Torus { periods } => {
                if periods.is_empty() || periods.iter().any(|p| *p <= 0.0) {
                    return Err(Error::InvalidScenario("torus periods must be positive".into()));
                }
            }
            Manifold::Sphere { radius } => {
                if *radius <= 0.0 {
                    return Err(Error::InvalidScenario("sphere radius must be positive".into()));
                }
            }
            Manifold::Extended { base } => base.validate()?,
        }
        Ok(())
    }

    /// Chart domain membership. All catalog charts cover the whole coordinate
    /// plane (the sphere charts miss only the projection pole, which no
    /// finite coordinate vector represents), so only finiteness can fail.
    pub fn in_domain(&self, chart: usize, coords: &DVector<f64>) -> bool {
        chart < self.n_charts()
            && coords.len() == self.dim()
            && coords.iter().all(|c| c.is_finite())
    }

    /// Maps chart coordinates into another chart of the atlas.
    pub fn transition(&self, from: usize, to: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if from == to {
            return Ok(x.clone());
        }
        match self {
            Manifold::Sphere { radius } => {
                let r2 = x.norm_squared();
                if r2 == 0.0 {
                    return Err(Error::NotInOverlap);
                }
                Ok(x * (radius * radius / r2))
            }
            Manifold::Extended { base } => {
                let b = base.dim();
                let inner = base.transition(from, to, &x.rows(0, b).into_owned())?;
                let mut out = x.clone();
                for i in 0..b {
                    out[i] = inner[i];
                }
                Ok(out)
            }
            _ => Err(Error::NotInOverlap),
        }
    }

    /// Differential of the transition map at `x`.
    pub fn transition_jacobian(&self, from: usize, to: usize, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if from == to {
            return Ok(DMatrix::identity(n, n));
        }
        match self {
            Manifold::Sphere { radius } => {
                let r2 = x.norm_squared();
                if r2 == 0.0 {
                    return Err(Error::NotInOverlap);
                }
                let mut j = DMatrix::identity(2, 2) / r2;
                j -= (x * x.transpose()) * (2.0 / (r2 * r2));
                Ok(j * (radius * radius))
            }
            Manifold::Extended { base } => {
                let b = base.dim();
                let inner = base.transition_jacobian(from, to, &x.rows(0, b).into_owned())?;
                let mut j = DMatrix::identity(n, n);
                j.view_mut((0, 0), (b, b)).copy_from(&inner);
                Ok(j)
            }
            _ => Err(Error::NotInOverlap),
        }
    }

    /// Second differential of the transition map applied to a pair of
    /// vectors: `D^2 phi(x)[u, w]`. Needed when transporting the chart-level
    /// variational flow across a chart switch.
    pub fn transition_hessian(
        &self,
        from: usize,
        to: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = self.dim();
        if from == to {
            return Ok(DVector::zeros(n));
        }
        match self {
            Manifold::Sphere { radius } => {
                let r2 = x.norm_squared();
                if r2 == 0.0 {
                    return Err(Error::NotInOverlap);
                }
                let r4 = r2 * r2;
                let r6 = r4 * r2;
                let xw = x.dot(w);
                let xu = x.dot(u);
                let wu = w.dot(u);
                let out = u * (-2.0 * xw / r4) - (w * xu + x * wu) * (2.0 / r4)
                    + x * (8.0 * xu * xw / r6);
                Ok(out * (radius * radius))
            }
            Manifold::Extended { base } => {
                let b = base.dim();
                let inner = base.transition_hessian(
                    from,
                    to,
                    &x.rows(0, b).into_owned(),
                    &u.rows(0, b).into_owned(),
                    &w.rows(0, b).into_owned(),
                )?;
                let mut out = DVector::zeros(n);
                for i in 0..b {
                    out[i] = inner[i];
                }
                Ok(out)
            }
            _ => Err(Error::NotInOverlap),
        }
    }

    /// Returns the chart to switch to when a trajectory has wandered too far
    /// from the center of the active chart, or `None` if no switch is needed.
    pub fn switch_target(&self, chart: usize, x: &DVector<f64>) -> Option<usize> {
        match self {
            Manifold::Sphere { radius } => {
                if x.norm() > SPHERE_SWITCH_FACTOR * radius {
                    Some(1 - chart)
                } else {
                    None
                }
            }
            Manifold::Extended { base } => {
                let b = base.dim();
                base.switch_target(chart, &x.rows(0, b).into_owned())
            }
            _ => None,
        }
    }

    /// Torus-aware displacement from `a` to `b`: the representative of
    /// `b - a` closest to zero. On non-periodic manifolds this is `b - a`.
    pub fn displacement(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = b - a;
        if let Manifold::Torus { periods } = self {
            for (i, p) in periods.iter().enumerate() {
                d[i] -= p * (d[i] / p).round();
            }
        }
        d
    }

    /// Wraps torus coordinates into the fundamental domain `[0, p_i)`.
    pub fn wrap(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        if let Manifold::Torus { periods } = self {
            for (i, p) in periods.iter().enumerate() {
                out[i] = out[i].rem_euclid(*p);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn sphere_transition_fixed_circle() {
        let m = Manifold::Sphere { radius: 1.0 };
        let x = dvector![0.6, 0.8];
        let y = m.transition(0, 1, &x).unwrap();
        assert!((y - &x).norm() < 1e-14);
    }

    #[test]
    fn sphere_transition_inversion() {
        let m = Manifold::Sphere { radius: 1.0 };
        let y = m.transition(0, 1, &dvector![2.0, 0.0]).unwrap();
        assert!((y - dvector![0.5, 0.0]).norm() < 1e-14);
    }

    #[test]
    fn sphere_round_trip() {
        let m = Manifold::Sphere { radius: 1.3 };
        let x = dvector![0.7, -1.1];
        let y = m.transition(0, 1, &x).unwrap();
        let back = m.transition(1, 0, &y).unwrap();
        assert!((back - &x).norm() < 1e-10);
    }

    #[test]
    fn transition_jacobian_matches_fd() {
        let m = Manifold::Sphere { radius: 1.0 };
        let x = dvector![0.4, 0.9];
        let j = m.transition_jacobian(0, 1, &x).unwrap();
        for k in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let col = (m.transition(0, 1, &xp).unwrap() - m.transition(0, 1, &xm).unwrap()) / (2.0 * h);
            assert!((j.column(k) - col).norm() < 1e-8);
        }
    }

    #[test]
    fn transition_hessian_matches_fd() {
        let m = Manifold::Sphere { radius: 1.0 };
        let x = dvector![0.4, 0.9];
        let u = dvector![1.0, -0.5];
        let w = dvector![0.3, 0.7];
        let hess = m.transition_hessian(0, 1, &x, &u, &w).unwrap();
        let h = 1e-6;
        let jp = m.transition_jacobian(0, 1, &(&x + &w * h)).unwrap();
        let jm = m.transition_jacobian(0, 1, &(&x - &w * h)).unwrap();
        let fd = (jp * &u - jm * &u) / (2.0 * h);
        assert!((hess - fd).norm() < 1e-7);
    }

    #[test]
    fn torus_displacement_wraps() {
        let m = Manifold::Torus { periods: vec![1.0, 1.0] };
        let d = m.displacement(&dvector![0.1, 0.1], &dvector![0.95, 0.2]);
        assert!((d - dvector![-0.15, 0.1]).norm() < 1e-14);
    }
}
