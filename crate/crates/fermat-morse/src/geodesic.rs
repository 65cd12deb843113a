//! Fermat geodesics integrated in the alpha-constant parametrization
//!   x'' = -Gamma(x', x') - sqrt(alpha[x', x']) Omega x'
//! over s in [0, 1], together with the Finsler-constant reparametrization
//! and the variational (linearized) flow used by the shooting solver.
//!
//! The alpha-constant form is used off shell too: the right-hand side is
//! smooth in (x, v) even where the trajectory momentarily fails to be a
//! Fermat geodesic, which keeps the shooting Newton iteration well behaved.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::chart::ChartPoint;
use crate::error::{Error, Result};
use crate::geometry::GeomCache;
use crate::ode::{self, DenseOde, OdeOptions, OdeSystem};
use crate::randers::RandersPoint;
use crate::scenario::StationaryScenario;

/// Second-order spray right-hand side as a first-order system in (x, v).
pub struct SpraySystem<'a> {
    pub scn: &'a StationaryScenario,
}

impl<'a> SpraySystem<'a> {
    pub fn accel(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        let geo = GeomCache::basic(self.scn, x)?;
        let speed = v.dot(&(&geo.alpha * v)).sqrt();
        Ok(-geo.gamma.contract(v, v) - (&geo.omega * v) * speed)
    }
}

impl<'a> OdeSystem for SpraySystem<'a> {
    fn dim(&self) -> usize {
        2 * self.scn.dim()
    }

    fn rhs(&self, _chart: usize, _s: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.scn.dim();
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let a = self.accel(&x, &v)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&v);
        out.rows_mut(n, n).copy_from(&a);
        Ok(out)
    }

    fn switch_target(&self, chart: usize, y: &DVector<f64>) -> Option<usize> {
        let n = self.scn.dim();
        self.scn.manifold.switch_target(chart, &y.rows(0, n).into_owned())
    }

    fn switch_state(&self, from: usize, to: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.scn.dim();
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let xn = self.scn.manifold.transition(from, to, &x)?;
        let j = self.scn.manifold.transition_jacobian(from, to, &x)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&xn);
        out.rows_mut(n, n).copy_from(&(&j * &v));
        Ok(out)
    }
}

/// A solved geodesic over s in [0, 1] with dense output in both the
/// alpha-constant and the Finsler-constant parametrization.
pub struct Geodesic {
    pub scenario: Arc<StationaryScenario>,
    /// Alpha-constant flow, state (x, v), s in [0, 1].
    pub base: DenseOde,
    /// Constant alpha-speed sqrt(alpha[v, v]).
    pub c_alpha: f64,
    /// Finsler length l = int_0^1 F(x, x') ds.
    pub f_length: f64,
    /// Cumulative Finsler length L(s) = int_0^s F, as a 1-dim dense solution.
    pub length_fn: DenseOde,
    /// Finsler-constant parameter map s(sigma), sigma in [0, 1].
    pub reparam: DenseOde,
    pub chart_switches: usize,
    /// Relative drift of the alpha-speed along the solution (diagnostic; the
    /// parametrization keeps it at the integrator tolerance level).
    pub speed_drift: f64,
}

impl Geodesic {
    /// Chart, position and velocity at the alpha-constant parameter s.
    pub fn state(&self, s: f64) -> (usize, DVector<f64>, DVector<f64>) {
        let n = self.scenario.dim();
        let (chart, y) = self.base.sample(s);
        (chart, y.rows(0, n).into_owned(), y.rows(n, n).into_owned())
    }

    pub fn position(&self, s: f64) -> ChartPoint {
        let (chart, x, _) = self.state(s);
        ChartPoint::new(chart, x)
    }

    pub fn end_position(&self) -> ChartPoint {
        self.position(1.0)
    }

    pub fn initial_velocity(&self) -> DVector<f64> {
        let (_, _, v) = self.state(0.0);
        v
    }

    /// Cumulative Finsler length at s.
    pub fn length_at(&self, s: f64) -> f64 {
        self.length_fn.sample(s).1[0]
    }

    /// Alpha-constant parameter corresponding to the Finsler-constant
    /// parameter sigma in [0, 1].
    pub fn s_of_sigma(&self, sigma: f64) -> f64 {
        self.reparam.sample(sigma).1[0].clamp(0.0, 1.0)
    }

    /// Finsler-constant parameter of an alpha-constant instant, from the
    /// cumulative length: sigma(s) = L(s) / l.
    pub fn sigma_of_s(&self, s: f64) -> f64 {
        (self.length_at(s) / self.f_length).clamp(0.0, 1.0)
    }

    /// Chart, position and d x / d sigma at the Finsler-constant parameter.
    /// The velocity satisfies F(x, dx/dsigma) = l up to integration error.
    pub fn state_f(&self, sigma: f64) -> Result<(usize, DVector<f64>, DVector<f64>)> {
        let s = self.s_of_sigma(sigma);
        let (chart, x, v) = self.state(s);
        let p = RandersPoint::at(&self.scenario, &x)?;
        let f = p.f(&v);
        Ok((chart, x, &v * (self.f_length / f)))
    }
}

/// 1-dim quadrature system evaluating a scalar field along a dense solution.
struct AlongSolution<'a> {
    scn: &'a StationaryScenario,
    sol: &'a DenseOde,
    /// false: dy/ds = F(x(s), v(s)); true: dy/dsigma = l / F(x(y), v(y)).
    inverse: bool,
    f_length: f64,
}

impl<'a> AlongSolution<'a> {
    fn f_at(&self, s: f64) -> Result<f64> {
        let n = self.scn.dim();
        let (_, y) = self.sol.sample(s);
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        Ok(RandersPoint::at(self.scn, &x)?.f(&v))
    }
}

impl<'a> OdeSystem for AlongSolution<'a> {
    fn dim(&self) -> usize {
        1
    }
    fn rhs(&self, _chart: usize, s: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let v = if self.inverse {
            self.f_length / self.f_at(y[0].clamp(0.0, 1.0))?
        } else {
            self.f_at(s)?
        };
        Ok(DVector::from_element(1, v))
    }
}

/// Integrates the geodesic with initial chart point `p0` and initial
/// velocity `v0` over s in [0, 1].
pub fn integrate_geodesic(
    scn: &Arc<StationaryScenario>,
    p0: &ChartPoint,
    v0: &DVector<f64>,
    opts: &OdeOptions,
) -> Result<Geodesic> {
    let n = scn.dim();
    if v0.norm() == 0.0 {
        return Err(Error::ZeroVelocity);
    }
    if !scn.manifold.in_domain(p0.chart, &p0.coords) {
        return Err(Error::OutsideChart(format!("{:?}", p0.coords.as_slice())));
    }
    let sys = SpraySystem { scn };
    let mut y0 = DVector::zeros(2 * n);
    y0.rows_mut(0, n).copy_from(&p0.coords);
    y0.rows_mut(n, n).copy_from(v0);
    let base = ode::integrate(&sys, p0.chart, y0, 0.0, 1.0, &[], opts)?;

    finish_geodesic(scn, base, opts)
}

/// Builds the derived data (length, reparametrization, diagnostics) on top
/// of an already integrated alpha-constant flow.
pub fn finish_geodesic(
    scn: &Arc<StationaryScenario>,
    base: DenseOde,
    opts: &OdeOptions,
) -> Result<Geodesic> {
    let n = scn.dim();
    let geo0 = GeomCache::basic(scn, &base.steps[0].y0.rows(0, n).into_owned())?;
    let v0 = base.steps[0].y0.rows(n, n).into_owned();
    let c_alpha = v0.dot(&(&geo0.alpha * &v0)).sqrt();

    let switch_s: Vec<f64> = base.switches.iter().map(|(s, _, _)| *s).collect();
    let quad = AlongSolution { scn, sol: &base, inverse: false, f_length: 0.0 };
    let length_fn = ode::integrate(&quad, 0, DVector::zeros(1), 0.0, 1.0, &switch_s, opts)?;
    let f_length = length_fn.end_state().1[0];

    let inv = AlongSolution { scn, sol: &base, inverse: true, f_length };
    let reparam = ode::integrate(&inv, 0, DVector::zeros(1), 0.0, 1.0, &[], opts)?;
    let s_end = reparam.end_state().1[0];
    if (s_end - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical(format!(
            "reparametrization endpoint {s_end} != 1"
        )));
    }

    let mut speed_drift: f64 = 0.0;
    for i in 0..=64 {
        let s = i as f64 / 64.0;
        let (_, y) = base.sample(s);
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let geo = GeomCache::basic(scn, &x)?;
        let sp = v.dot(&(&geo.alpha * &v)).sqrt();
        speed_drift = speed_drift.max((sp - c_alpha).abs() / c_alpha);
    }

    Ok(Geodesic {
        scenario: Arc::clone(scn),
        chart_switches: base.switches.len(),
        base,
        c_alpha,
        f_length,
        length_fn,
        reparam,
        speed_drift,
    })
}

/// Spray flow together with its linearization: the state is
/// (x, v, columns of M) where M is the 2n x 2n derivative of the flow with
/// respect to the initial (x0, v0). The spray Jacobian is evaluated by
/// central differences of the analytic acceleration.
pub struct VariationalSystem<'a> {
    pub scn: &'a StationaryScenario,
}

impl<'a> VariationalSystem<'a> {
    fn spray_jacobian(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.scn.dim();
        let sys = SpraySystem { scn: self.scn };
        let mut dax = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = crate::fd::step(x[k]);
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            dax.set_column(k, &((sys.accel(&xp, v)? - sys.accel(&xm, v)?) / (2.0 * h)));
        }
        // d a / d v is exact: a = -Gamma(v, v) - |v|_alpha Omega v.
        let geo = GeomCache::basic(self.scn, x)?;
        let alpha_v = &geo.alpha * v;
        let speed = v.dot(&alpha_v).sqrt();
        let omega_v = &geo.omega * v;
        let dav = -geo.gamma.contract_first(v) * 2.0
            - &omega_v * (alpha_v.transpose() / speed)
            - &geo.omega * speed;
        Ok((dax, dav))
    }
}

impl<'a> OdeSystem for VariationalSystem<'a> {
    fn dim(&self) -> usize {
        let m = 2 * self.scn.dim();
        m + m * m
    }

    fn rhs(&self, _chart: usize, _s: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.scn.dim();
        let m = 2 * n;
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let sys = SpraySystem { scn: self.scn };
        let a = sys.accel(&x, &v)?;
        let (dax, dav) = self.spray_jacobian(&x, &v)?;
        let mut out = DVector::zeros(m + m * m);
        out.rows_mut(0, n).copy_from(&v);
        out.rows_mut(n, n).copy_from(&a);
        for col in 0..m {
            let dx = y.rows(m + col * m, n).into_owned();
            let dv = y.rows(m + col * m + n, n).into_owned();
            out.rows_mut(m + col * m, n).copy_from(&dv);
            out.rows_mut(m + col * m + n, n).copy_from(&(&dax * &dx + &dav * &dv));
        }
        Ok(out)
    }

    fn switch_target(&self, chart: usize, y: &DVector<f64>) -> Option<usize> {
        let n = self.scn.dim();
        self.scn.manifold.switch_target(chart, &y.rows(0, n).into_owned())
    }

    fn switch_state(&self, from: usize, to: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.scn.dim();
        let m = 2 * n;
        let x = y.rows(0, n).into_owned();
        let v = y.rows(n, n).into_owned();
        let xn = self.scn.manifold.transition(from, to, &x)?;
        let j = self.scn.manifold.transition_jacobian(from, to, &x)?;
        let mut out = DVector::zeros(m + m * m);
        out.rows_mut(0, n).copy_from(&xn);
        out.rows_mut(n, n).copy_from(&(&j * &v));
        for col in 0..m {
            let dx = y.rows(m + col * m, n).into_owned();
            let dv = y.rows(m + col * m + n, n).into_owned();
            // Chain rule for the second component: D(phi') = Dphi dv + D^2phi(v, dx).
            let hess = self.scn.manifold.transition_hessian(from, to, &x, &v, &dx)?;
            out.rows_mut(m + col * m, n).copy_from(&(&j * &dx));
            out.rows_mut(m + col * m + n, n).copy_from(&(&j * &dv + hess));
        }
        Ok(out)
    }
}

/// Endpoint of the spray flow and its derivative with respect to the
/// initial velocity (the n x 2n right block of the full variational matrix
/// restricted to the position rows is what shooting needs; the whole matrix
/// is returned).
pub struct FlowWithDerivative {
    pub chart: usize,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    /// Derivative of the endpoint state (x1, v1) with respect to (x0, v0).
    pub deriv: DMatrix<f64>,
}

pub fn flow_with_derivative(
    scn: &StationaryScenario,
    p0: &ChartPoint,
    v0: &DVector<f64>,
    opts: &OdeOptions,
) -> Result<FlowWithDerivative> {
    let n = scn.dim();
    let m = 2 * n;
    let sys = VariationalSystem { scn };
    let mut y0 = DVector::zeros(m + m * m);
    y0.rows_mut(0, n).copy_from(&p0.coords);
    y0.rows_mut(n, n).copy_from(v0);
    for i in 0..m {
        y0[m + i * m + i] = 1.0;
    }
    let sol = ode::integrate(&sys, p0.chart, y0, 0.0, 1.0, &[], opts)?;
    let (chart, yend) = sol.end_state();
    let mut deriv = DMatrix::zeros(m, m);
    for col in 0..m {
        deriv.set_column(col, &yend.rows(m + col * m, m).into_owned());
    }
    Ok(FlowWithDerivative {
        chart,
        x: yend.rows(0, n).into_owned(),
        v: yend.rows(n, n).into_owned(),
        deriv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::catalog;
    use nalgebra::dvector;

    fn opts() -> OdeOptions {
        OdeOptions::default()
    }

    #[test]
    fn flat_geodesic_is_straight() {
        let scn = Arc::new(catalog::flat(2));
        let p0 = ChartPoint::new(0, dvector![0.0, 0.0]);
        let g = integrate_geodesic(&scn, &p0, &dvector![1.0, 2.0], &opts()).unwrap();
        let (_, x, v) = g.state(1.0);
        assert!((x - dvector![1.0, 2.0]).norm() < 1e-9);
        assert!((v - dvector![1.0, 2.0]).norm() < 1e-9);
        assert!((g.f_length - 5.0_f64.sqrt()).abs() < 1e-9);
        assert!(g.speed_drift < 1e-8);
    }

    #[test]
    fn constant_drift_geodesic_is_straight() {
        // Randers space with constant data is a Minkowski norm on R^2, so
        // geodesics are affine lines.
        let scn = Arc::new(catalog::flat_drift(dvector![0.3, 0.1]));
        let p0 = ChartPoint::new(0, dvector![0.2, -0.4]);
        let g = integrate_geodesic(&scn, &p0, &dvector![0.5, 1.0], &opts()).unwrap();
        let (_, x, _) = g.state(0.5);
        assert!((x - dvector![0.45, 0.1]).norm() < 1e-9);
    }

    #[test]
    fn great_circle_on_sphere() {
        // From the chart center with alpha-speed 2 (= coordinate speed 1 at
        // the origin of the unit-sphere chart): a quarter turn per unit s
        // needs alpha-length pi/2 after s = pi/4... use full length check.
        let scn = Arc::new(catalog::sphere(1.0));
        let p0 = ChartPoint::new(0, dvector![0.0, 0.0]);
        // Coordinate velocity v gives alpha-speed 2|v| at the origin; choose
        // |v| = pi so the curve covers alpha-length 2 pi: a full great circle.
        let g = integrate_geodesic(&scn, &p0, &dvector![std::f64::consts::PI, 0.0], &opts())
            .unwrap();
        assert!((g.f_length - 2.0 * std::f64::consts::PI).abs() < 1e-7);
        let (chart, x, _) = g.state(1.0);
        // Returns to the start (in either chart representation of it).
        assert_eq!(chart, 0);
        assert!(x.norm() < 1e-6, "end at {x:?}");
        assert!(g.chart_switches >= 2);
        assert!(g.speed_drift < 1e-7);
    }

    #[test]
    fn finsler_reparametrization_constant_speed() {
        let scn = Arc::new(catalog::sphere_drift(0.3));
        let p0 = ChartPoint::new(0, dvector![0.1, -0.2]);
        let g = integrate_geodesic(&scn, &p0, &dvector![1.5, 0.7], &opts()).unwrap();
        for i in 0..=10 {
            let sigma = i as f64 / 10.0;
            let (_, x, v) = g.state_f(sigma).unwrap();
            let f = RandersPoint::at(&scn, &x).unwrap().f(&v);
            assert!((f - g.f_length).abs() < 1e-7 * g.f_length, "sigma {sigma}");
        }
        // sigma(s(sigma)) is the identity.
        for sigma in [0.0, 0.3, 0.8, 1.0] {
            assert!((g.sigma_of_s(g.s_of_sigma(sigma)) - sigma).abs() < 1e-7);
        }
    }

    #[test]
    fn variational_flow_matches_finite_difference() {
        let scn = catalog::sphere_drift(0.2);
        let arc = Arc::new(scn.clone());
        let p0 = ChartPoint::new(0, dvector![0.1, 0.3]);
        let v0 = dvector![0.8, -0.4];
        let fl = flow_with_derivative(&scn, &p0, &v0, &opts()).unwrap();
        // Compare the velocity block column by column against FD of the flow.
        let h = 1e-6;
        for k in 0..2 {
            let mut vp = v0.clone();
            vp[k] += h;
            let mut vm = v0.clone();
            vm[k] -= h;
            let gp = integrate_geodesic(&arc, &p0, &vp, &opts()).unwrap();
            let gm = integrate_geodesic(&arc, &p0, &vm, &opts()).unwrap();
            let (cp, xp, _) = gp.state(1.0);
            let (cm, xm, _) = gm.state(1.0);
            assert_eq!(cp, fl.chart);
            assert_eq!(cm, fl.chart);
            let col = (xp - xm) / (2.0 * h);
            let anal = fl.deriv.view((0, 2 + k), (2, 1)).into_owned();
            assert!(
                (anal.column(0) - &col).norm() < 1e-5 * (1.0 + col.norm()),
                "k = {k}: {anal:?} vs {col:?}"
            );
        }
    }
}
