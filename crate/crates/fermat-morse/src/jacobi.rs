//! Jacobi fields along Fermat geodesics, conjugate-instant detection and the
//! Morse index.
//!
//! The second-order Jacobi equation is integrated in the covariant state
//! (J, P) with P = covariant derivative of J along the geodesic, so chart
//! switches only require pushing both vectors forward by the transition
//! differential (no Hessian terms). The n columns are seeded J(0) = 0,
//! P(0) = e_k and integrated together.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geodesic::Geodesic;
use crate::geometry::GeomCache;
use crate::ode::{self, DenseOde, OdeOptions, OdeSystem};

/// Conjugate instants with multiplicities and the resulting Morse index.
#[derive(Clone, Debug)]
pub struct ConjugateReport {
    /// Strictly increasing instants in (0, 1) with their multiplicities.
    pub instants: Vec<(f64, usize)>,
    /// Sum of interior multiplicities.
    pub mu: usize,
    /// Rank deficiency at s = 1 (excluded from mu, flagged as degenerate).
    pub endpoint_conjugate: bool,
    pub rank_tol: f64,
}

/// Samples position and velocity of the underlying geodesic expressed in a
/// prescribed chart (transitioning if the dense output stores the other
/// chart's representative at that parameter).
fn sample_in_chart(
    geod: &Geodesic,
    s: f64,
    chart: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (c, x, v) = geod.state(s);
    if c == chart {
        return Ok((x, v));
    }
    let xt = geod.scenario.manifold.transition(c, chart, &x)?;
    let j = geod.scenario.manifold.transition_jacobian(c, chart, &x)?;
    Ok((xt, &j * v))
}

/// One chart piece of the Jacobi flow: state is the 2 n^2 vector of columns
/// (J_k, P_k).
struct JacobiSystem<'a> {
    geod: &'a Geodesic,
    chart: usize,
    /// Per-column constants alpha(x0)[v0, P_k(0)] divided by C_x.
    omega_coeff: Vec<f64>,
}

impl<'a> JacobiSystem<'a> {
    fn n(&self) -> usize {
        self.geod.scenario.dim()
    }
}

impl<'a> OdeSystem for JacobiSystem<'a> {
    fn dim(&self) -> usize {
        let n = self.n();
        2 * n * n
    }

    fn rhs(&self, _chart: usize, s: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n();
        let (x, v) = sample_in_chart(self.geod, s, self.chart)?;
        let geo = GeomCache::full(&self.geod.scenario, &x)?;
        let c_x = self.geod.c_alpha;
        let gamma_v = geo.gamma.contract_first(&v);
        let riem = geo.riemann.as_ref().unwrap();
        let omega_v = &geo.omega * &v;
        let mut out = DVector::zeros(2 * n * n);
        for k in 0..n {
            let j_vec = y.rows(2 * n * k, n).into_owned();
            let p_vec = y.rows(2 * n * k + n, n).into_owned();
            // Covariant second derivative from the Jacobi equation.
            let rhs = -riem.apply(&j_vec, &v, &v)
                - &omega_v * self.omega_coeff[k]
                - geo.nabla_omega(&j_vec) * &v * c_x
                - &geo.omega * &p_vec * c_x;
            // Coordinate derivatives: subtract the connection terms.
            out.rows_mut(2 * n * k, n)
                .copy_from(&(&p_vec - &gamma_v * &j_vec));
            out.rows_mut(2 * n * k + n, n)
                .copy_from(&(rhs - &gamma_v * &p_vec));
        }
        Ok(out)
    }
}

/// The integrated Jacobi flow: piecewise dense output (one piece per chart
/// interval of the underlying geodesic) plus the sign corrections needed to
/// make det J(s) continuous across orientation-reversing chart transitions.
pub struct JacobiPropagator<'a> {
    pub geod: &'a Geodesic,
    pieces: Vec<(f64, f64, usize, DenseOde)>,
    /// (switch parameter, cumulative det-sign factor valid after it).
    sign_corrections: Vec<(f64, f64)>,
}

impl<'a> JacobiPropagator<'a> {
    pub fn integrate(geod: &'a Geodesic, opts: &OdeOptions) -> Result<Self> {
        let n = geod.scenario.dim();
        let (chart0, x0, v0) = geod.state(0.0);
        let alpha0 = crate::geometry::alpha_mat(&geod.scenario, &x0)?;
        let omega_coeff: Vec<f64> = (0..n)
            .map(|k| {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                v0.dot(&(&alpha0 * e)) / geod.c_alpha
            })
            .collect();

        // Piece boundaries at the geodesic's chart switches.
        let mut bounds = vec![0.0];
        bounds.extend(geod.base.switches.iter().map(|(s, _, _)| *s));
        bounds.push(1.0);
        let mut chart = chart0;
        let mut state = DVector::zeros(2 * n * n);
        for k in 0..n {
            state[2 * n * k + n + k] = 1.0;
        }
        let mut pieces = Vec::new();
        let mut sign_corrections = Vec::new();
        let mut sign = 1.0;
        for (i, w) in bounds.windows(2).enumerate() {
            let (s_a, s_b) = (w[0], w[1]);
            if s_b - s_a < 1e-12 {
                continue;
            }
            let sys = JacobiSystem { geod, chart, omega_coeff: omega_coeff.clone() };
            let sol = ode::integrate(&sys, 0, state.clone(), s_a, s_b, &[], opts)?;
            state = sol.end_state().1.clone();
            pieces.push((s_a, s_b, chart, sol));
            // Transform the columns into the next chart.
            if i < geod.base.switches.len() {
                let (s_sw, from, to) = geod.base.switches[i];
                debug_assert!((s_sw - s_b).abs() < 1e-12);
                debug_assert_eq!(from, chart);
                let (x, _) = sample_in_chart(geod, s_b, chart)?;
                let dphi = geod.scenario.manifold.transition_jacobian(from, to, &x)?;
                for k in 0..n {
                    let j_vec = state.rows(2 * n * k, n).into_owned();
                    let p_vec = state.rows(2 * n * k + n, n).into_owned();
                    state.rows_mut(2 * n * k, n).copy_from(&(&dphi * j_vec));
                    state.rows_mut(2 * n * k + n, n).copy_from(&(&dphi * p_vec));
                }
                sign *= dphi.determinant().signum();
                sign_corrections.push((s_b, sign));
                chart = to;
            }
        }
        Ok(JacobiPropagator { geod, pieces, sign_corrections })
    }

    fn piece_at(&self, s: f64) -> &(f64, f64, usize, DenseOde) {
        self.pieces
            .iter()
            .find(|(a, b, _, _)| s >= *a && s <= *b)
            .unwrap_or_else(|| self.pieces.last().unwrap())
    }

    /// The n x n matrix J(s) (columns indexed by the seed P(0) = e_k).
    pub fn j_matrix(&self, s: f64) -> DMatrix<f64> {
        let n = self.geod.scenario.dim();
        let (_, _, _, sol) = self.piece_at(s);
        let (_, y) = sol.sample(s);
        DMatrix::from_fn(n, n, |i, k| y[2 * n * k + i])
    }

    pub fn p_matrix(&self, s: f64) -> DMatrix<f64> {
        let n = self.geod.scenario.dim();
        let (_, _, _, sol) = self.piece_at(s);
        let (_, y) = sol.sample(s);
        DMatrix::from_fn(n, n, |i, k| y[2 * n * k + n + i])
    }

    /// Cumulative orientation factor so that sign(correction * det J) is
    /// continuous in s across chart switches.
    pub fn det_sign_correction(&self, s: f64) -> f64 {
        let mut sign = 1.0;
        for (sw, cum) in &self.sign_corrections {
            if s >= *sw {
                sign = *cum;
            }
        }
        sign
    }
}

/// Generic rank-drop scanner over a parametrized square matrix family.
/// `det_sign(s)` supplies an orientation correction making the signed
/// determinant continuous. Returns interior instants with multiplicities
/// and the endpoint rank deficiency.
pub fn scan_rank_drops(
    matrix: &dyn Fn(f64) -> DMatrix<f64>,
    det_sign: &dyn Fn(f64) -> f64,
    n_samples: usize,
    rank_tol: f64,
) -> (Vec<(f64, usize)>, usize) {
    let n_samples = n_samples.max(400);
    let grid: Vec<f64> = (1..=n_samples)
        .map(|i| i as f64 / n_samples as f64)
        .collect();
    let dets: Vec<f64> = grid
        .iter()
        .map(|&s| det_sign(s) * matrix(s).determinant())
        .collect();
    let sigmin: Vec<f64> = grid
        .iter()
        .map(|&s| {
            matrix(s)
                .singular_values()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let sig_scale = sigmin.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);

    let mut candidates: Vec<f64> = Vec::new();
    // Sign changes of the corrected determinant, refined by bisection.
    for i in 0..grid.len() - 1 {
        if dets[i] == 0.0 {
            candidates.push(grid[i]);
        } else if dets[i] * dets[i + 1] < 0.0 {
            let (mut a, mut b) = (grid[i], grid[i + 1]);
            let mut fa = dets[i];
            while b - a > 1e-9 {
                let m = 0.5 * (a + b);
                let fm = det_sign(m) * matrix(m).determinant();
                if fa * fm <= 0.0 {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            candidates.push(0.5 * (a + b));
        }
    }
    // Local minima of the smallest singular value that dip near zero catch
    // even-multiplicity drops the determinant sign misses.
    for i in 1..grid.len() - 1 {
        if sigmin[i] < sigmin[i - 1]
            && sigmin[i] <= sigmin[i + 1]
            && sigmin[i] < 1e-3 * sig_scale
        {
            let refined = golden_min(
                &|s| {
                    matrix(s)
                        .singular_values()
                        .iter()
                        .cloned()
                        .fold(f64::INFINITY, f64::min)
                },
                grid[i - 1],
                grid[i + 1],
            );
            candidates.push(refined);
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup_by(|a, b| (*a - *b).abs() < 1e-6);

    let mut instants = Vec::new();
    let mut endpoint_mult = 0;
    for s in candidates {
        let m = matrix(s);
        let sv = m.singular_values();
        let smax = sv.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
        let mult = sv.iter().filter(|v| **v < rank_tol * smax).count();
        if mult == 0 {
            continue;
        }
        if s > 1.0 - 1e-6 {
            endpoint_mult = endpoint_mult.max(mult);
        } else {
            instants.push((s, mult));
        }
    }
    // The endpoint itself, checked directly.
    {
        let sv = matrix(1.0).singular_values();
        let smax = sv.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
        let mult = sv.iter().filter(|v| **v < rank_tol * smax).count();
        endpoint_mult = endpoint_mult.max(mult);
    }
    (instants, endpoint_mult)
}

fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let phi = 0.618_033_988_749_895_f64;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Conjugate instants of a Fermat geodesic via the Jacobi propagator.
pub fn conjugate_instants(
    geod: &Geodesic,
    rank_tol: f64,
    opts: &OdeOptions,
) -> Result<ConjugateReport> {
    let prop = JacobiPropagator::integrate(geod, opts)?;
    let (instants, endpoint_mult) = scan_rank_drops(
        &|s| prop.j_matrix(s),
        &|s| prop.det_sign_correction(s),
        400,
        rank_tol,
    );
    let mu = instants.iter().map(|(_, m)| m).sum();
    Ok(ConjugateReport {
        instants,
        mu,
        endpoint_conjugate: endpoint_mult > 0,
        rank_tol,
    })
}

/// Default relative rank tolerance for conjugate detection, matched to the
/// 5(4) integrator's local accuracy.
pub const RANK_TOL: f64 = 1e-6;

/// Morse index of a geodesic; errors when the endpoint is conjugate (the
/// Morse relations assume non-conjugate endpoints).
pub fn morse_index(geod: &Geodesic, opts: &OdeOptions) -> Result<usize> {
    let rep = conjugate_instants(geod, RANK_TOL, opts)?;
    if rep.endpoint_conjugate {
        return Err(Error::Degenerate("endpoint is a conjugate instant".into()));
    }
    Ok(rep.mu)
}
