//! Discretized second variation of the Finsler energy: the localized
//! Lagrangian G~ along a tube around the center geodesic, the H1 scalar
//! product, the index form B, and the identity-plus-compact operator
//! representation. Gives the Morse index and kernel dimension without
//! counting conjugate instants.
//!
//! The tube is affine in a parallel frame E(sigma) transported along the
//! center curve (F-constant parametrization): a frame offset q maps to the
//! chart point x(sigma) + E(sigma) q. The frame transforms with the chart
//! transitions, so variation fields are globally well defined even when the
//! center curve crosses chart boundaries.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesic::Geodesic;
use crate::geometry::GeomCache;
use crate::ode::{self, DenseOde, OdeOptions, OdeSystem};
use crate::randers::{self, RandersPoint};

/// Default kernel tolerance, relative to the largest pencil eigenvalue.
pub const KERNEL_TOL: f64 = 1e-8;

/// Derivative blocks of G~ at (sigma, 0, 0), in frame coordinates: row and
/// column indices are frame components, `qy` has the q index first.
#[derive(Clone, Debug)]
pub struct Blocks {
    pub qq: DMatrix<f64>,
    pub qy: DMatrix<f64>,
    pub yy: DMatrix<f64>,
}

/// Parallel-frame transport system: dE/dsigma = -Gamma(dx/dsigma) E in the
/// active chart.
struct FrameSystem<'a> {
    geod: &'a Geodesic,
    chart: usize,
}

fn center_state(
    geod: &Geodesic,
    sigma: f64,
    chart: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (c, x, v) = geod.state_f(sigma)?;
    if c == chart {
        return Ok((x, v));
    }
    let xt = geod.scenario.manifold.transition(c, chart, &x)?;
    let j = geod.scenario.manifold.transition_jacobian(c, chart, &x)?;
    Ok((xt, &j * v))
}

impl<'a> OdeSystem for FrameSystem<'a> {
    fn dim(&self) -> usize {
        let n = self.geod.scenario.dim();
        n * n
    }
    fn rhs(&self, _c: usize, sigma: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.geod.scenario.dim();
        let (x, v) = center_state(self.geod, sigma.clamp(0.0, 1.0), self.chart)?;
        let geo = GeomCache::basic(&self.geod.scenario, &x)?;
        let gv = geo.gamma.contract_first(&v);
        let e = DMatrix::from_column_slice(n, n, y.as_slice());
        let de = -&gv * e;
        Ok(DVector::from_column_slice(de.as_slice()))
    }
}

/// The localized Lagrangian around a center geodesic: caches the parallel
/// frame and exposes G~ and its derivative blocks at frame offsets.
pub struct LocalizedLagrangian<'a> {
    pub geod: &'a Geodesic,
    /// Frame transport per chart piece of the center curve, in the
    /// F-constant parameter sigma.
    pieces: Vec<(f64, f64, usize, DenseOde)>,
    /// Chart-switch corrections (sigma, S): the chart-affine tubes on the
    /// two sides of a switch agree only to first order in the offset, so the
    /// index form picks up the boundary term
    /// S[xi, xi] = -1/2 G~_y . E_R^{-1} D^2phi[E_L xi, E_L xi]
    /// concentrated at the switch instant.
    switch_corrections: Vec<(f64, DMatrix<f64>)>,
}

impl<'a> LocalizedLagrangian<'a> {
    pub fn build(geod: &'a Geodesic, opts: &OdeOptions) -> Result<Self> {
        let n = geod.scenario.dim();
        let mut bounds = vec![0.0];
        bounds.extend(geod.base.switches.iter().map(|(s, _, _)| geod.sigma_of_s(*s)));
        bounds.push(1.0);
        let (chart0, _, _) = geod.state(0.0);
        let mut chart = chart0;
        let mut e = DMatrix::<f64>::identity(n, n);
        let mut pieces = Vec::new();
        let mut switch_corrections = Vec::new();
        for (i, w) in bounds.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            if b - a < 1e-12 {
                continue;
            }
            let sys = FrameSystem { geod, chart };
            let y0 = DVector::from_column_slice(e.as_slice());
            let sol = ode::integrate(&sys, 0, y0, a, b, &[], opts)?;
            e = DMatrix::from_column_slice(n, n, sol.end_state().1.as_slice());
            pieces.push((a, b, chart, sol));
            if i < geod.base.switches.len() {
                let (s_sw, from, to) = geod.base.switches[i];
                let (_, x, _) = geod.state(s_sw);
                let x_from = if geod.state(s_sw).0 == from {
                    x
                } else {
                    geod.scenario.manifold.transition(to, from, &x)?
                };
                let manifold = &geod.scenario.manifold;
                let dphi = manifold.transition_jacobian(from, to, &x_from)?;
                let e_left = e.clone();
                e = &dphi * e;
                chart = to;
                // Boundary correction: momentum G~_y is frame invariant, so
                // evaluate it on the left side.
                let sigma_sw = geod.sigma_of_s(s_sw);
                let mut v = geod.state(s_sw).2;
                if geod.state(s_sw).0 != from {
                    v = manifold.transition_jacobian(to, from, &geod.state(s_sw).1)? * v;
                }
                let p = RandersPoint::at(&geod.scenario, &x_from)?;
                // d sigma / d s rescaling: F-constant velocity.
                let v_sigma = &v * (geod.f_length / p.f(&v));
                let gy = e_left.transpose() * p.f2_y(&v_sigma);
                let m_vec = e
                    .clone()
                    .transpose()
                    .lu()
                    .solve(&gy)
                    .ok_or_else(|| Error::Numerical("singular frame at switch".into()))?;
                let mut s_mat = DMatrix::zeros(n, n);
                for u in 0..n {
                    for vv in 0..=u {
                        let d2 = manifold.transition_hessian(
                            from,
                            to,
                            &x_from,
                            &e_left.column(u).into_owned(),
                            &e_left.column(vv).into_owned(),
                        )?;
                        let val = -0.5 * m_vec.dot(&d2);
                        s_mat[(u, vv)] = val;
                        s_mat[(vv, u)] = val;
                    }
                }
                switch_corrections.push((sigma_sw, s_mat));
            }
        }
        Ok(LocalizedLagrangian { geod, pieces, switch_corrections })
    }

    fn piece_at(&self, sigma: f64) -> &(f64, f64, usize, DenseOde) {
        self.pieces
            .iter()
            .find(|(a, b, _, _)| sigma >= *a && sigma <= *b)
            .unwrap_or_else(|| self.pieces.last().unwrap())
    }

    /// Frame, frame derivative, chart, center position and velocity at sigma.
    pub fn frame(
        &self,
        sigma: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, usize, DVector<f64>, DVector<f64>)> {
        let n = self.geod.scenario.dim();
        let (_, _, chart, sol) = self.piece_at(sigma);
        let (_, y) = sol.sample(sigma);
        let e = DMatrix::from_column_slice(n, n, y.as_slice());
        let (x, v) = center_state(self.geod, sigma, *chart)?;
        let geo = GeomCache::basic(&self.geod.scenario, &x)?;
        let de = -geo.gamma.contract_first(&v) * &e;
        Ok((e, de, *chart, x, v))
    }

    /// G~(sigma, q, y) at finite frame offsets: F^2 evaluated on the varied
    /// curve with chart position x + E q and chart velocity v + E' q + E y.
    pub fn g_tilde(&self, sigma: f64, q: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let (e, de, _, x, v) = self.frame(sigma)?;
        let xs = &x + &e * q;
        let vs = &v + &de * q + &e * y;
        let p = RandersPoint::at(&self.geod.scenario, &xs)?;
        if p.f(&vs).abs() < 1e-12 {
            return Err(Error::Degenerate(
                "varied curve hits the singular set of G~".into(),
            ));
        }
        Ok(p.f2(&vs))
    }

    /// First derivatives (G~_q, G~_y) at frame offset (q, y).
    pub fn first_derivatives(
        &self,
        sigma: f64,
        q: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let (e, de, _, x, v) = self.frame(sigma)?;
        let xs = &x + &e * q;
        let vs = &v + &de * q + &e * y;
        let p = RandersPoint::at(&self.geod.scenario, &xs)?;
        let fx = p.f2_x(&vs);
        let fy = p.f2_y(&vs);
        Ok((e.transpose() * &fx + de.transpose() * &fy, e.transpose() * &fy))
    }

    /// Second-derivative blocks at (sigma, 0, 0).
    pub fn blocks(&self, sigma: f64) -> Result<Blocks> {
        let (e, de, _, x, v) = self.frame(sigma)?;
        let scn = &self.geod.scenario;
        let p = RandersPoint::at(scn, &x)?;
        let m_yy = p.f2_yy(&v);
        // f2_yx rows are y indices, columns x indices; m_xy has x rows.
        let m_xy = randers::f2_yx(scn, &x, &v)?.transpose();
        let m_xx = randers::f2_xx(scn, &x, &v)?;
        let ee = |a: &DMatrix<f64>, l: &DMatrix<f64>, r: &DMatrix<f64>| l.transpose() * a * r;
        let qq = ee(&m_xx, &e, &e)
            + ee(&m_xy, &e, &de).transpose()
            + ee(&m_xy, &e, &de)
            + ee(&m_yy, &de, &de);
        // Mixed block: careful with which factor carries E'.
        // d_q d_y G~ = E^T M_xy^T? Expand: G~(q,y) = F^2(x+Eq, v+E'q+Ey).
        // d_y = E^T F2_y; then d_q of that = E^T (M_yx E + M_yy E') with
        // M_yx = m_xy^T. Result rows are y indices; transpose for q-first.
        let qy = (e.transpose() * (m_xy.transpose() * &e + &m_yy * &de)).transpose();
        let yy = ee(&m_yy, &e, &e);
        Ok(Blocks { qq, qy, yy })
    }
}

/// Vector-valued hat-function basis on a uniform grid of [0, 1]: m interior
/// nodes, dimension m * n.
#[derive(Clone, Copy, Debug)]
pub struct H1Basis {
    pub m: usize,
    pub n: usize,
}

impl H1Basis {
    pub fn new(m: usize, n: usize) -> Self {
        H1Basis { m, n }
    }
    pub fn dim(&self) -> usize {
        self.m * self.n
    }
    pub fn h(&self) -> f64 {
        1.0 / (self.m + 1) as f64
    }
    /// Value of hat j (interior node index 1..=m) at sigma.
    pub fn hat(&self, j: usize, sigma: f64) -> f64 {
        let h = self.h();
        (1.0 - (sigma / h - j as f64).abs()).max(0.0)
    }
    /// Samples a coefficient vector as a field (value, derivative) at sigma.
    pub fn field(&self, coef: &DVector<f64>, sigma: f64) -> (DVector<f64>, DVector<f64>) {
        let h = self.h();
        let e = ((sigma / h).floor() as usize).min(self.m);
        let t = sigma / h - e as f64;
        let node = |j: usize| -> DVector<f64> {
            if j >= 1 && j <= self.m {
                coef.rows((j - 1) * self.n, self.n).into_owned()
            } else {
                DVector::zeros(self.n)
            }
        };
        let a = node(e);
        let b = node(e + 1);
        (&a * (1.0 - t) + &b * t, (b - a) / h)
    }
}

// 3-point Gauss-Legendre nodes and weights on [0, 1].
const GAUSS_X: [f64; 3] = [0.112701665379258, 0.5, 0.887298334620742];
const GAUSS_W: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

struct ElementContribution {
    element: usize,
    /// 2x2 node-block layout, each n x n: [left-left, left-right,
    /// right-left, right-right].
    b: [DMatrix<f64>; 4],
    g: [DMatrix<f64>; 4],
}

fn element_contributions(
    lagr: &LocalizedLagrangian<'_>,
    basis: &H1Basis,
) -> Result<Vec<ElementContribution>> {
    let n = basis.n;
    let h = basis.h();
    (0..=basis.m)
        .into_par_iter()
        .map(|e| {
            let mut b = std::array::from_fn(|_| DMatrix::zeros(n, n));
            let mut g = std::array::from_fn(|_| DMatrix::zeros(n, n));
            // The blocks jump at chart switches; split the quadrature there
            // so every Gauss panel sees a smooth integrand.
            let (lo, hi) = (e as f64 * h, (e + 1) as f64 * h);
            let mut cuts = vec![lo];
            for (sigma, _) in &lagr.switch_corrections {
                if *sigma > lo && *sigma < hi {
                    cuts.push(*sigma);
                }
            }
            cuts.push(hi);
            for seg in cuts.windows(2) {
                let len = seg[1] - seg[0];
                if len < 1e-14 {
                    continue;
                }
                for (gx, gw) in GAUSS_X.iter().zip(GAUSS_W) {
                    let sigma = seg[0] + gx * len;
                    let blocks = lagr.blocks(sigma)?;
                    let w = 0.5 * gw * len;
                    // Hat values and slopes at this point: left node e,
                    // right node e+1 of the element.
                    let t = sigma / h - e as f64;
                    let phi = [1.0 - t, t];
                    let dphi = [-1.0 / h, 1.0 / h];
                    for (u, v) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
                        let idx = 2 * u + v;
                        b[idx] += (&blocks.qq * (phi[u] * phi[v])
                            + &blocks.qy * (phi[u] * dphi[v])
                            + blocks.qy.transpose() * (dphi[u] * phi[v])
                            + &blocks.yy * (dphi[u] * dphi[v]))
                            * w;
                        g[idx] += &blocks.yy * (dphi[u] * dphi[v] * w);
                    }
                }
            }
            Ok(ElementContribution { element: e, b, g })
        })
        .collect()
}

/// Index form B and H1 Gram matrix G on the hat basis, assembled together:
/// B[i,j] = 1/2 int (G~_qq[xi_i,xi_j] + G~_qy[xi_i, xi_j'] + G~_qy^T
/// [xi_i', xi_j] + G~_yy[xi_i', xi_j']) dsigma, G from G~_yy alone.
pub fn assemble(
    lagr: &LocalizedLagrangian<'_>,
    basis: &H1Basis,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = basis.n;
    let dim = basis.dim();
    let mut b_mat = DMatrix::zeros(dim, dim);
    let mut g_mat = DMatrix::zeros(dim, dim);
    for c in element_contributions(lagr, basis)? {
        let e = c.element;
        for (u, v) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
            // Element nodes e and e+1; interior nodes are 1..=m.
            let (iu, iv) = (e + u, e + v);
            if iu < 1 || iu > basis.m || iv < 1 || iv > basis.m {
                continue;
            }
            let idx = 2 * u + v;
            let mut bb = b_mat.view_mut(((iu - 1) * n, (iv - 1) * n), (n, n));
            bb += &c.b[idx];
            let mut gg = g_mat.view_mut(((iu - 1) * n, (iv - 1) * n), (n, n));
            gg += &c.g[idx];
        }
    }
    // Concentrated chart-switch terms: S couples the two nodes adjacent to
    // the switch instant, preserving the block-tridiagonal layout.
    for (sigma, s_mat) in &lagr.switch_corrections {
        let e = ((sigma / (1.0 / (basis.m + 1) as f64)).floor() as usize).min(basis.m);
        for iu in [e, e + 1] {
            for iv in [e, e + 1] {
                if iu < 1 || iu > basis.m || iv < 1 || iv > basis.m {
                    continue;
                }
                let w = basis.hat(iu, *sigma) * basis.hat(iv, *sigma);
                let mut bb = b_mat.view_mut(((iu - 1) * n, (iv - 1) * n), (n, n));
                bb += s_mat * w;
            }
        }
    }
    // Symmetrize away quadrature-order noise.
    let b_sym = (&b_mat + b_mat.transpose()) * 0.5;
    let g_sym = (&g_mat + g_mat.transpose()) * 0.5;
    Ok((b_sym, g_sym))
}

pub fn second_variation_matrix(
    lagr: &LocalizedLagrangian<'_>,
    basis: &H1Basis,
) -> Result<DMatrix<f64>> {
    Ok(assemble(lagr, basis)?.0)
}

pub fn h1_gram(lagr: &LocalizedLagrangian<'_>, basis: &H1Basis) -> Result<DMatrix<f64>> {
    Ok(assemble(lagr, basis)?.1)
}

/// Negative-eigenvalue count of a symmetric block-tridiagonal matrix with
/// n x n blocks, by block LDL^T (Sylvester inertia). The hat basis couples
/// only adjacent nodes, so B - t G is block tridiagonal for any shift t.
fn block_tridiagonal_negatives(a: &DMatrix<f64>, n: usize) -> Result<usize> {
    let m = a.nrows() / n;
    let mut neg = 0usize;
    let mut d_prev: Option<DMatrix<f64>> = None;
    for j in 0..m {
        let mut d = a.view((j * n, j * n), (n, n)).into_owned();
        if j > 0 {
            let off = a.view((j * n, (j - 1) * n), (n, n)).into_owned();
            let dp = d_prev.as_ref().unwrap();
            let sol = dp
                .clone()
                .lu()
                .solve(&off.transpose())
                .ok_or_else(|| Error::Numerical("singular pivot block in inertia".into()))?;
            d -= &off * sol;
        }
        let d = (&d + d.transpose()) * 0.5;
        let eig = d.symmetric_eigenvalues();
        neg += eig.iter().filter(|l| **l < 0.0).count();
        d_prev = Some(d);
    }
    Ok(neg)
}

/// Largest |lambda| of the pencil B v = lambda G v, by a few power
/// iterations on G^{-1} B (deterministic start vector).
fn pencil_scale(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Gram matrix not positive definite".into()))?;
    let dim = b.nrows();
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + (i as f64 * 0.37).sin());
    v /= v.norm();
    let mut lam = 1.0_f64;
    for _ in 0..40 {
        let w = chol.solve(&(b * &v));
        lam = w.norm();
        if lam == 0.0 {
            break;
        }
        v = w / lam;
    }
    Ok(lam.max(1e-300))
}

#[derive(Clone, Copy, Debug)]
pub struct DiscreteIndex {
    pub index: usize,
    pub kernel_dim: usize,
    /// Absolute shift used for the kernel window.
    pub shift: f64,
}

/// Morse index and kernel dimension from the pencil B v = lambda G v:
/// index = #{lambda < -tol}, kernel_dim = #{|lambda| <= tol}, with tol
/// relative to the largest |lambda|. Counts come from matrix inertia at the
/// two shifts, so no full eigendecomposition is needed.
pub fn discrete_index(
    lagr: &LocalizedLagrangian<'_>,
    basis: &H1Basis,
    kernel_tol: f64,
) -> Result<DiscreteIndex> {
    let (b, g) = assemble(lagr, basis)?;
    discrete_index_from(&b, &g, basis.n, kernel_tol)
}

pub fn discrete_index_from(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    n: usize,
    kernel_tol: f64,
) -> Result<DiscreteIndex> {
    let shift = kernel_tol * pencil_scale(b, g)?;
    // #{lambda < t} is the negative count of B - t G.
    let below_minus = block_tridiagonal_negatives(&(b + g * shift), n)?;
    let below_plus = block_tridiagonal_negatives(&(b - g * shift), n)?;
    Ok(DiscreteIndex {
        index: below_minus,
        kernel_dim: below_plus - below_minus,
        shift,
    })
}

/// Full pencil spectrum (ascending), for small problems and cross-checks:
/// Cholesky reduction to a standard symmetric eigenproblem.
pub fn pencil_spectrum(b: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Gram matrix not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(b.nrows(), b.nrows()))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let reduced = &linv * b * linv.transpose();
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(eig)
}

/// Matrix of the compact part K on the basis: columns are the basis
/// projections of W_1 + W_2 + W_3 from the explicit integral formulas, so
/// that G (I + K) reproduces B as a bilinear form. `n_quad` uniform
/// trapezoid panels (rounded up to a multiple of the element count).
pub fn operator_k_columns(
    lagr: &LocalizedLagrangian<'_>,
    basis: &H1Basis,
    n_quad: usize,
) -> Result<DMatrix<f64>> {
    let n = basis.n;
    let dim = basis.dim();
    let elems = basis.m + 1;
    let panels = n_quad.div_ceil(elems) * elems;
    let h = 1.0 / panels as f64;

    // Node list (position, evaluation point): uniform panel boundaries plus
    // a duplicated node at every chart switch, evaluated just left and just
    // right of the jump so every trapezoid cell sees smooth data.
    let mut nodes: Vec<(f64, f64)> = (0..=panels).map(|i| {
        let s = i as f64 * h;
        (s, s)
    }).collect();
    for (a, _) in &lagr.switch_corrections {
        nodes.push((*a, a - 1e-9));
        nodes.push((*a, a + 1e-9));
    }
    // Hat slopes jump at element boundaries; duplicate those nodes as well
    // so the prefix trapezoids never mix the two one-sided slopes.
    for j in 1..=basis.m {
        let p = j as f64 * basis.h();
        nodes.push((p, p - 1e-9));
        nodes.push((p, p + 1e-9));
    }
    nodes.sort_by(|p, q| p.1.partial_cmp(&q.1).unwrap());
    let n_nodes = nodes.len();
    let last = n_nodes - 1;

    // Grid data: blocks and inverse of G~_yy at the nodes.
    let grid: Vec<(Blocks, DMatrix<f64>)> = nodes
        .par_iter()
        .map(|(_, eval)| {
            let blocks = lagr.blocks(eval.clamp(0.0, 1.0))?;
            let inv = blocks
                .yy
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numerical("G~_yy not invertible".into()))?;
            Ok((blocks, inv))
        })
        .collect::<Result<_>>()?;

    // Per-node trapezoid weight: half the sum of the adjacent cell widths.
    let cell = |i: usize| nodes[i + 1].0 - nodes[i].0;
    let weight = |i: usize| -> f64 {
        let left = if i > 0 { cell(i - 1) } else { 0.0 };
        let right = if i < last { cell(i) } else { 0.0 };
        0.5 * (left + right)
    };

    // int_0^1 G~^{yy}, for the endpoint constants.
    let mut inv_total = DMatrix::zeros(n, n);
    for (i, (_, inv)) in grid.iter().enumerate() {
        inv_total += inv * weight(i);
    }
    let inv_total_lu = inv_total.lu();

    let g_mat = assemble(lagr, basis)?.1;
    let g_lu = g_mat.clone().lu();

    let mut k_mat = DMatrix::zeros(dim, dim);
    let cols: Vec<DVector<f64>> = (0..dim)
        .into_par_iter()
        .map(|a| {
            let mut coef = DVector::zeros(dim);
            coef[a] = 1.0;
            // Sample xi and xi' on the grid.
            let fields: Vec<(DVector<f64>, DVector<f64>)> = nodes
                .iter()
                .map(|(_, eval)| basis.field(&coef, eval.clamp(0.0, 1.0)))
                .collect();
            // Prefix integrals int_0^sigma G~_qq xi and int_0^sigma G~_qy^T
            // xi' (the y-then-q block contracted against xi').
            let mut pre1 = Vec::with_capacity(n_nodes);
            let mut pre3 = Vec::with_capacity(n_nodes);
            let mut acc1 = DVector::zeros(n);
            let mut acc3 = DVector::zeros(n);
            let mut last1 = DVector::zeros(n);
            let mut last3 = DVector::zeros(n);
            for (i, (blocks, _)) in grid.iter().enumerate() {
                let v1 = &blocks.qq * &fields[i].0;
                let v3 = &blocks.qy * &fields[i].1;
                if i > 0 {
                    let d = cell(i - 1);
                    acc1 += (&last1 + &v1) * (0.5 * d);
                    acc3 += (&last3 + &v3) * (0.5 * d);
                    // Concentrated switch terms step the G~_qq prefix once,
                    // inside the duplicated zero-width cell. B carries the
                    // overall 1/2, so the distributional block is
                    // 2 S delta(sigma - a).
                    for (sigma, s_mat) in &lagr.switch_corrections {
                        if nodes[i - 1].1 < *sigma && *sigma <= nodes[i].1 {
                            acc1 += s_mat * basis.field(&coef, *sigma).0 * 2.0;
                        }
                    }
                }
                pre1.push(acc1.clone());
                pre3.push(acc3.clone());
                last1 = v1;
                last3 = v3;
            }
            // Endpoint constants from the vanishing boundary conditions.
            let mut rhs1 = DVector::zeros(n);
            let mut rhs2 = DVector::zeros(n);
            let mut rhs3 = DVector::zeros(n);
            for (i, (blocks, inv)) in grid.iter().enumerate() {
                let w = weight(i);
                rhs1 += inv * &pre1[i] * w;
                rhs2 += inv * (blocks.qy.transpose() * &fields[i].0) * w;
                rhs3 += inv * &pre3[i] * w;
            }
            let c1 = inv_total_lu.solve(&rhs1).unwrap();
            let c2 = inv_total_lu.solve(&rhs2).map(|v| -v).unwrap();
            let c3 = inv_total_lu.solve(&rhs3).unwrap();
            // W' on the grid, summed over the three parts.
            let wdot: Vec<DVector<f64>> = (0..n_nodes)
                .map(|i| {
                    let (blocks, inv) = &grid[i];
                    inv * (-&pre1[i] + &c1 + blocks.qy.transpose() * &fields[i].0 + &c2 - &pre3[i] + &c3)
                })
                .collect();
            // Project onto the basis through the Gram matrix:
            // b_i = 1/2 int G~_yy[xi_i', W']. Hat slopes are piecewise
            // constant, so integrate element by element (element boundaries
            // are grid nodes by construction, so no cell straddles one).
            let mut b_vec = DVector::zeros(dim);
            let hj = basis.h();
            let mut ints = vec![DVector::<f64>::zeros(n); elems];
            for i in 0..last {
                let d = cell(i);
                if d == 0.0 {
                    continue;
                }
                let mid = 0.5 * (nodes[i].0 + nodes[i + 1].0);
                let e = ((mid / hj).floor() as usize).min(elems - 1);
                ints[e] += (&grid[i].0.yy * &wdot[i] + &grid[i + 1].0.yy * &wdot[i + 1])
                    * (0.5 * d);
            }
            for (e, int) in ints.iter().enumerate() {
                for (node, slope) in [(e, -1.0 / hj), (e + 1, 1.0 / hj)] {
                    if node >= 1 && node <= basis.m {
                        let mut seg = b_vec.rows_mut((node - 1) * n, n);
                        seg += int * (0.5 * slope);
                    }
                }
            }
            g_lu.solve(&b_vec).unwrap()
        })
        .collect();
    for (a, col) in cols.into_iter().enumerate() {
        k_mat.set_column(a, &col);
    }
    Ok(k_mat)
}

/// H1 norm of the energy gradient at a frame-offset curve around the center
/// (offset = None means the center itself). A true geodesic returns a value
/// at integrator-tolerance level.
pub fn gradient_residual(
    lagr: &LocalizedLagrangian<'_>,
    n_quad: usize,
    offset: Option<&(dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Sync)>,
) -> Result<f64> {
    let n = lagr.geod.scenario.dim();
    let h = 1.0 / n_quad as f64;
    let zero = DVector::zeros(n);
    let at = |sigma: f64| -> (DVector<f64>, DVector<f64>) {
        offset.map(|f| f(sigma)).unwrap_or((zero.clone(), zero.clone()))
    };
    // Grid of G~_q, G~_y at the offset curve and G~_yy^{-1} at the center.
    let grid: Vec<(DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = (0..=n_quad)
        .into_par_iter()
        .map(|i| {
            let sigma = i as f64 * h;
            let (q, qd) = at(sigma);
            let (gq, gy) = lagr.first_derivatives(sigma, &q, &qd)?;
            let yy = lagr.blocks(sigma)?.yy;
            let inv = yy
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numerical("G~_yy not invertible".into()))?;
            Ok((gq, gy, yy, inv))
        })
        .collect::<Result<_>>()?;

    // Prefix integral of G~_q and the endpoint constant of Eq-style
    // boundary matching.
    let mut pre = Vec::with_capacity(n_quad + 1);
    let mut acc = DVector::zeros(n);
    for i in 0..=n_quad {
        if i > 0 {
            acc += (&grid[i - 1].0 + &grid[i].0) * (0.5 * h);
        }
        pre.push(acc.clone());
    }
    let mut inv_total = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for i in 0..=n_quad {
        let w = if i == 0 || i == n_quad { 0.5 * h } else { h };
        inv_total += &grid[i].3 * w;
        rhs += &grid[i].3 * (&pre[i] - &grid[i].1) * w;
    }
    let c = inv_total.lu().solve(&rhs).unwrap();
    // W' = G~^{yy} (-prefix + G~_y + C); norm^2 = 1/2 int G~_yy[W', W'].
    let mut norm2 = 0.0;
    for i in 0..=n_quad {
        let w = if i == 0 || i == n_quad { 0.5 * h } else { h };
        let wdot = &grid[i].3 * (-&pre[i] + &grid[i].1 + &c);
        norm2 += 0.5 * w * wdot.dot(&(&grid[i].2 * &wdot));
    }
    Ok(norm2.sqrt())
}

/// Discrete energy of a frame-offset curve, for finite-difference oracles:
/// 1/2 int G~(sigma, q, q') by composite Gauss quadrature.
pub fn energy_of_offset(
    lagr: &LocalizedLagrangian<'_>,
    n_elems: usize,
    offset: &dyn Fn(f64) -> (DVector<f64>, DVector<f64>),
) -> Result<f64> {
    let h = 1.0 / n_elems as f64;
    let mut total = 0.0;
    for e in 0..n_elems {
        for (gx, gw) in GAUSS_X.iter().zip(GAUSS_W) {
            let sigma = (e as f64 + gx) * h;
            let (q, qd) = offset(sigma);
            total += 0.5 * gw * h * lagr.g_tilde(sigma, &q, &qd)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::ChartPoint;
    use crate::geodesic::integrate_geodesic;
    use crate::jacobi;
    use crate::scenario::catalog;
    use nalgebra::dvector;
    use std::sync::Arc;

    fn opts() -> OdeOptions {
        OdeOptions::default()
    }

    fn sphere_geodesic(l: f64) -> Geodesic {
        let scn = Arc::new(catalog::sphere(1.0));
        integrate_geodesic(
            &scn,
            &ChartPoint::new(0, dvector![0.0, 0.0]),
            &dvector![l / 2.0, 0.0],
            &opts(),
        )
        .unwrap()
    }

    #[test]
    fn flat_bending_matrix() {
        let scn = Arc::new(catalog::flat(2));
        let g = integrate_geodesic(
            &scn,
            &ChartPoint::new(0, dvector![0.0, 0.0]),
            &dvector![1.0, 0.0],
            &opts(),
        )
        .unwrap();
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let basis = H1Basis::new(8, 2);
        let (b, gram) = assemble(&lagr, &basis).unwrap();
        // F^2 = |y|^2: B = Gram = standard stiffness scaled by G~_yy = 2I.
        assert!((&b - &gram).norm() < 1e-9);
        let h = basis.h();
        for i in 0..basis.dim() {
            assert!((b[(i, i)] - 2.0 / h).abs() < 1e-9);
        }
        let di = discrete_index(&lagr, &basis, KERNEL_TOL).unwrap();
        assert_eq!(di.index, 0);
        assert_eq!(di.kernel_dim, 0);
        // K = 0 for the flat segment.
        let k = operator_k_columns(&lagr, &basis, 200).unwrap();
        assert!(k.norm() < 1e-8, "K norm {}", k.norm());
    }

    #[test]
    fn sphere_indices_match_jacobi() {
        for (l_factor, want) in [(1.5, 1usize), (2.5, 2usize)] {
            let g = sphere_geodesic(l_factor * std::f64::consts::PI);
            let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
            let basis = H1Basis::new(100, 2);
            let di = discrete_index(&lagr, &basis, KERNEL_TOL).unwrap();
            assert_eq!(di.index, want, "L = {l_factor} pi");
            assert_eq!(di.kernel_dim, 0);
            let mu = jacobi::morse_index(&g, &opts()).unwrap();
            assert_eq!(di.index, mu);
        }
    }

    #[test]
    fn antipodal_kernel() {
        let g = sphere_geodesic(std::f64::consts::PI);
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let basis = H1Basis::new(120, 2);
        let di = discrete_index(&lagr, &basis, 1e-4).unwrap();
        assert_eq!(di.index, 0);
        assert_eq!(di.kernel_dim, 1, "shift {}", di.shift);
    }

    #[test]
    fn pencil_spectrum_signs() {
        let g = sphere_geodesic(1.5 * std::f64::consts::PI);
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let basis = H1Basis::new(40, 2);
        let (b, gram) = assemble(&lagr, &basis).unwrap();
        let spec = pencil_spectrum(&b, &gram).unwrap();
        assert_eq!(spec.iter().filter(|l| **l < 0.0).count(), 1);
        // Eigenvalues of I + K accumulate near 1: the median is close to 1.
        let med = spec[spec.len() / 2];
        assert!((med - 1.0).abs() < 0.2, "median {med}");
    }

    #[test]
    fn b_matches_energy_finite_differences() {
        let scn = Arc::new(catalog::sphere_drift(0.2));
        let g = integrate_geodesic(
            &scn,
            &ChartPoint::new(0, dvector![0.1, -0.2]),
            &dvector![0.6, 0.4],
            &opts(),
        )
        .unwrap();
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let basis = H1Basis::new(11, 2);
        let (b, _) = assemble(&lagr, &basis).unwrap();
        assert!((&b - b.transpose()).norm() < 1e-10 * b.norm());
        // Quadratic form along a couple of basis directions against a
        // 5-point second difference of the energy.
        for a in [3usize, 10, 17] {
            let mut coef = DVector::zeros(basis.dim());
            coef[a] = 1.0;
            let f = |r: f64| {
                let c = coef.clone();
                let basis2 = basis;
                energy_of_offset(&lagr, 60, &move |sigma| {
                    let (q, qd) = basis2.field(&c, sigma);
                    (q * r, qd * r)
                })
                .unwrap()
            };
            let h = 1e-3;
            let d2 = (-f(-2.0 * h) + 16.0 * f(-h) - 30.0 * f(0.0) + 16.0 * f(h)
                - f(2.0 * h))
                / (12.0 * h * h);
            let want = b[(a, a)];
            assert!(
                (d2 - want).abs() < 1e-5 * (1.0 + want.abs()),
                "a = {a}: {d2} vs {want}"
            );
        }
    }

    #[test]
    fn operator_k_consistency() {
        let g = sphere_geodesic(1.5 * std::f64::consts::PI);
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let basis = H1Basis::new(24, 2);
        let (b, gram) = assemble(&lagr, &basis).unwrap();
        let k = operator_k_columns(&lagr, &basis, 600).unwrap();
        let lhs = &gram * (DMatrix::identity(basis.dim(), basis.dim()) + &k);
        let lhs_sym = (&lhs + lhs.transpose()) * 0.5;
        let rel = (&lhs_sym - &b).norm() / b.norm();
        assert!(rel < 1e-4, "relative mismatch {rel}");
    }

    #[test]
    fn gradient_residual_detects_non_geodesic() {
        let scn = Arc::new(catalog::flat(2));
        let g = integrate_geodesic(
            &scn,
            &ChartPoint::new(0, dvector![0.0, 0.0]),
            &dvector![1.0, 0.0],
            &opts(),
        )
        .unwrap();
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let exact = gradient_residual(&lagr, 400, None).unwrap();
        assert!(exact < 1e-10, "flat residual {exact}");
        let perturbed = gradient_residual(
            &lagr,
            400,
            Some(&|sigma: f64| {
                let v = 0.01 * (std::f64::consts::PI * sigma).sin();
                let d = 0.01 * std::f64::consts::PI * (std::f64::consts::PI * sigma).cos();
                (dvector![0.0, v], dvector![0.0, d])
            }),
        )
        .unwrap();
        assert!(perturbed > 1e-4, "perturbed residual {perturbed}");

        let gs = sphere_geodesic(1.5 * std::f64::consts::PI);
        let lagr_s = LocalizedLagrangian::build(&gs, &opts()).unwrap();
        let res = gradient_residual(&lagr_s, 400, None).unwrap();
        assert!(res < 1e-6, "sphere residual {res}");
    }

    #[test]
    fn index_stable_under_refinement() {
        let scn = Arc::new(catalog::sphere_drift(0.1));
        let g = integrate_geodesic(
            &scn,
            &ChartPoint::new(0, dvector![0.0, 0.1]),
            &dvector![2.6, 0.3],
            &opts(),
        )
        .unwrap();
        let lagr = LocalizedLagrangian::build(&g, &opts()).unwrap();
        let d1 = discrete_index(&lagr, &H1Basis::new(60, 2), KERNEL_TOL).unwrap();
        let d2 = discrete_index(&lagr, &H1Basis::new(120, 2), KERNEL_TOL).unwrap();
        assert_eq!(d1.index, d2.index);
        assert_eq!(d1.kernel_dim, d2.kernel_dim);
    }

}
