//! Adaptive Dormand-Prince 5(4) integrator with cubic Hermite dense output
//! and support for chart switches between accepted steps.
//!
//! Dense output stores, per accepted step, the endpoint states and
//! derivatives plus the active chart; sampling interpolates inside the step
//! that contains the query parameter. Chart switches happen only at step
//! boundaries, so every stored step lives entirely in one chart.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Right-hand side of a first-order system on a chart atlas.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, chart: usize, s: f64, y: &DVector<f64>) -> Result<DVector<f64>>;

    /// Chart to switch to after an accepted step, if any.
    fn switch_target(&self, _chart: usize, _y: &DVector<f64>) -> Option<usize> {
        None
    }

    /// Transforms the full ODE state from one chart to another.
    fn switch_state(&self, _from: usize, _to: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(y.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_initial: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-10, atol: 1e-12, h_initial: 1e-3, h_min: 1e-13, max_steps: 2_000_000 }
    }
}

/// One accepted integration step, stored for dense output.
#[derive(Clone, Debug)]
pub struct Step {
    pub s0: f64,
    pub s1: f64,
    pub y0: DVector<f64>,
    pub y1: DVector<f64>,
    pub f0: DVector<f64>,
    pub f1: DVector<f64>,
    pub chart: usize,
}

/// Dense solution of one integration run over [s_start, s_end].
#[derive(Clone, Debug)]
pub struct DenseOde {
    pub steps: Vec<Step>,
    pub s_start: f64,
    pub s_end: f64,
    /// Record of chart switches (parameter value, old chart, new chart).
    pub switches: Vec<(f64, usize, usize)>,
}

impl DenseOde {
    pub fn end_state(&self) -> (usize, &DVector<f64>) {
        let last = self.steps.last().expect("empty solution");
        (last.chart, &last.y1)
    }

    /// Chart and interpolated state at parameter `s` (clamped to the
    /// integration range). Cubic Hermite inside the containing step.
    pub fn sample(&self, s: f64) -> (usize, DVector<f64>) {
        let step = self.find_step(s);
        let h = step.s1 - step.s0;
        if h == 0.0 {
            return (step.chart, step.y0.clone());
        }
        let t = ((s - step.s0) / h).clamp(0.0, 1.0);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let y = &step.y0 * h00 + &step.f0 * (h10 * h) + &step.y1 * h01 + &step.f1 * (h11 * h);
        (step.chart, y)
    }

    fn find_step(&self, s: f64) -> &Step {
        // Binary search by step start; steps are sorted and contiguous.
        let steps = &self.steps;
        if s <= steps[0].s0 {
            return &steps[0];
        }
        if s >= steps[steps.len() - 1].s1 {
            return &steps[steps.len() - 1];
        }
        let mut lo = 0usize;
        let mut hi = steps.len() - 1;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if steps[mid].s1 < s {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        &steps[lo]
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `sys` from `s_start` to `s_end` (forward only), forcing step
/// boundaries at each value in `break_points` (must lie inside the range,
/// sorted ascending; duplicates and out-of-range values are ignored).
pub fn integrate(
    sys: &dyn OdeSystem,
    chart0: usize,
    y0: DVector<f64>,
    s_start: f64,
    s_end: f64,
    break_points: &[f64],
    opts: &OdeOptions,
) -> Result<DenseOde> {
    assert!(s_end > s_start, "integration range must be forward");
    let n = sys.dim();
    assert_eq!(y0.len(), n);

    let mut breaks: Vec<f64> = break_points
        .iter()
        .copied()
        .filter(|b| *b > s_start && *b < s_end)
        .collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.push(s_end);
    let mut next_break = 0usize;

    let mut chart = chart0;
    let mut s = s_start;
    let mut y = y0;
    let mut f = sys.rhs(chart, s, &y)?;
    let mut h = opts.h_initial.min(s_end - s_start);
    let mut steps: Vec<Step> = Vec::new();
    let mut switches: Vec<(f64, usize, usize)> = Vec::new();
    let mut k = vec![DVector::zeros(n); 7];

    for _ in 0..opts.max_steps {
        if s >= s_end {
            break;
        }
        // Never step past the next forced boundary.
        while breaks[next_break] <= s + 1e-14 * (1.0 + s.abs()) {
            next_break += 1;
            if next_break >= breaks.len() {
                break;
            }
        }
        let target = breaks[next_break.min(breaks.len() - 1)];
        if s + h > target {
            h = target - s;
        }
        if h < opts.h_min {
            return Err(Error::StepUnderflow { s });
        }

        k[0] = f.clone();
        let mut failed = false;
        for i in 0..6 {
            let mut yi = y.clone();
            for (j, kj) in k.iter().enumerate().take(i + 1) {
                if A[i][j] != 0.0 {
                    yi += kj * (A[i][j] * h);
                }
            }
            match sys.rhs(chart, s + C[i] * h, &yi) {
                Ok(v) => k[i + 1] = v,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            h *= 0.5;
            continue;
        }

        // 5th-order solution (FSAL: k[6] is the derivative at the new point).
        let mut y1 = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[5][j] != 0.0 {
                y1 += kj * (A[5][j] * h);
            }
        }
        let mut err_vec = DVector::zeros(n);
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                err_vec += kj * (E[j] * h);
            }
        }
        let mut err: f64 = 0.0;
        for i in 0..n {
            let sc = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
            err = err.max((err_vec[i] / sc).abs());
        }

        if err <= 1.0 {
            let f1 = k[6].clone();
            steps.push(Step {
                s0: s,
                s1: s + h,
                y0: y.clone(),
                y1: y1.clone(),
                f0: f.clone(),
                f1: f1.clone(),
                chart,
            });
            s += h;
            y = y1;
            f = f1;
            if let Some(to) = sys.switch_target(chart, &y) {
                y = sys.switch_state(chart, to, &y)?;
                switches.push((s, chart, to));
                chart = to;
                f = sys.rhs(chart, s, &y)?;
                if s >= s_end {
                    // Switch at the final boundary: record the post-switch
                    // state as a zero-length step so the endpoint chart is
                    // the switched one.
                    steps.push(Step {
                        s0: s,
                        s1: s,
                        y0: y.clone(),
                        y1: y.clone(),
                        f0: f.clone(),
                        f1: f.clone(),
                        chart,
                    });
                }
            }
        }
        // Standard step-size controller with safety factor.
        let scale = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h * scale).min(s_end - s_start);
    }

    if s < s_end - 1e-10 * (1.0 + s_end.abs()) {
        return Err(Error::Numerical(format!(
            "integration stalled at s = {s} before reaching {s_end}"
        )));
    }
    Ok(DenseOde { steps, s_start, s_end, switches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _c: usize, _s: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(dvector![y[1], -y[0]])
        }
    }

    #[test]
    fn oscillator_accuracy_and_dense_output() {
        let sol = integrate(
            &Oscillator,
            0,
            dvector![1.0, 0.0],
            0.0,
            10.0,
            &[],
            &OdeOptions::default(),
        )
        .unwrap();
        let (_, yend) = sol.end_state();
        assert!((yend[0] - 10.0_f64.cos()).abs() < 1e-8);
        for i in 0..=40 {
            let s = 0.25 * i as f64;
            let (_, y) = sol.sample(s);
            assert!((y[0] - s.cos()).abs() < 1e-6, "s = {s}");
        }
    }

    #[test]
    fn break_points_are_step_boundaries() {
        let sol = integrate(
            &Oscillator,
            0,
            dvector![1.0, 0.0],
            0.0,
            1.0,
            &[0.3, 0.7],
            &OdeOptions::default(),
        )
        .unwrap();
        for b in [0.3, 0.7] {
            assert!(
                sol.steps.iter().any(|st| (st.s1 - b).abs() < 1e-12),
                "no step boundary at {b}"
            );
        }
    }

    struct SwitchAtOne;
    impl OdeSystem for SwitchAtOne {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _c: usize, _s: f64, _y: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(dvector![1.0])
        }
        fn switch_target(&self, chart: usize, y: &DVector<f64>) -> Option<usize> {
            (chart == 0 && y[0] > 1.0).then_some(1)
        }
        fn switch_state(&self, _f: usize, _t: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(dvector![-y[0]])
        }
    }

    #[test]
    fn switch_hook_fires_once() {
        let sol = integrate(
            &SwitchAtOne,
            0,
            dvector![0.0],
            0.0,
            2.0,
            &[],
            &OdeOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.switches.len(), 1);
        let (chart, yend) = sol.end_state();
        assert_eq!(chart, 1);
        // After the flip the state keeps growing with slope 1.
        assert!(yend[0] < 1.0);
    }
}
