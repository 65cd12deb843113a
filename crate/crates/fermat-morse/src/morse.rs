//! Geodesic enumeration within a length budget, truncated Morse series,
//! Morse relations against built-in Poincare profiles, and the odd-image
//! lensing count on contractible scenarios.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::chart::{ChartPoint, Manifold};
use crate::error::{Error, Result};
use crate::geodesic::Geodesic;
use crate::jacobi::{self, ConjugateReport};
use crate::ode::OdeOptions;
use crate::scenario::StationaryScenario;
use crate::shooting::{self, ConnectDiagnostics};

/// Enumeration of connecting geodesics with their conjugate reports.
pub struct Enumeration {
    pub entries: Vec<(Geodesic, ConjugateReport)>,
    /// True when doubling the seed budget found no further geodesics.
    pub budget_complete: bool,
    pub diagnostics: ConnectDiagnostics,
}

/// Finds all geodesics from p0 to q0 with F-length <= l_max, sorted by
/// length, each with its conjugate-instant report. Errors when any found
/// geodesic has a conjugate endpoint (the Morse series needs non-conjugate
/// endpoints).
pub fn enumerate_geodesics(
    scn: &Arc<StationaryScenario>,
    p0: &ChartPoint,
    q0: &ChartPoint,
    l_max: f64,
    seed_budget: usize,
    seed: u64,
    opts: &OdeOptions,
) -> Result<Enumeration> {
    let (geods, diag) = shooting::connect_with_budget(scn, p0, q0, l_max, seed_budget, seed, opts)?;
    let (check, _) =
        shooting::connect_with_budget(scn, p0, q0, l_max, seed_budget * 2, seed, opts)?;
    let budget_complete = geods.len() == check.len()
        && geods
            .iter()
            .zip(&check)
            .all(|(a, b)| (a.f_length - b.f_length).abs() < 1e-6 * (1.0 + a.f_length));

    let mut entries = Vec::with_capacity(geods.len());
    for g in geods {
        let rep = jacobi::conjugate_instants(&g, jacobi::RANK_TOL, opts)?;
        if rep.endpoint_conjugate {
            return Err(Error::Degenerate(format!(
                "geodesic of length {} has a conjugate endpoint",
                g.f_length
            )));
        }
        entries.push((g, rep));
    }
    Ok(Enumeration { entries, budget_complete, diagnostics: diag })
}

/// Truncated Morse series M(r) = sum over geodesics of r^mu.
#[derive(Clone, Debug)]
pub struct MorseSeries {
    pub counts: BTreeMap<usize, usize>,
    /// Largest index whose count is provably complete within the length
    /// budget; None when the scenario has no usable length-index bound.
    pub reliable_degree: Option<usize>,
    pub length_budget: f64,
}

pub fn morse_series(
    scn: &StationaryScenario,
    enumeration: &Enumeration,
    l_max: f64,
) -> MorseSeries {
    let mut counts = BTreeMap::new();
    for (_, rep) in &enumeration.entries {
        *counts.entry(rep.mu).or_insert(0) += 1;
    }
    // A geodesic of index k is longer than k * bound, so every geodesic of
    // index <= d fits in the budget when (d + 1) * bound <= l_max.
    let reliable_degree = if let Some(b) = scn.index_length_bound() {
        let d = (l_max / b).floor() as isize - 1;
        (d >= 0 && enumeration.budget_complete).then_some(d as usize)
    } else if scn.is_flat() && scn.contractible() && enumeration.budget_complete {
        // Flat contractible: the unique geodesic has index 0.
        Some(0)
    } else {
        None
    };
    MorseSeries { counts, reliable_degree, length_budget: l_max }
}

/// Betti-number fixtures for the based path spaces showing up in the
/// catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoincareProfile {
    /// Contractible base: B_0 = 1, all higher B_k = 0.
    Contractible,
    /// Based path space of the 2-sphere: B_k = 1 for every k >= 0.
    SpherePathSpace,
    /// One lattice component of the torus path space (contractible).
    TorusComponent,
}

impl PoincareProfile {
    pub fn betti(&self, k: usize) -> usize {
        match self {
            PoincareProfile::Contractible | PoincareProfile::TorusComponent => usize::from(k == 0),
            PoincareProfile::SpherePathSpace => 1,
        }
    }

    /// Default profile for a scenario's base topology.
    pub fn for_scenario(scn: &StationaryScenario) -> Option<Self> {
        match &scn.manifold {
            Manifold::Euclidean { .. } => Some(PoincareProfile::Contractible),
            Manifold::Sphere { .. } => Some(PoincareProfile::SpherePathSpace),
            Manifold::Torus { .. } => Some(PoincareProfile::TorusComponent),
            Manifold::Extended { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MorseCheck {
    pub q_coeffs: Vec<i64>,
    pub valid: bool,
    pub checked_degree: usize,
}

/// Morse relations M(r) = P(r) + (1 + r) Q(r) on the reliable prefix:
/// Q_k = M_k - B_k - Q_{k-1} must be nonnegative for all checked k.
pub fn check_morse_relations(series: &MorseSeries, profile: PoincareProfile) -> Result<MorseCheck> {
    let d = series
        .reliable_degree
        .ok_or_else(|| Error::Degenerate("Morse series has no reliable prefix".into()))?;
    let mut q = Vec::new();
    let mut prev: i64 = 0;
    let mut valid = true;
    for k in 0..=d {
        let m = *series.counts.get(&k).unwrap_or(&0) as i64;
        let qk = m - profile.betti(k) as i64 - prev;
        if qk < 0 {
            valid = false;
        }
        q.push(qk);
        prev = qk;
    }
    Ok(MorseCheck { q_coeffs: q, valid, checked_degree: d })
}

/// Lattice class of a torus geodesic: its displacement in the universal
/// cover, in period units. The flat-torus chart never wraps, so the raw
/// endpoint carries the winding.
pub fn lattice_class(scn: &StationaryScenario, geod: &Geodesic, q0: &ChartPoint) -> Option<Vec<i64>> {
    let periods = match &scn.manifold {
        Manifold::Torus { periods } => periods.clone(),
        _ => return None,
    };
    let (_, x1, _) = geod.state(1.0);
    Some(
        x1.iter()
            .zip(q0.coords.iter())
            .zip(&periods)
            .map(|((a, b), p)| ((a - b) / p).round() as i64)
            .collect(),
    )
}

/// Groups a torus enumeration by lattice class; the Morse relations hold
/// classwise (each class is contractible and holds one geodesic).
pub fn torus_classwise(
    scn: &StationaryScenario,
    enumeration: &Enumeration,
    q0: &ChartPoint,
) -> Result<BTreeMap<Vec<i64>, Vec<usize>>> {
    let mut map: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (i, (g, _)) in enumeration.entries.iter().enumerate() {
        let class = lattice_class(scn, g, q0)
            .ok_or_else(|| Error::Config("not a torus scenario".into()))?;
        map.entry(class).or_default().push(i);
    }
    Ok(map)
}

/// Lensing report: number of connecting Fermat geodesics (each lifts to a
/// future-pointing lightlike geodesic) and their arrival times.
#[derive(Clone, Debug)]
pub struct LensingReport {
    pub count: usize,
    pub parity_odd: bool,
    /// Arrival times t0 + F-length, ascending.
    pub arrival_times: Vec<f64>,
    pub budget_complete: bool,
}

pub fn lensing_count(
    scn: &Arc<StationaryScenario>,
    p0: &ChartPoint,
    q0: &ChartPoint,
    t0: f64,
    l_max: f64,
    seed_budget: usize,
    seed: u64,
    opts: &OdeOptions,
) -> Result<LensingReport> {
    if !scn.contractible() {
        return Err(Error::Config(
            "lensing counts need a contractible base".into(),
        ));
    }
    let (geods, _) = shooting::connect_with_budget(scn, p0, q0, l_max, seed_budget, seed, opts)?;
    let (check, _) =
        shooting::connect_with_budget(scn, p0, q0, l_max, seed_budget * 2, seed, opts)?;
    let budget_complete = geods.len() == check.len();
    let mut arrival_times: Vec<f64> = geods.iter().map(|g| t0 + g.f_length).collect();
    arrival_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LensingReport {
        count: geods.len(),
        parity_odd: geods.len() % 2 == 1,
        arrival_times,
        budget_complete,
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
    fn flat_series_and_relations() {
        let scn = Arc::new(catalog::flat(2));
        let p0 = ChartPoint::new(0, dvector![0.0, 0.0]);
        let q0 = ChartPoint::new(0, dvector![1.0, 0.5]);
        let e = enumerate_geodesics(&scn, &p0, &q0, 2.0, 128, 0, &opts()).unwrap();
        assert_eq!(e.entries.len(), 1);
        assert!(e.budget_complete);
        let series = morse_series(&scn, &e, 2.0);
        assert_eq!(series.counts, BTreeMap::from([(0, 1)]));
        let chk = check_morse_relations(&series, PoincareProfile::Contractible).unwrap();
        assert!(chk.valid);
        assert!(chk.q_coeffs.iter().all(|q| *q == 0));
    }

    #[test]
    fn adversarial_series_fails() {
        // Sphere profile with the index-1 geodesic missing: Q_1 = -1.
        let series = MorseSeries {
            counts: BTreeMap::from([(0, 1), (2, 1)]),
            reliable_degree: Some(2),
            length_budget: 0.0,
        };
        let chk = check_morse_relations(&series, PoincareProfile::SpherePathSpace).unwrap();
        assert!(!chk.valid);
        assert_eq!(chk.q_coeffs[1], -1);
    }

    #[test]
    fn sphere_enumeration_perfect_morse() {
        let scn = Arc::new(catalog::sphere(1.0));
        let p0 = ChartPoint::new(0, dvector![0.0, 0.0]);
        let q0 = ChartPoint::new(0, dvector![(0.5_f64).tan(), 0.0]);
        let l_max = 4.5 * std::f64::consts::PI;
        let e = enumerate_geodesics(&scn, &p0, &q0, l_max, 512, 0, &opts()).unwrap();
        assert_eq!(e.entries.len(), 5);
        let mus: Vec<usize> = e.entries.iter().map(|(_, r)| r.mu).collect();
        assert_eq!(mus, vec![0, 1, 2, 3, 4]);
        let series = morse_series(&scn, &e, l_max);
        assert_eq!(series.reliable_degree, Some(3));
        let chk = check_morse_relations(&series, PoincareProfile::SpherePathSpace).unwrap();
        assert!(chk.valid);
        assert!(chk.q_coeffs.iter().all(|q| *q == 0));
    }

    #[test]
    fn torus_classwise_relations() {
        let scn = Arc::new(catalog::torus(2));
        let p0 = ChartPoint::new(0, dvector![0.1, 0.1]);
        let q0 = ChartPoint::new(0, dvector![0.4, 0.1]);
        let e = enumerate_geodesics(&scn, &p0, &q0, 1.7, 512, 0, &opts()).unwrap();
        assert_eq!(e.entries.len(), 10);
        let classes = torus_classwise(&scn, &e, &q0).unwrap();
        assert_eq!(classes.len(), 10);
        for (class, idxs) in classes {
            assert_eq!(idxs.len(), 1, "class {class:?}");
            let series = MorseSeries {
                counts: BTreeMap::from([(e.entries[idxs[0]].1.mu, 1)]),
                reliable_degree: Some(0),
                length_budget: 1.7,
            };
            let chk = check_morse_relations(&series, PoincareProfile::TorusComponent).unwrap();
            assert!(chk.valid, "class {class:?}");
        }
    }

    #[test]
    fn lensing_flat_single_image() {
        let scn = Arc::new(catalog::flat_drift(dvector![0.2, 0.0]));
        let p0 = ChartPoint::new(0, dvector![0.0, 0.0]);
        let q0 = ChartPoint::new(0, dvector![1.0, 0.0]);
        let rep = lensing_count(&scn, &p0, &q0, 1.0, 2.0, 128, 0, &opts()).unwrap();
        assert_eq!(rep.count, 1);
        assert!(rep.parity_odd);
        assert!(rep.budget_complete);
        // Constant drift: F(y) = sqrt(|y|^2 + (0.2 y_1)^2) + 0.2 y_1, so the
        // straight segment has F-length sqrt(1.04) + 0.2.
        let expected = 1.0 + 1.04_f64.sqrt() + 0.2;
        assert!((rep.arrival_times[0] - expected).abs() < 1e-8);

        // Sphere base is rejected.
        let sph = Arc::new(catalog::sphere(1.0));
        assert!(lensing_count(
            &sph,
            &ChartPoint::new(0, dvector![0.0, 0.0]),
            &ChartPoint::new(0, dvector![0.5, 0.0]),
            0.0,
            2.0,
            16,
            0,
            &opts()
        )
        .is_err());
    }

    #[test]
    fn lensing_beta_well_three_images() {
        // Converging beta well between far endpoints: the documented
        // multi-image regime of the catalog lens.
        let scn = Arc::new(catalog::flat_beta_well(-0.6, 1.0));
        let p0 = ChartPoint::new(0, dvector![-4.0, 0.0]);
        let q0 = ChartPoint::new(0, dvector![4.0, 0.5]);
        let rep = lensing_count(&scn, &p0, &q0, 0.0, 14.0, 512, 0, &opts()).unwrap();
        assert!(rep.budget_complete);
        assert!(rep.parity_odd, "count {}", rep.count);
        assert!(rep.count >= 3, "count {}", rep.count);
    }
}
