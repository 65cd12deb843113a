//! Stationary scenario data: a chart atlas plus the fields (g0, delta, beta)
//! defining the spacetime and its Fermat (Randers) data on the base.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::chart::Manifold;
use crate::error::{Error, Result};
use crate::fields::{MatrixField, ScalarField, VectorField};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryScenario {
    pub dimension: usize,
    pub manifold: Manifold,
    pub g0: MatrixField,
    pub delta: VectorField,
    pub beta: ScalarField,
}

impl StationaryScenario {
    pub fn new(
        manifold: Manifold,
        g0: MatrixField,
        delta: VectorField,
        beta: ScalarField,
    ) -> Result<Self> {
        let scn = StationaryScenario { dimension: manifold.dim(), manifold, g0, delta, beta };
        scn.validate()?;
        Ok(scn)
    }

    pub fn dim(&self) -> usize {
        self.dimension
    }

    pub fn validate(&self) -> Result<()> {
        self.manifold.validate()?;
        if self.dimension != self.manifold.dim() {
            return Err(Error::InvalidScenario(format!(
                "dimension {} does not match manifold dimension {}",
                self.dimension,
                self.manifold.dim()
            )));
        }
        if self.beta.lower_bound() <= 0.0 {
            return Err(Error::InvalidScenario("beta must be strictly positive".into()));
        }
        // Spot check symmetry / positive definiteness of g0 at a few points.
        let n = self.dimension;
        for trial in 0..8 {
            let x = DVector::from_fn(n, |i, _| 0.31 * ((trial * n + i) as f64).sin());
            let g = self.g0.value(&x);
            if (&g - g.transpose()).norm() > 1e-12 * (1.0 + g.norm()) {
                return Err(Error::InvalidScenario("g0 is not symmetric".into()));
            }
            if g.clone().cholesky().is_none() {
                return Err(Error::InvalidScenario("g0 is not positive definite".into()));
            }
        }
        Ok(())
    }

    /// Loads a scenario from a TOML document. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scn: StationaryScenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// True when alpha is flat and drift-free by construction (constant
    /// fields on a flat atlas), so geodesics are straight and conjugate
    /// points cannot occur.
    pub fn is_flat(&self) -> bool {
        let flat_atlas = matches!(
            self.manifold,
            Manifold::Euclidean { .. } | Manifold::Torus { .. }
        );
        let const_g0 = matches!(self.g0.kind, crate::fields::MatrixFieldKind::Constant { .. });
        let const_delta = matches!(self.delta.kind, crate::fields::VectorFieldKind::Constant { .. });
        let const_beta = matches!(self.beta.kind, crate::fields::ScalarFieldKind::Constant { .. });
        flat_atlas && const_g0 && const_delta && const_beta
    }

    /// Whether the base manifold is contractible (topology only).
    pub fn contractible(&self) -> bool {
        match &self.manifold {
            Manifold::Euclidean { .. } => true,
            Manifold::Sphere { .. } => false,
            Manifold::Torus { .. } => false,
            Manifold::Extended { base } => {
                StationaryScenario::manifold_contractible(base)
            }
        }
    }

    fn manifold_contractible(m: &Manifold) -> bool {
        match m {
            Manifold::Euclidean { .. } => true,
            Manifold::Sphere { .. } => false,
            Manifold::Torus { .. } => false,
            Manifold::Extended { base } => Self::manifold_contractible(base),
        }
    }

    /// Lower bound on the alpha-length separating consecutive Morse indices,
    /// when the catalog knows one. On the round drift-free sphere of radius
    /// rho a geodesic of index k is longer than k * pi * rho.
    pub fn index_length_bound(&self) -> Option<f64> {
        match &self.manifold {
            Manifold::Sphere { radius } => {
                let plain_g0 = matches!(
                    &self.g0.kind,
                    crate::fields::MatrixFieldKind::RoundSphere { radius: r } if (r - radius).abs() < 1e-14
                );
                let zero_delta = matches!(
                    &self.delta.kind,
                    crate::fields::VectorFieldKind::Constant { vector } if vector.iter().all(|v| *v == 0.0)
                );
                let unit_beta = matches!(
                    &self.beta.kind,
                    crate::fields::ScalarFieldKind::Constant { value } if (*value - 1.0).abs() < 1e-14
                );
                if plain_g0 && zero_delta && unit_beta {
                    Some(std::f64::consts::PI * radius)
                } else {
                    None
                }
            }
            _ => None,
        }
    }
}

/// Extends a scenario to the one-dimension-higher base `N0 = M0 x R` with
/// `g0' = g0 (+) du^2`, `delta' = (delta, 0)` and `beta' = beta`. The Fermat
/// metric of the result is the optical metric that reduces proper-time
/// parametrized timelike geodesics of the original spacetime to ordinary
/// Fermat geodesics one dimension up.
pub fn extend_static(scn: &StationaryScenario) -> StationaryScenario {
    let mut g0 = scn.g0.clone();
    g0.extended += 1;
    let mut delta = scn.delta.clone();
    delta.extended += 1;
    let mut beta = scn.beta.clone();
    beta.extended += 1;
    StationaryScenario {
        dimension: scn.dimension + 1,
        manifold: Manifold::Extended { base: Box::new(scn.manifold.clone()) },
        g0,
        delta,
        beta,
    }
}

/// Built-in scenarios used across the test and acceptance suites.
pub mod catalog {
    use super::*;

    /// Flat R^n with identity metric, no drift, unit beta.
    pub fn flat(n: usize) -> StationaryScenario {
        StationaryScenario::new(
            Manifold::Euclidean { dim: n },
            MatrixField::identity(n),
            VectorField::zero(n),
            ScalarField::one(),
        )
        .unwrap()
    }

    /// Flat R^2 with a constant drift vector.
    pub fn flat_drift(delta: DVector<f64>) -> StationaryScenario {
        let n = delta.len();
        StationaryScenario::new(
            Manifold::Euclidean { dim: n },
            MatrixField::identity(n),
            VectorField::constant(delta),
            ScalarField::one(),
        )
        .unwrap()
    }

    /// Round sphere of the given radius, no drift.
    pub fn sphere(radius: f64) -> StationaryScenario {
        StationaryScenario::new(
            Manifold::Sphere { radius },
            MatrixField::round_sphere(radius),
            VectorField::zero(2),
            ScalarField::one(),
        )
        .unwrap()
    }

    /// Unit sphere with a rotational drift of strength eps.
    pub fn sphere_drift(eps: f64) -> StationaryScenario {
        StationaryScenario::new(
            Manifold::Sphere { radius: 1.0 },
            MatrixField::round_sphere(1.0),
            VectorField::rotation(eps),
            ScalarField::one(),
        )
        .unwrap()
    }

    /// Flat torus with unit periods.
    pub fn torus(n: usize) -> StationaryScenario {
        StationaryScenario::new(
            Manifold::Torus { periods: vec![1.0; n] },
            MatrixField::identity(n),
            VectorField::zero(n),
            ScalarField::one(),
        )
        .unwrap()
    }

    /// Flat R^2 with a Gaussian drift bump (a moving-medium lens).
    pub fn flat_bump_drift(amplitude: f64, width: f64) -> StationaryScenario {
        StationaryScenario::new(
            Manifold::Euclidean { dim: 2 },
            MatrixField::identity(2),
            VectorField {
                kind: crate::fields::VectorFieldKind::RadialBump {
                    amplitude,
                    width,
                    center: vec![0.0, 0.0],
                    direction: vec![0.0, 1.0],
                },
                derivative_mode: Default::default(),
                extended: 0,
            },
            ScalarField::one(),
        )
        .unwrap()
    }

    /// Flat R^2 with a beta well of depth `depth` and the given width. A well
    /// (depth < 0 keeps beta in (0,1)) raises the optical index near the
    /// origin and acts as a converging lens.
    pub fn flat_beta_well(depth: f64, width: f64) -> StationaryScenario {
        StationaryScenario::new(
            Manifold::Euclidean { dim: 2 },
            MatrixField::identity(2),
            VectorField::zero(2),
            ScalarField {
                kind: crate::fields::ScalarFieldKind::RadialBump {
                    base: 1.0,
                    amplitude: depth,
                    width,
                    center: vec![0.0, 0.0],
                },
                derivative_mode: Default::default(),
                extended: 0,
            },
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_key_rejection() {
        let text = r#"
            dimension = 2
            [manifold]
            name = "sphere"
            radius = 1.0
            [g0]
            kind = "round-sphere"
            radius = 1.0
            [delta]
            kind = "rotation"
            eps = 0.1
            [beta]
            kind = "constant"
            value = 1.0
        "#;
        let scn = StationaryScenario::from_toml_str(text).unwrap();
        assert_eq!(scn.dim(), 2);

        let bad = text.replace("eps = 0.1", "eps = 0.1\nextra = 3.0");
        assert!(StationaryScenario::from_toml_str(&bad).is_err());
    }

    #[test]
    fn beta_positivity_enforced() {
        let text = r#"
            dimension = 2
            [manifold]
            name = "euclidean"
            dim = 2
            [g0]
            kind = "constant"
            matrix = [[1.0, 0.0], [0.0, 1.0]]
            [delta]
            kind = "constant"
            vector = [0.0, 0.0]
            [beta]
            kind = "radial-bump"
            base = 1.0
            amplitude = -1.5
            width = 1.0
            center = [0.0, 0.0]
        "#;
        assert!(StationaryScenario::from_toml_str(text).is_err());
    }

    #[test]
    fn catalog_tags() {
        assert!(catalog::flat(2).is_flat());
        assert!(catalog::flat(2).contractible());
        assert!(!catalog::sphere(1.0).contractible());
        assert!(catalog::sphere(1.0).index_length_bound().is_some());
        assert!(catalog::sphere_drift(0.1).index_length_bound().is_none());
        assert!(!catalog::flat_beta_well(-0.5, 1.0).is_flat());
        assert!(catalog::torus(2).is_flat());
    }

    #[test]
    fn extend_static_dimensions() {
        let ext = extend_static(&catalog::sphere(1.0));
        assert_eq!(ext.dim(), 3);
        assert_eq!(ext.manifold.n_charts(), 2);
        ext.validate().unwrap();
    }
}
