//! Experiment configuration in TOML.
//!
//! ```toml
//! [manifold]
//! dim = 3
//! side = 1.0
//! resolutions = [32, 48, 64]     # the first one is used by single-grid runs
//! point = [0.0, 0.0, 0.0]        # fractional coordinates, snapped to a node
//! flat_radius = 0.25
//!
//! [metric]
//! log_factor = "smoothstep_bump(p, 0.3, 0.45, 0.3)"
//!
//! [potential]
//! f = "ramp(p, 0.25, 0.4, 10)"
//!
//! [kernel]
//! delta = 0.125
//!
//! [solver]
//! tol = 1e-12
//! max_iter = 20000
//!
//! [experiment]
//! kind = "mass"                  # mass | family | eigen | dirichlet | blowup-check | convergence
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Unknown keys are rejected. Expressions are stored in canonical form, so
//! serializing and parsing a loaded config gives the same value back.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MassError, Result};
use crate::expr::Expr;
use crate::grid::TorusGrid;
use crate::solver::SolveOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSection {
    pub dim: usize,
    #[serde(default = "default_side")]
    pub side: f64,
    pub resolutions: Vec<usize>,
    /// Fractional coordinates of `p`; defaults to the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    pub flat_radius: f64,
}

fn default_side() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub log_factor: String,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            log_factor: Expr::zero().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    /// Either an expression or `"yamabe"` for `c_n·scal_g`.
    pub f: String,
}

impl Default for PotentialSection {
    fn default() -> Self {
        Self {
            f: Expr::zero().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_eigen_tol")]
    pub eigen_tol: f64,
}

fn default_tol() -> f64 {
    SolveOptions::default().tol
}

fn default_max_iter() -> usize {
    SolveOptions::default().max_iter
}

fn default_eigen_tol() -> f64 {
    1e-7
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            eigen_tol: default_eigen_tol(),
        }
    }
}

impl SolverSection {
    pub fn options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DomainSpec {
    Whole,
    /// Ball about `p` with the cut-face boundary treatment.
    Ball {
        radius: f64,
    },
    #[serde(rename = "staircase-ball")]
    StaircaseBall {
        radius: f64,
    },
    /// Zero set of the family coupling `φ`.
    #[serde(rename = "zero-set")]
    ZeroSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Mass,
    Family,
    Eigen,
    Dirichlet,
    BlowupCheck,
    Convergence,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mass => "mass",
            Self::Family => "family",
            Self::Eigen => "eigen",
            Self::Dirichlet => "dirichlet",
            Self::BlowupCheck => "blowup-check",
            Self::Convergence => "convergence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    /// Family coupling `φ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub a_values: Vec<f64>,
    /// Search limit for `a_∞`; the search is skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    /// Number of samples `a_∞·(1 − 2^{−k})` approaching `a_∞`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blowup_samples: Option<u32>,
    /// Starting coupling of the Dirichlet-limit ramp; the ramp is skipped
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSpec>,
    /// Excision radii in units of `h` for the blow-up check.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho: Vec<f64>,
    /// Order of the Richardson model `m + C·h^order`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<f64>,
}

impl ExperimentSection {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            coupling: None,
            a_values: Vec::new(),
            a_max: None,
            blowup_samples: None,
            ramp_start: None,
            domain: None,
            rho: Vec::new(),
            order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifold: ManifoldSection,
    #[serde(default)]
    pub metric: MetricSection,
    #[serde(default)]
    pub potential: PotentialSection,
    pub kernel: KernelSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// The potential is the conformal Laplacian's `c_n·scal_g`.
pub const YAMABE: &str = "yamabe";

fn canonical(src: &str, dim: usize) -> Result<String> {
    if src.trim() == YAMABE {
        return Ok(YAMABE.into());
    }
    let e = Expr::parse(src)?;
    e.validate(dim)?;
    Ok(e.to_string())
}

impl ExperimentConfig {
    /// Parses, validates and normalizes.
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| MassError::Config(e.to_string()))?;
        cfg.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MassError::Config(e.to_string()))
    }

    fn normalized(mut self) -> Result<Self> {
        let m = &self.manifold;
        if !(3..=5).contains(&m.dim) {
            return Err(MassError::Config(format!(
                "dim = {} must be 3, 4 or 5",
                m.dim
            )));
        }
        if m.resolutions.is_empty() {
            return Err(MassError::Config(
                "at least one resolution is required".into(),
            ));
        }
        if let Some(p) = &m.point {
            if p.len() != m.dim || p.iter().any(|x| !x.is_finite()) {
                return Err(MassError::Config(format!(
                    "point must have {} finite coordinates",
                    m.dim
                )));
            }
        }
        let dim = m.dim;
        self.metric.log_factor = canonical(&self.metric.log_factor, dim)?;
        if self.metric.log_factor == YAMABE {
            return Err(MassError::Config(
                "the log factor must be an expression".into(),
            ));
        }
        self.potential.f = canonical(&self.potential.f, dim)?;
        if let Some(c) = &self.experiment.coupling {
            let c = canonical(c, dim)?;
            if c == YAMABE {
                return Err(MassError::Config(
                    "the coupling must be an expression".into(),
                ));
            }
            self.experiment.coupling = Some(c);
        }
        if self.experiment.kind == ExperimentKind::Family && self.experiment.coupling.is_none() {
            return Err(MassError::Config(
                "family experiments need experiment.coupling".into(),
            ));
        }
        Ok(self)
    }

    /// Grid at `resolution`, with `p` snapped to the nearest node.
    pub fn grid(&self, resolution: usize) -> Result<TorusGrid> {
        let m = &self.manifold;
        match &m.point {
            None => TorusGrid::centered(m.dim, m.side, resolution),
            Some(p) => TorusGrid::with_fractional_point(m.dim, m.side, resolution, p),
        }
    }

    pub fn resolution(&self) -> usize {
        self.manifold.resolutions[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FLAT_BUMP: &str = r#"
        # comments are allowed
        [manifold]
        dim = 3
        resolutions = [32, 48, 64]
        flat_radius = 0.25

        [metric]
        log_factor = "smoothstep_bump(p,0.3,0.45,0.3)"

        [potential]
        f = "ramp( p, 0.25, 0.4, 10 )"

        [kernel]
        delta = 0.125

        [experiment]
        kind = "dirichlet"
        domain = { kind = "ball", radius = 0.25 }
    "#;

    #[test]
    fn parses_and_normalizes() {
        let c = ExperimentConfig::from_toml(FLAT_BUMP).unwrap();
        assert_eq!(
            c.potential.f,
            Expr::parse("ramp(p, 0.25, 0.4, 10)").unwrap().to_string()
        );
        assert_eq!(c.solver, SolverSection::default());
        assert_eq!(c.experiment.domain, Some(DomainSpec::Ball { radius: 0.25 }));
        assert_eq!(c.grid(32).unwrap().marked_index(), 0);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad_key = FLAT_BUMP.replace("delta = 0.125", "delta = 0.125\nsigma = 1");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad_key),
            Err(MassError::Config(_))
        ));
        let bad_expr = FLAT_BUMP.replace("ramp( p", "rampp( p");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad_expr),
            Err(MassError::Expression(_))
        ));
        let bad_dim = FLAT_BUMP.replace("dim = 3", "dim = 2");
        assert!(ExperimentConfig::from_toml(&bad_dim).is_err());
        let family = FLAT_BUMP.replace("kind = \"dirichlet\"", "kind = \"family\"");
        assert!(ExperimentConfig::from_toml(&family).is_err());
    }

    #[test]
    fn snapped_point_is_within_half_a_cell() {
        let src = FLAT_BUMP.replace("dim = 3", "dim = 3\npoint = [0.26, 0.51, 0.99]");
        let c = ExperimentConfig::from_toml(&src).unwrap();
        for n in [32, 48] {
            let g = c.grid(n).unwrap();
            let h = g.spacing();
            for (axis, x) in [0.26, 0.51, 0.99].iter().enumerate() {
                let node = g.marked()[axis] as f64 * h;
                let d = (node - x).abs();
                assert!(d.min(1.0 - d) <= 0.5 * h + 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            dim in 3usize..=5,
            res in proptest::collection::vec(8usize..80, 1..4),
            delta in 0.01f64..0.3,
            tol in 1e-14f64..1e-6,
            amp in -5.0f64..5.0,
            a in proptest::collection::vec(-10.0f64..10.0, 0..5),
        ) {
            let mut a = a;
            a.sort_by(f64::total_cmp);
            let wave = vec!["1"; dim].join(", ");
            let src = format!(r#"
                [manifold]
                dim = {dim}
                resolutions = {res:?}
                flat_radius = 0.2
                [potential]
                f = "cos_mode([{wave}], {amp:?}) * ramp(p, 0.2, 0.3, 1)"
                [kernel]
                delta = {delta:?}
                [solver]
                tol = {tol:?}
                [experiment]
                kind = "family"
                coupling = "ramp(p, 0.2, 0.3, {amp:?})"
                a_values = {a:?}
            "#);
            let c = ExperimentConfig::from_toml(&src).unwrap();
            let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            prop_assert_eq!(again, c);
        }
    }
}
