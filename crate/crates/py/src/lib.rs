//! Python bindings: problems, both mass paths, Dirichlet masses, mass
//! families and the config-driven experiment runner.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use massgrid::config::ExperimentConfig;
use massgrid::experiments::{self, PotentialSource, Problem as CoreProblem, VerifyOptions};
use massgrid::family::{self, FamilySpec};
use massgrid::mass::{evaluate_j, green_function, mass_direct, mass_dirichlet, mass_variational};
use massgrid::solver::{DirichletDomain, SolveOptions};
use massgrid::{Expr, MassError, ScalarField, TorusGrid};

create_exception!(massgrid_py, MassgridError, PyException);
create_exception!(massgrid_py, ValidationError, MassgridError);
create_exception!(massgrid_py, SolverError, MassgridError);
create_exception!(massgrid_py, PropertyError, MassgridError);

fn py_err(e: MassError) -> PyErr {
    let msg = e.to_string();
    if e.is_property_violation() {
        PropertyError::new_err(msg)
    } else if e.is_solver_failure() {
        SolverError::new_err(msg)
    } else {
        ValidationError::new_err(msg)
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for massgrid::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A discretized torus with conformal metric `e^{2φ}·δ`, potential `f`,
/// marked point at the origin and singular kernel of plateau radius `delta`.
#[pyclass(module = "massgrid_py")]
struct Problem {
    inner: CoreProblem,
}

#[pymethods]
impl Problem {
    #[new]
    #[pyo3(signature = (resolution, f, log_factor = "const(0)", dim = 3, side = 1.0, flat_radius = 0.25, delta = 0.125, tol = 1e-12))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        resolution: usize,
        f: &str,
        log_factor: &str,
        dim: usize,
        side: f64,
        flat_radius: f64,
        delta: f64,
        tol: f64,
    ) -> PyResult<Self> {
        let grid = TorusGrid::centered(dim, side, resolution).py()?;
        let inner = CoreProblem::new(
            &grid,
            &Expr::parse(log_factor).py()?,
            &PotentialSource::parse(f).py()?,
            flat_radius,
            delta,
            SolveOptions::with_tol(tol),
        )
        .py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn spacing(&self) -> f64 {
        self.inner.grid().spacing()
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.inner.grid().len()
    }

    /// Certified smallest eigenvalue of `A·u = λ·V·u`.
    fn lambda_min(&self) -> PyResult<f64> {
        Ok(self.inner.certified().py()?.lambda_min())
    }

    /// Mass from the Green-function solve.
    fn mass_direct(&self) -> PyResult<f64> {
        let cop = self.inner.certified().py()?;
        Ok(mass_direct(&cop, &self.inner.kernel, &self.inner.opts)
            .py()?
            .mass)
    }

    /// Mass as `−min J` by conjugate gradients.
    fn mass_variational(&self) -> PyResult<f64> {
        let cop = self.inner.certified().py()?;
        Ok(mass_variational(&cop, &self.inner.kernel, &self.inner.opts)
            .py()?
            .result
            .mass)
    }

    /// `J(u)` for nodal values `u` in row-major order.
    fn functional_j(&self, u: Vec<f64>) -> PyResult<f64> {
        let u = ScalarField::from_values(self.inner.grid(), u).py()?;
        evaluate_j(&self.inner.operator().py()?, &self.inner.kernel, &u).py()
    }

    /// Nodal values of the Green function, `NaN` at the marked point.
    fn green_function(&self) -> PyResult<Vec<f64>> {
        let cop = self.inner.certified().py()?;
        let g = green_function(&cop, &self.inner.kernel, &self.inner.opts).py()?;
        Ok(g.with_continuum_kernel(&self.inner.kernel)
            .values()
            .to_vec())
    }

    /// Dirichlet mass of the ball of `radius` about the marked point.
    #[pyo3(signature = (radius, staircase = false))]
    fn dirichlet_mass(&self, radius: f64, staircase: bool) -> PyResult<f64> {
        let grid = self.inner.grid();
        let domain = if staircase {
            DirichletDomain::staircase_ball(grid, radius)
        } else {
            DirichletDomain::ball(grid, radius)
        }
        .py()?;
        Ok(mass_dirichlet(
            &self.inner.operator().py()?,
            &self.inner.kernel,
            &domain,
            &self.inner.opts,
        )
        .py()?
        .mass)
    }

    /// The family `P_a = Δ + f + a·coupling`.
    fn family(&self, coupling: &str) -> PyResult<Family> {
        let spec = self
            .inner
            .family(&Expr::parse(coupling).py()?, vec![])
            .py()?;
        Ok(Family { spec })
    }
}

#[pyclass(module = "massgrid_py")]
struct Family {
    spec: FamilySpec,
}

#[pymethods]
impl Family {
    fn mass(&self, a: f64) -> PyResult<f64> {
        self.spec.mass(a).py()
    }

    /// `(m, m′, m″, λ_min)` at `a`.
    fn derivatives(&self, a: f64) -> PyResult<(f64, f64, f64, f64)> {
        let d = family::derivatives(&self.spec, a).py()?;
        Ok((d.mass, d.mass_prime, d.mass_second, d.lambda_min))
    }

    /// Certified bracket `(below, above)` of `a_∞`.
    fn a_infinity(&self, a_max: f64) -> PyResult<(f64, f64)> {
        let b = family::find_a_infinity(&self.spec, a_max).py()?;
        Ok((b.below.a, b.above.a))
    }

    /// `(m(a_big), Dirichlet mass of the zero set of the coupling)`.
    fn dirichlet_limit(&self, a0: f64) -> PyResult<(f64, f64)> {
        let l = family::dirichlet_limit(&self.spec, a0).py()?;
        Ok((l.limit_estimate, l.dirichlet_value))
    }
}

/// Mass of the flat ball of `radius` with zero boundary values.
#[pyfunction]
fn flat_ball_mass(dim: usize, radius: f64) -> f64 {
    experiments::flat_ball_mass(dim, radius)
}

/// Runs a TOML experiment and returns its JSON summary.
#[pyfunction]
fn run_config(toml: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(toml).py()?;
    let v = experiments::run(&cfg).py()?;
    Ok(v.to_string())
}

/// Runs the named property checks; returns `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (names, resolution = 32, seed = 0))]
fn verify(names: Vec<String>, resolution: usize, seed: u64) -> Vec<(String, bool, String)> {
    let names: Vec<&'static str> = names
        .into_iter()
        .map(|s| &*Box::leak(s.into_boxed_str()))
        .collect();
    let report = experiments::verify_suite(&VerifyOptions {
        resolution,
        seed,
        only: Some(Box::leak(names.into_boxed_slice())),
        ..VerifyOptions::default()
    });
    report
        .checks
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule]
fn massgrid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Family>()?;
    m.add_function(wrap_pyfunction!(flat_ball_mass, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    let py = m.py();
    m.add("MassgridError", py.get_type::<MassgridError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add("SolverError", py.get_type::<SolverError>())?;
    m.add("PropertyError", py.get_type::<PropertyError>())?;
    Ok(())
}
