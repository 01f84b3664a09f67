//! Runnable experiments: one runner per CLI subcommand, the shared test
//! matrix and the property suite behind `verify`.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::config::{DomainSpec, ExperimentConfig, ExperimentKind, YAMABE};
use crate::error::{MassError, Result};
use crate::expr::{Center, Expr};
use crate::family::{
    derivatives, dirichlet_limit, find_a_infinity, finite_differences, green_comparison,
    mass_to_infinity, scan, AInfinity, BlowupSample, DirichletLimit, FamilyResult, FamilySpec,
};
use crate::grid::{ScalarField, TorusGrid};
use crate::kernel::{build_cutoff, build_kernel, sphere_volume, CutoffProfile, SingularKernel};
use crate::manifold::{
    assemble, build_metric, yamabe_potential, ConformalMetric, OperatorSpec, Potential,
};
use crate::mass::{
    blowup_identity_check, center_cutoff, conformal_mass_relation, cutoff_formula, evaluate_j,
    green_function, mass_direct, mass_dirichlet, mass_variational, mass_variational_from,
    BlowupCheck, CertifiedOperator, GreenFunction, MassMethod, MassResult,
};
use crate::richardson::{extrapolate, log_log_slope, RichardsonFit};
use crate::solver::{smallest_eigenvalue, DirichletDomain, SolveOptions};

/// One discretized `(M, g, f, η)` at a single resolution.
#[derive(Debug, Clone)]
pub struct Problem {
    pub metric: ConformalMetric,
    pub potential: Potential,
    pub cutoff: CutoffProfile,
    pub kernel: SingularKernel,
    pub opts: SolveOptions,
}

/// Where the potential comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialSource {
    Expr(Expr),
    /// `c_n·scal_g`, giving the conformal Laplacian.
    Yamabe,
}

impl PotentialSource {
    pub fn parse(src: &str) -> Result<Self> {
        if src.trim() == YAMABE {
            Ok(Self::Yamabe)
        } else {
            Ok(Self::Expr(Expr::parse(src)?))
        }
    }
}

impl Problem {
    pub fn new(
        grid: &TorusGrid,
        log_factor: &Expr,
        potential: &PotentialSource,
        flat_radius: f64,
        delta: f64,
        opts: SolveOptions,
    ) -> Result<Self> {
        let metric = build_metric(grid, log_factor, flat_radius)?;
        let potential = match potential {
            PotentialSource::Expr(e) => Potential::from_expr(grid, e, flat_radius)?,
            PotentialSource::Yamabe => yamabe_potential(&metric)?,
        };
        let cutoff = build_cutoff(grid.dim(), delta)?;
        let kernel = build_kernel(&metric, &cutoff)?;
        Ok(Self {
            metric,
            potential,
            cutoff,
            kernel,
            opts,
        })
    }

    /// Unit-side 3-torus at resolution `res` with `r_flat = 0.25`, `δ = 0.125`.
    pub fn standard(res: usize, log_factor: &str, f: &str) -> Result<Self> {
        let grid = TorusGrid::centered(3, 1.0, res)?;
        Self::new(
            &grid,
            &Expr::parse(log_factor)?,
            &PotentialSource::parse(f)?,
            0.25,
            0.125,
            SolveOptions::default(),
        )
    }

    pub fn from_config(cfg: &ExperimentConfig, resolution: usize) -> Result<Self> {
        Self::new(
            &cfg.grid(resolution)?,
            &Expr::parse(&cfg.metric.log_factor)?,
            &PotentialSource::parse(&cfg.potential.f)?,
            cfg.manifold.flat_radius,
            cfg.kernel.delta,
            cfg.solver.options(),
        )
    }

    pub fn grid(&self) -> &TorusGrid {
        self.metric.grid()
    }

    pub fn operator(&self) -> Result<OperatorSpec> {
        assemble(&self.metric, &self.potential)
    }

    pub fn certified(&self) -> Result<CertifiedOperator> {
        CertifiedOperator::certify(self.operator()?)
    }

    pub fn family(&self, coupling: &Expr, a_values: Vec<f64>) -> Result<FamilySpec> {
        let c = coupling.sample(self.grid())?;
        Ok(
            FamilySpec::new(&self.metric, &self.potential, &c, &self.cutoff, a_values)?
                .with_options(self.opts),
        )
    }

    pub fn domain(&self, spec: &DomainSpec, coupling: Option<&Expr>) -> Result<DirichletDomain> {
        let grid = self.grid();
        match spec {
            DomainSpec::Whole => Ok(DirichletDomain::whole(grid)),
            DomainSpec::Ball { radius } => DirichletDomain::ball(grid, *radius),
            DomainSpec::StaircaseBall { radius } => DirichletDomain::staircase_ball(grid, *radius),
            DomainSpec::ZeroSet => {
                let c = coupling.ok_or_else(|| {
                    MassError::Config("a zero-set domain needs experiment.coupling".into())
                })?;
                DirichletDomain::zero_set(&c.sample(grid)?)
            }
        }
    }
}

/// `−R^{2−n}/((n−2)·ω_{n−1})`: the mass at the center of a flat ball with
/// zero boundary values, from `G(r) = κ_n·(r^{2−n} − R^{2−n})`.
pub fn flat_ball_mass(dim: usize, radius: f64) -> f64 {
    let n = dim as f64;
    -radius.powf(2.0 - n) / ((n - 2.0) * sphere_volume(dim))
}

/// The `(name, log φ, f)` pairs every dual-path and positivity check runs on.
pub fn test_matrix() -> Vec<(&'static str, &'static str, &'static str)> {
    vec![
        ("flat-ramp", "const(0)", "ramp(p, 0.25, 0.4, 10)"),
        (
            "bump-ramp",
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        ),
        ("flat-weak", "const(0)", "ramp(p, 0.25, 0.4, 1)"),
        (
            "dent-modulated",
            "smoothstep_bump(p, 0.3, 0.48, -0.25)",
            "ramp(p, 0.25, 0.4, 5) * (const(1.5) + cos_mode([1, 2, 0], 1))",
        ),
        (
            "two-bumps-sign-changing",
            "smoothstep_bump(p, 0.3, 0.45, 0.2) + smoothstep_bump([0.5, 0.5, 0.5], 0.0, 0.2, 0.3)",
            "ramp(p, 0.25, 0.4, 10) - smoothstep_bump([0.5, 0.5, 0.5], 0.0, 0.15, 8)",
        ),
    ]
}

/// Smooth random field: a few low Fourier modes plus a plateau at a random point.
pub fn random_smooth_field(grid: &TorusGrid, rng: &mut StdRng) -> Result<ScalarField> {
    let dim = grid.dim();
    let mut e = Expr::Const(rng.random_range(-2.0..2.0));
    for _ in 0..3 {
        let wave = (0..dim).map(|_| rng.random_range(-3i64..=3)).collect();
        let amp = rng.random_range(-1.0..1.0);
        e = Expr::Add(
            Box::new(e),
            Box::new(Expr::CosMode {
                wave,
                amplitude: amp,
            }),
        );
    }
    let center = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
    let r0 = rng.random_range(0.02..0.15);
    let plateau = Expr::Plateau {
        center: Center::Fractional(center),
        r0,
        r1: r0 + rng.random_range(0.05..0.2),
        amplitude: rng.random_range(-3.0..3.0),
    };
    Expr::Add(Box::new(e), Box::new(plateau)).sample(grid)
}

// ---------------------------------------------------------------- mass

#[derive(Debug, Clone, Serialize)]
pub struct MassRow {
    pub resolution: usize,
    pub h: f64,
    pub direct: MassResult,
    pub variational: f64,
    pub variational_residual: f64,
    pub variational_iterations: usize,
    pub relative_gap: f64,
    pub green_center: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MassReport {
    pub rows: Vec<MassRow>,
    pub extrapolation: Option<RichardsonFit>,
}

pub const MASS_CSV_HEADER: &str = "experiment,dim,resolution,side,delta,method,mass,residual";

impl MassReport {
    /// One line per resolution and method under [`MASS_CSV_HEADER`].
    pub fn write_csv(&self, id: &str, mut out: impl std::io::Write) -> Result<()> {
        writeln!(out, "{MASS_CSV_HEADER}")?;
        for r in &self.rows {
            let d = &r.direct;
            for (method, mass, residual) in [
                (MassMethod::Direct, d.mass, d.report.relative_residual),
                (
                    MassMethod::Variational,
                    r.variational,
                    r.variational_residual,
                ),
            ] {
                writeln!(
                    out,
                    "{id},{},{},{},{},{method},{mass:e},{residual:e}",
                    d.dim, d.resolution, d.side, d.delta
                )?;
            }
        }
        Ok(())
    }
}

/// Both paths at every resolution, Green positivity, and a Richardson fit.
pub fn run_mass(cfg: &ExperimentConfig) -> Result<MassReport> {
    let mut rows = Vec::new();
    for &res in &cfg.manifold.resolutions {
        let pb = Problem::from_config(cfg, res)?;
        let cop = pb.certified()?;
        let direct = mass_direct(&cop, &pb.kernel, &pb.opts)?;
        let var = mass_variational(&cop, &pb.kernel, &pb.opts)?;
        let green = green_function(&cop, &pb.kernel, &pb.opts)?;
        let gap = (direct.mass - var.result.mass).abs() / direct.mass.abs().max(1.0);
        if gap > 1e-8 {
            return Err(MassError::PropertyViolation(format!(
                "direct mass {} and variational mass {} differ by {gap:e}",
                direct.mass, var.result.mass
            )));
        }
        rows.push(MassRow {
            resolution: res,
            h: pb.grid().spacing(),
            variational: var.result.mass,
            variational_residual: var.result.report.relative_residual,
            variational_iterations: var.result.report.iterations,
            relative_gap: gap,
            green_center: green.center_value(),
            direct,
        });
    }
    let extrapolation = fit_rows(
        &rows
            .iter()
            .map(|r| (r.h, r.direct.mass))
            .collect::<Vec<_>>(),
        cfg.experiment.order.unwrap_or(2.0),
    )?;
    Ok(MassReport {
        rows,
        extrapolation,
    })
}

fn fit_rows(rows: &[(f64, f64)], order: f64) -> Result<Option<RichardsonFit>> {
    if rows.len() < 2 {
        return Ok(None);
    }
    let h: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
    extrapolate(&h, &m, order).map(Some)
}

// ---------------------------------------------------------------- eigen

#[derive(Debug, Clone, Serialize)]
pub struct EigenRow {
    pub resolution: usize,
    pub lambda_min: f64,
    pub residual: f64,
    pub iterations: usize,
    pub certified_positive: bool,
}

pub fn run_eigen(cfg: &ExperimentConfig) -> Result<Vec<EigenRow>> {
    cfg.manifold
        .resolutions
        .iter()
        .map(|&res| {
            let pb = Problem::from_config(cfg, res)?;
            let e = smallest_eigenvalue(&pb.operator()?, cfg.solver.eigen_tol)?;
            Ok(EigenRow {
                resolution: res,
                lambda_min: e.lambda,
                residual: e.residual,
                iterations: e.iterations,
                certified_positive: e.lambda > 0.0 && e.sign_certified(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------- dirichlet

#[derive(Debug, Clone, Serialize)]
pub struct DirichletRow {
    pub resolution: usize,
    pub h: f64,
    pub mass: f64,
    pub interior_nodes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirichletReport {
    pub domain: String,
    pub rows: Vec<DirichletRow>,
    pub extrapolation: Option<RichardsonFit>,
    /// Closed form when the domain is a ball inside the flat region.
    pub analytic: Option<f64>,
}

/// Cut-face balls converge at second order; staircase domains at first.
fn domain_order(spec: &DomainSpec) -> f64 {
    match spec {
        DomainSpec::Ball { .. } | DomainSpec::Whole => 2.0,
        DomainSpec::StaircaseBall { .. } | DomainSpec::ZeroSet => 1.0,
    }
}

pub fn run_dirichlet(cfg: &ExperimentConfig) -> Result<DirichletReport> {
    let spec =
        cfg.experiment.domain.clone().ok_or_else(|| {
            MassError::Config("dirichlet experiments need experiment.domain".into())
        })?;
    let coupling = cfg
        .experiment
        .coupling
        .as_deref()
        .map(Expr::parse)
        .transpose()?;
    let mut rows = Vec::new();
    let mut description = String::new();
    for &res in &cfg.manifold.resolutions {
        let pb = Problem::from_config(cfg, res)?;
        let domain = pb.domain(&spec, coupling.as_ref())?;
        let m = mass_dirichlet(&pb.operator()?, &pb.kernel, &domain, &pb.opts)?;
        description = domain.description().to_string();
        rows.push(DirichletRow {
            resolution: res,
            h: pb.grid().spacing(),
            mass: m.mass,
            interior_nodes: domain.interior_count(),
        });
    }
    let order = cfg.experiment.order.unwrap_or(domain_order(&spec));
    let analytic = match spec {
        DomainSpec::Ball { radius } | DomainSpec::StaircaseBall { radius }
            if radius <= cfg.manifold.flat_radius =>
        {
            Some(flat_ball_mass(cfg.manifold.dim, radius))
        }
        _ => None,
    };
    Ok(DirichletReport {
        domain: description,
        extrapolation: fit_rows(
            &rows.iter().map(|r| (r.h, r.mass)).collect::<Vec<_>>(),
            order,
        )?,
        rows,
        analytic,
    })
}

// ---------------------------------------------------------------- family

#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub resolution: usize,
    pub scan: FamilyResult,
    pub a_infinity: Option<AInfinity>,
    pub blowup: Vec<BlowupSample>,
    pub limit: Option<DirichletLimit>,
    /// Some certified scan point has `m(a) < 0` while `f + a·φ ≥ 0`.
    pub negative_mass_with_nonnegative_potential: bool,
}

pub fn run_family(cfg: &ExperimentConfig) -> Result<FamilyReport> {
    let res = cfg.resolution();
    let pb = Problem::from_config(cfg, res)?;
    let coupling = Expr::parse(
        cfg.experiment
            .coupling
            .as_deref()
            .expect("validated by the config"),
    )?;
    let spec = pb.family(&coupling, cfg.experiment.a_values.clone())?;
    let mut result = scan(&spec);
    let a_infinity = match cfg.experiment.a_max {
        Some(a_max) => match find_a_infinity(&spec, a_max) {
            Ok(b) => Some(b),
            Err(MassError::NoSignChange { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    result.a_infinity = a_infinity.map(|b| b.a_infinity);
    let blowup = match (a_infinity, cfg.experiment.blowup_samples) {
        (Some(b), Some(k)) => mass_to_infinity(&spec, &b, k)?,
        _ => Vec::new(),
    };
    let limit = cfg
        .experiment
        .ramp_start
        .map(|a0| dirichlet_limit(&spec, a0))
        .transpose()?;
    let f = spec.potential().field().values();
    let phi = spec.coupling().values();
    let negative = result
        .certified()
        .any(|p| p.mass < 0.0 && f.iter().zip(phi).all(|(f, c)| f + p.a * c >= 0.0));
    Ok(FamilyReport {
        resolution: res,
        scan: result,
        a_infinity,
        blowup,
        limit,
        negative_mass_with_nonnegative_potential: negative,
    })
}

// ---------------------------------------------------------------- blow-up

#[derive(Debug, Clone, Serialize)]
pub struct BlowupRow {
    pub resolution: usize,
    pub h: f64,
    pub rho: f64,
    /// `"zero"` for `u ≡ 0`, `"near-green"` for `u = χ·(G − k̃)`.
    pub field: &'static str,
    pub check: BlowupCheck,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlowupReport {
    pub rows: Vec<BlowupRow>,
    /// `C₁, C₂` in `|gap| ≈ C₁·ρ^{n−2} + C₂·h/ρ`, fitted on the `u ≡ 0` rows.
    pub model: (f64, f64),
    /// Largest `|gap|/model` over the fitted rows.
    pub worst_model_ratio: f64,
    pub observed_order: Option<f64>,
    pub model_order: Option<f64>,
}

/// The identity at excision radii `rho_h·h` for every resolution, with
/// `u ≡ 0` and with `u = χ·(G − k̃)`.
pub fn blowup_rows(pb: &Problem, rho_h: &[f64]) -> Result<Vec<BlowupRow>> {
    let cop = pb.certified()?;
    let green = green_function(&cop, &pb.kernel, &pb.opts)?;
    let grid = pb.grid();
    let h = grid.spacing();
    let zero = ScalarField::zeros(grid);
    let chi = center_cutoff(grid, 2.0 * h);
    let near = green.regular().zip_map(&chi, |u, c| u * c)?;
    let mut rows = Vec::new();
    for &k in rho_h {
        for (name, u) in [("zero", &zero), ("near-green", &near)] {
            let check = blowup_identity_check(&cop, &pb.kernel, &green, u, k * h)?;
            rows.push(BlowupRow {
                resolution: grid.resolution(),
                h,
                rho: k * h,
                field: name,
                gap: check.gap(),
                check,
            });
        }
    }
    Ok(rows)
}

/// Fits the error model on the `u ≡ 0` rows; the orders compare the
/// coarsest and finest resolutions at the smallest `ρ/h`.
pub fn blowup_report(rows: Vec<BlowupRow>, dim: usize) -> BlowupReport {
    let n = dim as f64;
    let fit: Vec<&BlowupRow> = rows.iter().filter(|r| r.field == "zero").collect();
    let basis = |r: &BlowupRow| (r.rho.powf(n - 2.0), r.h / r.rho);
    // two-term least squares, falling back to one term if C₂ comes out negative
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in &fit {
        let (b1, b2) = basis(r);
        let g = r.gap.abs();
        s11 += b1 * b1;
        s12 += b1 * b2;
        s22 += b2 * b2;
        t1 += b1 * g;
        t2 += b2 * g;
    }
    let det = s11 * s22 - s12 * s12;
    let (mut c1, mut c2) = ((t1 * s22 - t2 * s12) / det, (s11 * t2 - s12 * t1) / det);
    if !(c2 >= 0.0) || !det.is_normal() {
        c1 = t1 / s11;
        c2 = 0.0;
    }
    let model = |r: &BlowupRow| {
        let (b1, b2) = basis(r);
        c1 * b1 + c2 * b2
    };
    let worst = fit
        .iter()
        .map(|r| (r.gap.abs() / model(r)).max(model(r) / r.gap.abs()))
        .fold(0.0, f64::max);
    let orders = || -> Option<(f64, f64)> {
        let k = fit
            .iter()
            .map(|r| r.rho / r.h)
            .fold(f64::INFINITY, f64::min);
        let same: Vec<&&BlowupRow> = fit
            .iter()
            .filter(|r| (r.rho / r.h - k).abs() < 1e-9)
            .collect();
        let (a, b) = (same.first()?, same.last()?);
        if a.h == b.h {
            return None;
        }
        let hs = [a.h, b.h];
        Some((
            log_log_slope(&hs, &[a.gap, b.gap]),
            log_log_slope(&hs, &[model(a), model(b)]),
        ))
    };
    let o = orders();
    BlowupReport {
        model: (c1, c2),
        worst_model_ratio: worst,
        observed_order: o.map(|o| o.0),
        model_order: o.map(|o| o.1),
        rows,
    }
}

pub fn run_blowup(cfg: &ExperimentConfig) -> Result<BlowupReport> {
    let rho = if cfg.experiment.rho.is_empty() {
        vec![4.0, 8.0]
    } else {
        cfg.experiment.rho.clone()
    };
    let mut rows = Vec::new();
    for &res in &cfg.manifold.resolutions {
        rows.extend(blowup_rows(&Problem::from_config(cfg, res)?, &rho)?);
    }
    Ok(blowup_report(rows, cfg.manifold.dim))
}

// ---------------------------------------------------------------- convergence

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub quantity: String,
    pub rows: Vec<(usize, f64)>,
    pub fit: RichardsonFit,
    pub analytic: Option<f64>,
}

/// Mass (or Dirichlet mass, when a domain is given) against resolution.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    if cfg.manifold.resolutions.len() < 2 {
        return Err(MassError::Config(
            "convergence needs at least two resolutions".into(),
        ));
    }
    let (quantity, rows, hs, order, analytic) = match &cfg.experiment.domain {
        Some(_) => {
            let r = run_dirichlet(cfg)?;
            let order = r.extrapolation.as_ref().map_or(2.0, |f| f.order);
            (
                r.domain,
                r.rows
                    .iter()
                    .map(|x| (x.resolution, x.mass))
                    .collect::<Vec<_>>(),
                r.rows.iter().map(|x| x.h).collect::<Vec<_>>(),
                order,
                r.analytic,
            )
        }
        None => {
            let mut rows = Vec::new();
            let mut hs = Vec::new();
            for &res in &cfg.manifold.resolutions {
                let pb = Problem::from_config(cfg, res)?;
                rows.push((
                    res,
                    mass_direct(&pb.certified()?, &pb.kernel, &pb.opts)?.mass,
                ));
                hs.push(pb.grid().spacing());
            }
            (
                "torus mass".to_string(),
                rows,
                hs,
                cfg.experiment.order.unwrap_or(2.0),
                None,
            )
        }
    };
    let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(ConvergenceReport {
        quantity,
        fit: extrapolate(&hs, &m, order)?,
        rows,
        analytic,
    })
}

/// Runs the experiment named in the config and returns its JSON summary.
pub fn run(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let to_json =
        |v: serde_json::Result<serde_json::Value>| v.map_err(|e| MassError::Io(e.to_string()));
    match cfg.experiment.kind {
        ExperimentKind::Mass => to_json(serde_json::to_value(run_mass(cfg)?)),
        ExperimentKind::Family => to_json(serde_json::to_value(run_family(cfg)?)),
        ExperimentKind::Eigen => to_json(serde_json::to_value(run_eigen(cfg)?)),
        ExperimentKind::Dirichlet => to_json(serde_json::to_value(run_dirichlet(cfg)?)),
        ExperimentKind::BlowupCheck => to_json(serde_json::to_value(run_blowup(cfg)?)),
        ExperimentKind::Convergence => to_json(serde_json::to_value(run_convergence(cfg)?)),
    }
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub resolution: usize,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub resolution: usize,
    pub seed: u64,
    /// Multiplies the dual-path tolerance; `0.01` tightens it 100×.
    pub tolerance_scale: f64,
    /// Replaces the operator in the summation-by-parts check by one whose
    /// stiffness is no longer symmetric.
    pub corrupt_symmetry: bool,
    /// Runs only the named checks when set.
    pub only: Option<&'static [&'static str]>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            resolution: 32,
            seed: 0,
            tolerance_scale: 1.0,
            corrupt_symmetry: false,
            only: None,
        }
    }
}

struct Suite {
    checks: Vec<CheckResult>,
    only: Option<&'static [&'static str]>,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.only.is_none_or(|o| o.contains(&name))
    }

    fn record(&mut self, name: &str, outcome: impl FnOnce() -> Result<(bool, String)>) {
        if !self.wants(name) {
            return;
        }
        let (passed, detail) = outcome().unwrap_or_else(|e| (false, format!("error: {e}")));
        log::info!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Worst `|stencil(r^{2−n})|` on the annulus `[L/8, L/4]` of a flat grid.
pub fn harmonicity_defect(dim: usize, resolution: usize) -> Result<f64> {
    let g = TorusGrid::centered(dim, 1.0, resolution)?;
    let h = g.spacing();
    let v = |i: usize| g.distance_to_marked(i).powf(2.0 - dim as f64);
    let mut worst: f64 = 0.0;
    for i in 0..g.len() {
        if !(0.125..=0.25).contains(&g.distance_to_marked(i)) {
            continue;
        }
        let mut s = 2.0 * dim as f64 * v(i);
        for axis in 0..dim {
            s -= v(g.neighbor(i, axis, true)) + v(g.neighbor(i, axis, false));
        }
        worst = worst.max((s / (h * h)).abs());
    }
    Ok(worst)
}

/// `J(u·χ_s) − J(u)` at the minimizer for `s = 8h, 4h, 2h`.
pub fn cutoff_continuity(
    pb: &Problem,
    cop: &CertifiedOperator,
    green: &GreenFunction,
) -> Result<Vec<(f64, f64)>> {
    let u = green.regular();
    let j = evaluate_j(cop.op(), &pb.kernel, u)?;
    let h = pb.grid().spacing();
    [8.0, 4.0, 2.0]
        .iter()
        .map(|k| {
            let chi = center_cutoff(pb.grid(), k * h);
            let v = u.zip_map(&chi, |a, b| a * b)?;
            Ok((k * h, evaluate_j(cop.op(), &pb.kernel, &v)? - j))
        })
        .collect()
}

/// The property matrix: every invariant with a cheap discrete check.
pub fn verify_suite(opts: &VerifyOptions) -> VerifyReport {
    let res = opts.resolution;
    let mut s = Suite {
        checks: Vec::new(),
        only: opts.only,
    };
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let dual_tol = 1e-8 * opts.tolerance_scale;

    let base = Problem::standard(
        res,
        "smoothstep_bump(p, 0.3, 0.45, 0.3)",
        "ramp(p, 0.25, 0.4, 10)",
    );

    s.record("summation-by-parts", || {
        let pb = base.clone()?;
        let mut op = pb.operator()?;
        if opts.corrupt_symmetry {
            op = op.corrupt_symmetry(1e-6);
        }
        let u = random_smooth_field(pb.grid(), &mut rng)?;
        let v = random_smooth_field(pb.grid(), &mut rng)?;
        let (uav, vau) = (
            crate::linalg::dot(u.values(), &op.apply(v.values())),
            crate::linalg::dot(v.values(), &op.apply(u.values())),
        );
        let rel = (uav - vau).abs() / uav.abs().max(vau.abs());
        Ok((rel <= 1e-12, format!("|u·Av − v·Au|/|u·Av| = {rel:e}")))
    });

    s.record("constants-in-stiffness-kernel", || {
        let pb = base.clone()?;
        let op = assemble(&pb.metric, &Potential::zero(pb.grid()))?;
        let worst = op
            .apply(&vec![1.0; op.len()])
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = op.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
        Ok((worst <= 1e-13 * scale, format!("max |S·1| = {worst:e}")))
    });

    s.record("harmonicity-second-order", || {
        let (a, b) = (harmonicity_defect(3, res)?, harmonicity_defect(3, 2 * res)?);
        let ratio = a / b;
        Ok((
            (ratio - 4.0).abs() < 0.5,
            format!(
                "defect ratio between N = {res} and {} is {ratio:.3}",
                2 * res
            ),
        ))
    });

    s.record("cutoff-formula", || {
        let pb = base.clone()?;
        let op = pb.operator()?;
        let u = random_smooth_field(pb.grid(), &mut rng)?;
        let chi = center_cutoff(pb.grid(), 0.1);
        let (l, r) = cutoff_formula(&op, u.values(), chi.values());
        let rel = (l - r).abs() / l.abs();
        Ok((rel <= 1e-12, format!("relative defect {rel:e}")))
    });

    // dual paths, lower bound and Green positivity on the whole matrix
    let mut dual = Vec::new();
    let mut lower = Vec::new();
    let mut positive = Vec::new();
    let matrix = [
        "dual-path-agreement",
        "variational-lower-bound",
        "green-positivity",
    ];
    let cases = if matrix.iter().any(|n| s.wants(n)) {
        test_matrix()
    } else {
        Vec::new()
    };
    for (name, phi, f) in cases {
        let run = (|| -> Result<(f64, f64, f64, bool)> {
            let pb = Problem::standard(res, phi, f)?;
            let cop = pb.certified()?;
            let d = mass_direct(&cop, &pb.kernel, &pb.opts)?.mass;
            let v = mass_variational(&cop, &pb.kernel, &pb.opts)?.result.mass;
            let mut worst = f64::INFINITY;
            for _ in 0..100 {
                let u = random_smooth_field(pb.grid(), &mut rng)?;
                worst = worst.min(evaluate_j(cop.op(), &pb.kernel, &u)? + d);
            }
            let pos = green_function(&cop, &pb.kernel, &pb.opts).is_ok();
            Ok((d, v, worst, pos))
        })();
        match run {
            Ok((d, v, worst, pos)) => {
                dual.push(Ok(((d - v).abs() / d.abs().max(1.0), name)));
                lower.push(Ok((worst / d.abs().max(1.0), name)));
                positive.push(Ok((pos, name)));
            }
            Err(e) => {
                dual.push(Err(e.clone()));
                lower.push(Err(e.clone()));
                positive.push(Err(e));
            }
        }
    }
    s.record("dual-path-agreement", || {
        collect(dual, |(gap, name)| {
            (*gap <= dual_tol, format!("{name}: {gap:e}"))
        })
    });
    s.record("variational-lower-bound", || {
        collect(lower, |(margin, name)| {
            (
                *margin >= -1e-8,
                format!("{name}: min (J + m)/max(1,|m|) = {margin:e}"),
            )
        })
    });
    s.record("green-positivity", || {
        collect(positive, |(ok, name)| (*ok, format!("{name}: {ok}")))
    });

    // J(uχ_s) − J(u) ~ s^{n−2} needs u nearly constant on B(p, 2s), i.e.
    // 2s ≤ δ for s = 8h; with δ = 0.125 that takes four times the resolution.
    s.record("cutoff-continuity", || {
        let pb = Problem::standard(
            4 * res,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        )?;
        let cop = pb.certified()?;
        let green = green_function(&cop, &pb.kernel, &pb.opts)?;
        let d = cutoff_continuity(&pb, &cop, &green)?;
        let decreasing = d.windows(2).all(|w| w[1].1 < w[0].1) && d.iter().all(|x| x.1 >= 0.0);
        let slope = log_log_slope(
            &d.iter().map(|x| x.0).collect::<Vec<_>>(),
            &d.iter().map(|x| x.1).collect::<Vec<_>>(),
        );
        Ok((
            decreasing && (slope - 1.0).abs() <= 0.5,
            format!("J(uχ_s) − J(u) = {d:?}, slope {slope:.3}"),
        ))
    });

    // 8h ≤ 2δ ≤ r_flat leaves no room for two cutoffs at N = 32
    s.record("eta-independence", || {
        let grid = TorusGrid::centered(3, 1.0, 3 * res / 2)?;
        let delta = 4.5 * grid.spacing();
        let pb = Problem::new(
            &grid,
            &Expr::parse("smoothstep_bump(p, 0.3, 0.45, 0.3)")?,
            &PotentialSource::parse("ramp(p, 0.25, 0.4, 10)")?,
            0.25,
            delta,
            SolveOptions::default(),
        )?;
        let cop = pb.certified()?;
        let m1 = mass_direct(&cop, &pb.kernel, &pb.opts)?.mass;
        let k2 = build_kernel(&pb.metric, &build_cutoff(3, 1.3 * delta)?)?;
        let m2 = mass_direct(&cop, &k2, &pb.opts)?.mass;
        Ok((
            (m1 - m2).abs() <= 1e-8 * m1.abs().max(1.0),
            format!("δ: {m1}, 1.3δ: {m2}"),
        ))
    });

    s.record("domain-monotonicity", || {
        let pb = Problem::standard(res, "const(0)", "ramp(p, 0.25, 0.4, 10)")?;
        let op = pb.operator()?;
        let full = mass_direct(&pb.certified()?, &pb.kernel, &pb.opts)?.mass;
        let mut ms = Vec::new();
        for r in [0.27, 0.33, 0.4, 0.47] {
            ms.push(
                mass_dirichlet(
                    &op,
                    &pb.kernel,
                    &DirichletDomain::ball(pb.grid(), r)?,
                    &pb.opts,
                )?
                .mass,
            );
        }
        let ok = ms.windows(2).all(|w| w[0] <= w[1]) && ms.iter().all(|&m| m <= full);
        Ok((ok, format!("balls 0.27..0.47: {ms:?}, torus {full}")))
    });

    s.record("homothety", || {
        let pb = base.clone()?;
        let m = mass_direct(&pb.certified()?, &pb.kernel, &pb.opts)?.mass;
        let lambda = 2.0;
        let metric = pb.metric.scaled(lambda)?;
        let pot = pb.potential.scaled(lambda)?;
        let kernel = build_kernel(&metric, &build_cutoff(3, pb.cutoff.delta() * lambda)?)?;
        let ms = mass_direct(
            &CertifiedOperator::certify(assemble(&metric, &pot)?)?,
            &kernel,
            &pb.opts,
        )?
        .mass;
        let rel = (ms - m / lambda).abs() / m.abs();
        Ok((
            rel <= 1e-12,
            format!("m = {m}, m(2g) = {ms}, relative defect {rel:e}"),
        ))
    });

    s.record("conformal-change", || {
        let pb = base.clone()?;
        let mut detail = Vec::new();
        let mut ok = true;
        for u in [
            "const(1.5)",
            "const(1) + smoothstep_bump(p, 0.3, 0.45, 0.4)",
        ] {
            let uf = Expr::parse(u)?.sample(pb.grid())?;
            let r = conformal_mass_relation(&pb.metric, &pb.potential, &uf, &pb.cutoff, &pb.opts)?;
            ok &= r.same_sign && (r.ratio - r.expected_ratio).abs() <= 1e-9;
            detail.push(format!(
                "{u}: m′/m = {}, c⁻² = {}",
                r.ratio, r.expected_ratio
            ));
        }
        Ok((ok, detail.join("; ")))
    });

    s.record("distributional-identity", || {
        let pb = base.clone()?;
        let cop = pb.certified()?;
        let g = green_function(&cop, &pb.kernel, &pb.opts)?;
        let phi = random_smooth_field(pb.grid(), &mut rng)?;
        let pair = g.pairing(cop.op(), &phi)?;
        let rel = (pair - phi.at_marked()).abs() / phi.at_marked().abs().max(1.0);
        Ok((
            rel <= 1e-9,
            format!("G·(Aϕ) = {pair}, ϕ(p) = {}", phi.at_marked()),
        ))
    });

    let family = || -> Result<FamilySpec> {
        let pb = base.clone()?;
        pb.family(
            &Expr::parse(
                "ramp(p, 0.25, 0.45, 1) - smoothstep_bump([0.5, 0.5, 0.5], 0.0, 0.15, 1.5)",
            )?,
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
        )
    };

    s.record("convexity", || {
        let spec = family()?;
        let ds = spec
            .a_values
            .iter()
            .map(|&a| derivatives(&spec, a))
            .collect::<Result<Vec<_>>>()?;
        let m: Vec<f64> = ds.iter().map(|d| d.mass).collect();
        let scale = m.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        let second: Vec<f64> = m.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
        let ok =
            second.iter().all(|&d| d >= -1e-6 * scale) && ds.iter().all(|d| d.mass_second >= 0.0);
        Ok((ok, format!("m = {m:?}, second differences {second:?}")))
    });

    s.record("derivative-consistency", || {
        let spec = family()?;
        let d = derivatives(&spec, 1.0)?;
        let fd = finite_differences(&spec, 1.0)?;
        let e1 = (d.mass_prime - fd.first).abs() / d.mass_prime.abs();
        let e2 = (d.mass_second - fd.second).abs() / d.mass_second.abs();
        Ok((
            e1 <= 1e-3 && e2 <= 1e-3,
            format!("m′ error {e1:e}, m″ error {e2:e}"),
        ))
    });

    s.record("green-comparison", || {
        let pb = base.clone()?;
        let spec = pb.family(&Expr::parse("ramp(p, 0.25, 0.4, 1)")?, vec![])?;
        let c = green_comparison(&spec, 50.0)?;
        Ok((c.holds(1.0, 0.0) && c.max_excess < 0.0, format!("{c:?}")))
    });

    s.record("limit-sandwich", || {
        let pb = Problem::standard(res, "const(0)", "const(0)")?;
        let spec = pb.family(&Expr::parse("ramp(p, 0.25, 0.27, 1)")?, vec![])?;
        let lim = dirichlet_limit(&spec, 10.0)?;
        let tol = 1e-9;
        let above = lim
            .ramp
            .iter()
            .all(|&(_, m)| lim.dirichlet_value <= m + tol);
        let decreasing = lim.ramp.windows(2).all(|w| w[1].1 <= w[0].1 + tol);
        Ok((
            above && decreasing,
            format!(
                "m(a_big) = {}, Dirichlet {}",
                lim.limit_estimate, lim.dirichlet_value
            ),
        ))
    });

    s.record("config-round-trip", || {
        let cfg = ExperimentConfig::from_toml(
            "[manifold]\ndim = 3\nresolutions = [32]\nflat_radius = 0.25\n[kernel]\ndelta = 0.125\n\
             [potential]\nf = \"ramp(p,0.25,0.4,10)\"\n[experiment]\nkind = \"mass\"\n",
        )?;
        let again = ExperimentConfig::from_toml(&cfg.to_toml()?)?;
        Ok((again == cfg, "serialize then parse".into()))
    });

    s.record("determinism", || {
        let pb = base.clone()?;
        let a = mass_direct(&pb.certified()?, &pb.kernel, &pb.opts)?.mass;
        let b = mass_direct(&pb.certified()?, &pb.kernel, &pb.opts)?.mass;
        let u0 = random_smooth_field(pb.grid(), &mut rng)?;
        let v1 = mass_variational_from(&pb.certified()?, &pb.kernel, &u0, &pb.opts)?
            .result
            .mass;
        let v2 = mass_variational_from(&pb.certified()?, &pb.kernel, &u0, &pb.opts)?
            .result
            .mass;
        Ok((
            a.to_bits() == b.to_bits() && v1.to_bits() == v2.to_bits(),
            format!("{a} / {v1}"),
        ))
    });

    VerifyReport {
        resolution: res,
        checks: s.checks,
    }
}

fn collect<T>(
    items: Vec<Result<T>>,
    judge: impl Fn(&T) -> (bool, String),
) -> Result<(bool, String)> {
    let mut ok = true;
    let mut detail = Vec::new();
    for item in items {
        let (p, d) = judge(&item?);
        ok &= p;
        detail.push(d);
    }
    Ok((ok, detail.join("; ")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn flat_ball_mass_solves_the_radial_problem() {
        // G(r) = κ(r^{2−n} − R^{2−n}) vanishes at R and has the right singular part
        for dim in 3..=5 {
            let n = dim as f64;
            let kappa = 1.0 / ((n - 2.0) * sphere_volume(dim));
            let r = 0.3;
            assert!((flat_ball_mass(dim, r) + kappa * r.powf(2.0 - n)).abs() < 1e-15);
        }
        assert!((flat_ball_mass(3, 0.25) + 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn test_matrix_operators_are_positive() {
        for (name, phi, f) in test_matrix() {
            let pb = Problem::standard(32, phi, f).unwrap();
            assert!(pb.certified().is_ok(), "{name}");
        }
    }

    #[test]
    fn random_fields_are_smooth_and_reproducible() {
        let g = TorusGrid::centered(3, 1.0, 16).unwrap();
        let a = random_smooth_field(&g, &mut StdRng::seed_from_u64(3)).unwrap();
        let b = random_smooth_field(&g, &mut StdRng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
