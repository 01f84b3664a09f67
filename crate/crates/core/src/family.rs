//! Mass families `a ↦ m(a)` for `P_a = Δ_g + f + a·φ`.
//!
//! Differentiating `A_a·G_a = e_p` gives `A_a·G_a′ = −V·φ·G_a` and
//! `A_a·G_a″ = −2·V·φ·G_a′`; since the kernel does not depend on `a`,
//! `m′ = G_a′(p)` and `m″ = G_a″(p) = 2·G_a′·A_a·G_a′`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MassError, Result};
use crate::expr::smoothstep;
use crate::grid::{ScalarField, TorusGrid};
use crate::kernel::{build_kernel, CutoffProfile, SingularKernel};
use crate::manifold::{
    assemble, compute_scalar_curvature, ConformalMetric, OperatorSpec, Potential,
};
use crate::mass::{
    green_function_unchecked, mass_direct, mass_dirichlet, CertifiedOperator, GreenFunction,
};
use crate::solver::{smallest_eigenvalue, solve_weak, DirichletDomain, EigenPair, SolveOptions};

/// Residual required of the eigenpairs that bracket `a_∞`.
const BRACKET_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FamilySpec {
    metric: ConformalMetric,
    potential: Potential,
    coupling: Potential,
    kernel: SingularKernel,
    base: OperatorSpec,
    pub a_values: Vec<f64>,
    pub opts: SolveOptions,
}

impl FamilySpec {
    /// `coupling` must vanish on the flat ball, like `f`; `a_values` must
    /// be strictly increasing. Positivity of `P_0` is not checked here.
    pub fn new(
        metric: &ConformalMetric,
        potential: &Potential,
        coupling: &ScalarField,
        cutoff: &CutoffProfile,
        a_values: Vec<f64>,
    ) -> Result<Self> {
        let coupling = Potential::new(coupling.clone(), metric.flat_radius())?;
        if a_values.windows(2).any(|w| !(w[1] > w[0])) || a_values.iter().any(|a| !a.is_finite()) {
            return Err(MassError::Config(
                "a-values must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self {
            metric: metric.clone(),
            potential: potential.clone(),
            kernel: build_kernel(metric, cutoff)?,
            base: assemble(metric, potential)?,
            coupling,
            a_values,
            opts: SolveOptions::default(),
        })
    }

    pub fn with_options(mut self, opts: SolveOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn metric(&self) -> &ConformalMetric {
        &self.metric
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn coupling(&self) -> &ScalarField {
        self.coupling.field()
    }

    pub fn kernel(&self) -> &SingularKernel {
        &self.kernel
    }

    pub fn grid(&self) -> &TorusGrid {
        self.metric.grid()
    }

    /// `A_a = S + V·(f + a·φ)`.
    pub fn operator(&self, a: f64) -> Result<OperatorSpec> {
        self.base.with_shifted_potential(self.coupling.field(), a)
    }

    pub fn certified(&self, a: f64) -> Result<CertifiedOperator> {
        CertifiedOperator::certify(self.operator(a)?)
    }

    pub fn mass(&self, a: f64) -> Result<f64> {
        Ok(mass_direct(&self.certified(a)?, &self.kernel, &self.opts)?.mass)
    }

    pub fn green_function(&self, a: f64) -> Result<GreenFunction> {
        green_function_unchecked(&self.certified(a)?, &self.kernel, &self.opts)
    }

    fn coupling_is_nonnegative(&self) -> bool {
        self.coupling.field().values().iter().all(|&v| v >= 0.0)
    }

    fn has_negative_region(&self) -> bool {
        self.coupling.field().values().iter().any(|&v| v < 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Derivatives {
    pub a: f64,
    pub lambda_min: f64,
    pub mass: f64,
    pub mass_prime: f64,
    pub mass_second: f64,
}

/// `m(a)`, `m′(a) = w(p)` and `m″(a) = 2·w·A_a·w`, where `A_a·w = −V·φ·G_a`.
pub fn derivatives(spec: &FamilySpec, a: f64) -> Result<Derivatives> {
    let cop = spec.certified(a)?;
    let g = green_function_unchecked(&cop, &spec.kernel, &spec.opts)?;
    let vol = cop.op().volumes();
    let phi = spec.coupling.field().values();
    let rhs: Vec<f64> = g
        .composite()
        .values()
        .iter()
        .zip(phi)
        .zip(vol)
        .map(|((g, f), v)| -v * f * g)
        .collect();
    let w = solve_weak(cop.op(), &rhs, &spec.opts)?
        .into_result()?
        .solution;
    Ok(Derivatives {
        a,
        lambda_min: cop.lambda_min(),
        mass: g.mass(),
        mass_prime: w.at_marked(),
        mass_second: 2.0 * cop.op().quadratic_form(w.values()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDifferences {
    pub step: f64,
    pub first: f64,
    pub second: f64,
    /// Relative change of the estimates when the step is doubled.
    pub doubling_change: f64,
}

/// Central differences of `m` at `a` with step `Δa = 10⁻³·(1 + |a|)`,
/// validated against the same differences at `2·Δa`.
pub fn finite_differences(spec: &FamilySpec, a: f64) -> Result<FiniteDifferences> {
    let step = 1e-3 * (1.0 + a.abs());
    let opts = spec.opts;
    let m =
        |x: f64| -> Result<f64> { Ok(mass_direct(&spec.certified(x)?, &spec.kernel, &opts)?.mass) };
    let nodes = [a - 2.0 * step, a - step, a, a + step, a + 2.0 * step];
    let values = nodes
        .par_iter()
        .map(|&x| m(x))
        .collect::<Result<Vec<f64>>>()?;
    let d = |s: usize, h: f64| {
        let (lo, hi) = (values[2 - s], values[2 + s]);
        ((hi - lo) / (2.0 * h), (hi - 2.0 * values[2] + lo) / (h * h))
    };
    let (d1, d2) = d(1, step);
    let (e1, e2) = d(2, 2.0 * step);
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
    Ok(FiniteDifferences {
        step,
        first: d1,
        second: d2,
        doubling_change: rel(d1, e1).max(rel(d2, e2)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyPoint {
    pub a: f64,
    pub lambda_min: f64,
    pub mass: f64,
    pub mass_prime: f64,
    pub mass_second: f64,
    pub fd_prime: f64,
    pub fd_second: f64,
    /// `"ok"`, or the reason the point was skipped.
    pub status: String,
}

impl FamilyPoint {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn skipped(a: f64, lambda_min: f64, reason: String) -> Self {
        Self {
            a,
            lambda_min,
            mass: f64::NAN,
            mass_prime: f64::NAN,
            mass_second: f64::NAN,
            fd_prime: f64::NAN,
            fd_second: f64::NAN,
            status: reason,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilyResult {
    pub points: Vec<FamilyPoint>,
    pub a_infinity: Option<f64>,
}

pub const CSV_HEADER: &str = "a,lambda_min,mass,mass_prime,mass_second,fd_prime,fd_second,status";

impl FamilyResult {
    pub fn certified(&self) -> impl Iterator<Item = &FamilyPoint> {
        self.points.iter().filter(|p| p.is_ok())
    }

    /// Divided second differences over consecutive certified points.
    pub fn second_differences(&self) -> Vec<f64> {
        let pts: Vec<_> = self.certified().collect();
        pts.windows(3)
            .map(|w| {
                let s1 = (w[1].mass - w[0].mass) / (w[1].a - w[0].a);
                let s2 = (w[2].mass - w[1].mass) / (w[2].a - w[1].a);
                2.0 * (s2 - s1) / (w[2].a - w[0].a)
            })
            .collect()
    }

    pub fn is_nonincreasing(&self, tol: f64) -> bool {
        let pts: Vec<_> = self.certified().collect();
        pts.windows(2).all(|w| w[1].mass <= w[0].mass + tol)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.a,
                p.lambda_min,
                p.mass,
                p.mass_prime,
                p.mass_second,
                p.fd_prime,
                p.fd_second,
                p.status.replace(',', ";")
            )?;
        }
        Ok(())
    }
}

/// Masses, eigenvalues, analytic and finite-difference derivatives at every
/// scan point. Points whose operator is not certified positive, or whose
/// solves fail, are kept with the reason in `status`.
pub fn scan(spec: &FamilySpec) -> FamilyResult {
    let points = spec
        .a_values
        .par_iter()
        .map(|&a| match scan_point(spec, a) {
            Ok(p) => p,
            Err(e) => {
                let lambda = spec
                    .operator(a)
                    .and_then(|op| smallest_eigenvalue(&op, 1e-6))
                    .map_or(f64::NAN, |e| e.lambda);
                FamilyPoint::skipped(a, lambda, e.to_string())
            }
        })
        .collect();
    FamilyResult {
        points,
        a_infinity: None,
    }
}

fn scan_point(spec: &FamilySpec, a: f64) -> Result<FamilyPoint> {
    let d = derivatives(spec, a)?;
    let fd = finite_differences(spec, a)?;
    Ok(FamilyPoint {
        a,
        lambda_min: d.lambda_min,
        mass: d.mass,
        mass_prime: d.mass_prime,
        mass_second: d.mass_second,
        fd_prime: fd.first,
        fd_second: fd.second,
        status: "ok".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketEnd {
    pub a: f64,
    pub lambda: f64,
    pub residual: f64,
}

impl BracketEnd {
    fn new(a: f64, e: &EigenPair) -> Self {
        Self {
            a,
            lambda: e.lambda,
            residual: e.residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AInfinity {
    pub a_infinity: f64,
    /// Certified `λ_min > 0`.
    pub below: BracketEnd,
    /// Certified `λ_min < 0`.
    pub above: BracketEnd,
}

/// Eigenpair at `a` whose sign is certified with residual below
/// [`BRACKET_RESIDUAL`], or `None` when `λ` is too close to zero.
fn certified_sign(spec: &FamilySpec, a: f64) -> Result<Option<EigenPair>> {
    let e = smallest_eigenvalue(&spec.operator(a)?, 1e-10)?;
    Ok((e.residual < BRACKET_RESIDUAL && e.sign_certified()).then_some(e))
}

/// `a_∞ = inf{a > 0 : λ_min(a) ≤ 0}` by doubling from `a = 1` and bisecting
/// to relative width `10⁻⁶`.
pub fn find_a_infinity(spec: &FamilySpec, a_max: f64) -> Result<AInfinity> {
    if !spec.has_negative_region() {
        return Err(MassError::NoSignChange { a_max: 0.0 });
    }
    let at0 = certified_sign(spec, 0.0)?
        .filter(|e| e.lambda > 0.0)
        .ok_or_else(|| MassError::NotPositive("P_0 is not certified positive".into()))?;
    let mut below = BracketEnd::new(0.0, &at0);
    let mut a = 1.0;
    let mut above = loop {
        if a > a_max {
            return Err(MassError::NoSignChange { a_max });
        }
        match certified_sign(spec, a)? {
            Some(e) if e.lambda > 0.0 => below = BracketEnd::new(a, &e),
            Some(e) => break BracketEnd::new(a, &e),
            None => {}
        }
        a *= 2.0;
    };
    while above.a - below.a > 1e-6 * above.a {
        let mid = 0.5 * (below.a + above.a);
        match certified_sign(spec, mid)? {
            Some(e) if e.lambda > 0.0 => below = BracketEnd::new(mid, &e),
            Some(e) => above = BracketEnd::new(mid, &e),
            // sign not decidable: the root is within the eigenvalue error
            None => break,
        }
    }
    Ok(AInfinity {
        a_infinity: 0.5 * (below.a + above.a),
        below,
        above,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupSample {
    pub k: u32,
    pub a: f64,
    pub lambda_min: f64,
    pub mass: f64,
}

/// Masses at `a = a_∞·(1 − 2^{−k})` for `k = 1..=k_max`, with `a_∞` taken
/// from the certified lower end of the bracket.
pub fn mass_to_infinity(
    spec: &FamilySpec,
    bracket: &AInfinity,
    k_max: u32,
) -> Result<Vec<BlowupSample>> {
    let a_inf = bracket.below.a;
    (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let a = a_inf * (1.0 - 0.5f64.powi(k as i32));
            let cop = spec.certified(a)?;
            let m = mass_direct(&cop, &spec.kernel, &spec.opts)?.mass;
            Ok(BlowupSample {
                k,
                a,
                lambda_min: cop.lambda_min(),
                mass: m,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirichletLimit {
    /// `(a, m(a))` along the ramp.
    pub ramp: Vec<(f64, f64)>,
    pub limit_estimate: f64,
    pub dirichlet_value: f64,
    pub domain_nodes: usize,
}

impl DirichletLimit {
    pub fn relative_gap(&self) -> f64 {
        (self.limit_estimate - self.dirichlet_value).abs() / self.dirichlet_value.abs()
    }
}

/// Ramps `a` by factors of 4 from `a0` until successive masses differ by
/// less than `10⁻³·(1 + |m|)`, and compares with the Dirichlet mass of the
/// zero set of `φ`.
pub fn dirichlet_limit(spec: &FamilySpec, a0: f64) -> Result<DirichletLimit> {
    if !spec.coupling_is_nonnegative() {
        return Err(MassError::Config(
            "the Dirichlet limit needs a nonnegative coupling".into(),
        ));
    }
    if !(a0 > 0.0) {
        return Err(MassError::Config(format!(
            "initial coupling {a0} must be positive"
        )));
    }
    let domain = DirichletDomain::zero_set(spec.coupling.field())?;
    let dirichlet_value = mass_dirichlet(&spec.base, &spec.kernel, &domain, &spec.opts)?.mass;
    let mut a = a0;
    let mut ramp = vec![(a, spec.mass(a)?)];
    const MAX_RAMP: usize = 40;
    loop {
        a *= 4.0;
        let m = spec.mass(a)?;
        let prev = ramp.last().expect("nonempty").1;
        ramp.push((a, m));
        if (m - prev).abs() < 1e-3 * (1.0 + prev.abs()) {
            break;
        }
        if ramp.len() > MAX_RAMP {
            return Err(MassError::NotConverged {
                residual: (m - prev).abs(),
                iterations: ramp.len(),
            });
        }
    }
    Ok(DirichletLimit {
        limit_estimate: ramp.last().expect("nonempty").1,
        ramp,
        dirichlet_value,
        domain_nodes: domain.interior_count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreenComparison {
    pub a: f64,
    /// Smallest `G_a` off `p`.
    pub min_green: f64,
    /// Largest `G_a − G_0` off `p`.
    pub max_excess: f64,
    /// Largest `G_a − G_0` anywhere, including `p`.
    pub max_excess_with_center: f64,
}

impl GreenComparison {
    /// `0 < G_a ≤ G_0` at every node, up to `tol` relative to `G_0(p)`.
    pub fn holds(&self, scale: f64, tol: f64) -> bool {
        self.min_green > 0.0 && self.max_excess_with_center <= tol * scale
    }
}

/// Compares the composite Green functions of `P_a` and `P_0` nodewise.
pub fn green_comparison(spec: &FamilySpec, a: f64) -> Result<GreenComparison> {
    let g0 = spec.green_function(0.0)?;
    let ga = spec.green_function(a)?;
    let p = spec.grid().marked_index();
    let (mut min_green, mut max_excess, mut with_center) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, (x, y)) in ga
        .composite()
        .values()
        .iter()
        .zip(g0.composite().values())
        .enumerate()
    {
        with_center = with_center.max(x - y);
        if i != p {
            min_green = min_green.min(*x);
            max_excess = max_excess.max(x - y);
        }
    }
    Ok(GreenComparison {
        a,
        min_green,
        max_excess,
        max_excess_with_center: with_center,
    })
}

/// Radial conformal factor `w = 1 + v(r)` (so `φ = 2·ln(w)/(n−2)`), flat on
/// `B(p, r_flat)`, with `v` non-increasing, concave on the inner half of the
/// annulus as in the sphere construction, and constant beyond `0.45·L`.
///
/// Returns `ConstructionFailed` unless the discrete scalar curvature is
/// `≥ −10⁻¹⁰` everywhere and not identically zero. On a torus this cannot
/// succeed: `scal_g·w^{(n+2)/(n−2)} = Δw/c_n` has zero flat integral, so
/// `scal_g ≥ 0` forces `scal_g ≡ 0`. The failure reports the most negative
/// curvature found.
pub fn nonneg_curvature_seed(
    grid: &TorusGrid,
    r_flat: f64,
    amplitude: f64,
) -> Result<ConformalMetric> {
    let n = grid.dim();
    if n < 3 {
        return Err(MassError::InvalidGrid(format!("dimension {n} < 3")));
    }
    let (r0, r2) = (r_flat + 1.5 * grid.spacing(), 0.45 * grid.side());
    if !(r2 - r0 > 4.0 * grid.spacing()) {
        return Err(MassError::ConstructionFailed(format!(
            "no room for a radial profile between r = {r0} and r = {r2}"
        )));
    }
    // v′ ≤ 0 throughout and v″ ≤ 0 on the inner half of the annulus
    let profile = |r: f64| -amplitude * smoothstep((r - r0) / (r2 - r0));
    let log_factor = ScalarField::from_fn(grid, |i| {
        let w = 1.0 + profile(grid.distance_to_marked(i));
        2.0 / (n as f64 - 2.0) * w.max(f64::MIN_POSITIVE).ln()
    });
    let metric = ConformalMetric::from_log_factor(log_factor, r_flat)?;
    let scal = compute_scalar_curvature(&metric);
    let min = scal.min();
    if min < -1e-10 || scal.max_abs() == 0.0 {
        return Err(MassError::ConstructionFailed(format!(
            "scalar curvature reaches {min:e}; a conformally flat torus metric with scal ≥ 0 is flat"
        )));
    }
    Ok(metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::kernel::build_cutoff;
    use crate::manifold::build_metric;

    fn spec(phi_metric: &str, f: &str, coupling: &str, a: Vec<f64>) -> FamilySpec {
        let grid = TorusGrid::centered(3, 1.0, 32).unwrap();
        let metric = build_metric(&grid, &Expr::parse(phi_metric).unwrap(), 0.25).unwrap();
        let f = Potential::from_expr(&grid, &Expr::parse(f).unwrap(), 0.25).unwrap();
        let c = Expr::parse(coupling).unwrap().sample(&grid).unwrap();
        FamilySpec::new(&metric, &f, &c, &build_cutoff(3, 0.125).unwrap(), a)
            .unwrap()
            .with_options(SolveOptions::with_tol(1e-12))
    }

    #[test]
    fn zero_coupling_gives_a_constant_family() {
        let s = spec(
            "const(0)",
            "ramp(p, 0.25, 0.4, 10)",
            "const(0)",
            vec![0.0, 1.0],
        );
        let d = derivatives(&s, 0.5).unwrap();
        assert_eq!(d.mass_prime, 0.0);
        assert_eq!(d.mass_second, 0.0);
        assert_eq!(
            s.mass(0.0).unwrap().to_bits(),
            s.mass(1.0).unwrap().to_bits()
        );
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let s = spec(
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
            "ramp(p, 0.25, 0.45, 1) - smoothstep_bump([0.5, 0.5, 0.5], 0.0, 0.15, 1.5)",
            vec![],
        );
        for a in [0.0, 3.0] {
            let d = derivatives(&s, a).unwrap();
            let fd = finite_differences(&s, a).unwrap();
            assert!(d.mass_second >= 0.0);
            assert!(
                (d.mass_prime - fd.first).abs() <= 1e-3 * d.mass_prime.abs(),
                "{d:?} {fd:?}"
            );
            assert!(
                (d.mass_second - fd.second).abs() <= 1e-3 * d.mass_second.abs(),
                "{d:?} {fd:?}"
            );
        }
    }

    #[test]
    fn scan_records_uncertified_points() {
        let s = spec(
            "const(0)",
            "ramp(p, 0.25, 0.4, 10)",
            "-smoothstep_bump([0.5, 0.5, 0.5], 0.0, 0.2, 1)",
            vec![0.0, 1e4],
        );
        let r = scan(&s);
        assert!(r.points[0].is_ok());
        assert!(!r.points[1].is_ok());
        assert!(r.points[1].lambda_min < 0.0);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn nonnegative_coupling_has_no_spectral_boundary() {
        let s = spec(
            "const(0)",
            "ramp(p, 0.25, 0.4, 10)",
            "ramp(p, 0.25, 0.4, 1)",
            vec![],
        );
        assert!(matches!(
            find_a_infinity(&s, 1e3),
            Err(MassError::NoSignChange { .. })
        ));
    }

    #[test]
    fn green_functions_decrease_with_a_nonnegative_coupling() {
        let s = spec(
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
            "ramp(p, 0.25, 0.4, 1)",
            vec![],
        );
        let c = green_comparison(&s, 50.0).unwrap();
        assert!(c.min_green > 0.0);
        assert!(c.max_excess < 0.0, "{c:?}");
        assert!(c.holds(1.0, 0.0));
    }

    #[test]
    fn nonnegative_curvature_seed_fails_on_the_torus() {
        let grid = TorusGrid::centered(3, 1.0, 32).unwrap();
        for amp in [0.05, 0.2] {
            match nonneg_curvature_seed(&grid, 0.25, amp) {
                Err(MassError::ConstructionFailed(msg)) => {
                    assert!(msg.contains("scalar curvature"))
                }
                other => panic!("{other:?}"),
            }
        }
    }
}
