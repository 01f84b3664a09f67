//! The mass at `p`: direct solve, variational minimization, Green function,
//! Dirichlet masses and the blown-up energy identity.
//!
//! With `k̃` the lattice kernel and `b = A·k̃ − e_p`, the regular part `u`
//! solves `A·u = −b`, so `G = k̃ + u = A⁻¹e_p`, and the mass is `u(p)`. The
//! functionals are
//!
//! ```text
//! J(u) = c0 + 2·u·b + u·A·u,      c0 = k̃·b
//! I(u) = (k̃ + u)·(A(k̃ + u) − e_p) = J(u) + u(p)
//! ```
//!
//! and `min J = −m` holds exactly, not just in the limit h → 0.

use serde::Serialize;

use crate::error::{MassError, Result};
use crate::grid::{ScalarField, TorusGrid};
use crate::kernel::{build_kernel, CutoffProfile, SingularKernel};
use crate::linalg;
use crate::manifold::{
    assemble, compute_scalar_curvature, yamabe_constant, ConformalMetric, OperatorSpec, Potential,
};
use crate::solver::{
    pcg, restrict_dirichlet, smallest_eigenvalue, solve_weak, DirichletDomain, EigenPair,
    SolveOptions, SolveReport,
};

/// Residual target used when certifying positivity.
const CERTIFY_TOL: f64 = 1e-4;

/// An operator whose smallest pencil eigenvalue has been certified positive.
#[derive(Debug, Clone)]
pub struct CertifiedOperator {
    op: OperatorSpec,
    eigen: EigenPair,
}

impl CertifiedOperator {
    /// Fails with `NotPositive` unless `λ_min > 3·residual > 0`.
    pub fn certify(op: OperatorSpec) -> Result<Self> {
        let mut eigen = smallest_eigenvalue(&op, CERTIFY_TOL)?;
        if eigen.lambda > 0.0 && !eigen.sign_certified() {
            eigen = smallest_eigenvalue(&op, 1e-11)?;
        }
        if !(eigen.lambda > 0.0 && eigen.sign_certified()) {
            return Err(MassError::NotPositive(format!(
                "smallest eigenvalue {:e} (residual {:e})",
                eigen.lambda, eigen.residual
            )));
        }
        Ok(Self { op, eigen })
    }

    pub fn op(&self) -> &OperatorSpec {
        &self.op
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigen.lambda
    }

    pub fn eigen(&self) -> &EigenPair {
        &self.eigen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MassMethod {
    Direct,
    Variational,
    Dirichlet,
}

impl std::fmt::Display for MassMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MassMethod::Direct => "direct",
            MassMethod::Variational => "variational",
            MassMethod::Dirichlet => "dirichlet",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MassResult {
    pub mass: f64,
    pub method: MassMethod,
    pub report: SolveReport,
    pub lambda_min: f64,
    pub dim: usize,
    pub resolution: usize,
    pub side: f64,
    pub delta: f64,
}

impl MassResult {
    fn new(
        mass: f64,
        method: MassMethod,
        report: SolveReport,
        lambda_min: f64,
        kernel: &SingularKernel,
    ) -> Self {
        let g = kernel.grid();
        Self {
            mass,
            method,
            report,
            lambda_min,
            dim: g.dim(),
            resolution: g.resolution(),
            side: g.side(),
            delta: kernel.cutoff().delta(),
        }
    }

    /// The regular part `u` of the Green function.
    pub fn regular_part(&self) -> &ScalarField {
        &self.report.solution
    }
}

fn negated(b: &[f64]) -> Vec<f64> {
    b.iter().map(|v| -v).collect()
}

/// Solves `A·u = −b` and returns `m = u(p)`.
pub fn mass_direct(
    cop: &CertifiedOperator,
    kernel: &SingularKernel,
    opts: &SolveOptions,
) -> Result<MassResult> {
    let b = kernel.source(cop.op())?;
    let report = solve_weak(cop.op(), &negated(&b), opts)?.into_result()?;
    let m = report.solution.at_marked();
    Ok(MassResult::new(
        m,
        MassMethod::Direct,
        report,
        cop.lambda_min(),
        kernel,
    ))
}

/// `J(u) = c0 + 2·u·b + u·A·u`.
pub fn evaluate_j(op: &OperatorSpec, kernel: &SingularKernel, u: &ScalarField) -> Result<f64> {
    if u.grid() != op.grid() {
        return Err(MassError::GridMismatch);
    }
    let b = kernel.source(op)?;
    let c0 = linalg::dot(kernel.lattice().values(), &b);
    let au = op.apply(u.values());
    Ok(c0 + 2.0 * linalg::dot(u.values(), &b) + linalg::dot(u.values(), &au))
}

/// `I(u)` on its domain `u(p) = 0`, where it coincides with `J(u)`.
pub fn evaluate_i(op: &OperatorSpec, kernel: &SingularKernel, u: &ScalarField) -> Result<f64> {
    let up = u.at_marked();
    if up.abs() > 1e-12 {
        return Err(MassError::CenterNotZero(up));
    }
    evaluate_j(op, kernel, u)
}

/// `(k̃ + u)·(A(k̃ + u) − e_p)` for any `u`; equals `J(u) + u(p)`.
pub fn functional_i(op: &OperatorSpec, kernel: &SingularKernel, u: &ScalarField) -> Result<f64> {
    if u.grid() != op.grid() {
        return Err(MassError::GridMismatch);
    }
    let w: Vec<f64> = kernel
        .lattice()
        .values()
        .iter()
        .zip(u.values())
        .map(|(a, b)| a + b)
        .collect();
    let aw = op.apply(&w);
    Ok(linalg::dot(&w, &aw) - w[op.grid().marked_index()])
}

#[derive(Debug, Clone)]
pub struct VariationalResult {
    pub result: MassResult,
    /// `J` after every CG step, starting from the initial guess.
    pub j_history: Vec<f64>,
}

impl VariationalResult {
    pub fn minimizer(&self) -> &ScalarField {
        &self.result.report.solution
    }

    /// Whether `J` never increased along the iterates.
    pub fn monotone(&self) -> bool {
        self.j_history.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Minimizes `J` by conjugate gradients from `u = 0` and returns `−min J`.
pub fn mass_variational(
    cop: &CertifiedOperator,
    kernel: &SingularKernel,
    opts: &SolveOptions,
) -> Result<VariationalResult> {
    mass_variational_from(cop, kernel, &ScalarField::zeros(cop.op().grid()), opts)
}

/// As [`mass_variational`], starting from `u0`.
pub fn mass_variational_from(
    cop: &CertifiedOperator,
    kernel: &SingularKernel,
    u0: &ScalarField,
    opts: &SolveOptions,
) -> Result<VariationalResult> {
    let op = cop.op();
    let b = kernel.source(op)?;
    let mut j = evaluate_j(op, kernel, u0)?;
    let mut history = vec![j];
    // J(u + αp) − J(u) = −α·rz at the exact line-search step
    let (x, res, it) = pcg(op, &negated(&b), Some(u0.values()), opts, |alpha, rz| {
        j -= alpha * rz;
        history.push(j);
    })?;
    let u = ScalarField::from_values(op.grid(), x)?;
    let j_min = evaluate_j(op, kernel, &u)?;
    let report = SolveReport {
        solution: u,
        relative_residual: res,
        iterations: it,
        converged: res <= opts.tol,
    }
    .into_result()?;
    Ok(VariationalResult {
        result: MassResult::new(
            -j_min,
            MassMethod::Variational,
            report,
            cop.lambda_min(),
            kernel,
        ),
        j_history: history,
    })
}

#[derive(Debug, Clone)]
pub struct GreenFunction {
    regular: ScalarField,
    composite: ScalarField,
    mass: f64,
    kernel_center: f64,
}

impl GreenFunction {
    /// The regular part `u`.
    pub fn regular(&self) -> &ScalarField {
        &self.regular
    }

    /// `G = k̃ + u`, which equals `A⁻¹e_p`.
    pub fn composite(&self) -> &ScalarField {
        &self.composite
    }

    /// `η·r^{2−n} + u` off `p` (NaN at `p`), the continuum-kernel form.
    pub fn with_continuum_kernel(&self, kernel: &SingularKernel) -> ScalarField {
        let values = kernel
            .eta_r()
            .values()
            .iter()
            .zip(self.regular.values())
            .map(|(a, b)| a + b)
            .collect();
        ScalarField::from_raw(self.regular.grid(), values)
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// `G(p) = g0·h^{2−n} + m`.
    pub fn center_value(&self) -> f64 {
        self.kernel_center + self.mass
    }

    /// First node `≠ p` where `G ≤ 0`, if any.
    pub fn first_nonpositive(&self) -> Option<(usize, f64)> {
        let p = self.composite.grid().marked_index();
        self.composite
            .values()
            .iter()
            .enumerate()
            .find(|&(i, &g)| i != p && !(g > 0.0))
            .map(|(i, &g)| (i, g))
    }

    /// `Σ_i G_i·(A·ϕ)_i`, the discrete distributional pairing; equals `ϕ(p)`.
    pub fn pairing(&self, op: &OperatorSpec, phi: &ScalarField) -> Result<f64> {
        if phi.grid() != op.grid() || self.composite.grid() != op.grid() {
            return Err(MassError::GridMismatch);
        }
        Ok(linalg::dot(
            self.composite.values(),
            &op.apply(phi.values()),
        ))
    }
}

/// Green function of a certified operator, with positivity checked at
/// every node except `p`.
pub fn green_function(
    cop: &CertifiedOperator,
    kernel: &SingularKernel,
    opts: &SolveOptions,
) -> Result<GreenFunction> {
    let g = green_function_unchecked(cop, kernel, opts)?;
    if let Some((node, value)) = g.first_nonpositive() {
        return Err(MassError::PositivityViolation { node, value });
    }
    Ok(g)
}

pub(crate) fn green_function_unchecked(
    cop: &CertifiedOperator,
    kernel: &SingularKernel,
    opts: &SolveOptions,
) -> Result<GreenFunction> {
    let r = mass_direct(cop, kernel, opts)?;
    let regular = r.report.solution;
    let composite = regular.zip_map(kernel.lattice(), |u, k| u + k)?;
    Ok(GreenFunction {
        regular,
        composite,
        mass: r.mass,
        kernel_center: kernel.center_value(),
    })
}

/// Mass of the operator restricted to `domain` with zero boundary values.
pub fn mass_dirichlet(
    op: &OperatorSpec,
    kernel: &SingularKernel,
    domain: &DirichletDomain,
    opts: &SolveOptions,
) -> Result<MassResult> {
    let grid = op.grid();
    let outer = kernel.cutoff().support_radius();
    for i in 0..grid.len() {
        let r = grid.distance_to_marked(i);
        if r < outer && !domain.contains(i) {
            return Err(MassError::DomainTooSmall { node: i, radius: r });
        }
    }
    let cop = CertifiedOperator::certify(restrict_dirichlet(op, domain)?)?;
    let mut r = mass_direct(&cop, kernel, opts)?;
    r.method = MassMethod::Dirichlet;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupCheck {
    /// `I(u)`.
    pub lhs: f64,
    /// `Σ_{faces in r > ρ} a·G_i·G_j·(Φ_i − Φ_j)² − m`.
    pub rhs: f64,
    pub mass: f64,
    /// Energy of `Φ` on the faces left out by the excision.
    pub excised: f64,
    /// `m²/G(p)`, the lattice remainder at `p`.
    pub center_term: f64,
}

impl BlowupCheck {
    /// `lhs − rhs`, which the excision and the center term account for.
    pub fn gap(&self) -> f64 {
        self.lhs - self.rhs
    }

    /// `lhs − (rhs + excised + center_term)`, zero up to rounding.
    pub fn closure_error(&self) -> f64 {
        self.lhs - (self.rhs + self.excised + self.center_term)
    }
}

/// Blown-up energy identity for `u` with `u(p) = 0`.
///
/// With `Φ = (k̃ + u)/G`, the discrete ground-state identity gives
/// `I(u) = Σ_faces a·G_i·G_j·(Φ_i − Φ_j)² − m + m²/G(p)`; the sum is
/// `∫|dΦ|²_g̃ dv^g̃` of the blown-up metric `G^{4/(n−2)}g`.
pub fn blowup_identity_check(
    cop: &CertifiedOperator,
    kernel: &SingularKernel,
    green: &GreenFunction,
    u: &ScalarField,
    rho: f64,
) -> Result<BlowupCheck> {
    let op = cop.op();
    let grid = op.grid();
    if rho < 2.0 * grid.spacing() * (1.0 - 1e-12) {
        return Err(MassError::ResolutionError(format!(
            "excision radius {rho} is below 2h"
        )));
    }
    let lhs = evaluate_i(op, kernel, u)?;
    let g = green.composite().values();
    let phi: Vec<f64> = kernel
        .lattice()
        .values()
        .iter()
        .zip(u.values())
        .zip(g)
        .map(|((k, u), g)| (k + u) / g)
        .collect();
    let r = kernel.r_field().values();
    let (mut kept, mut excised) = (0.0, 0.0);
    op.for_each_face(|i, j, a| {
        let e = a * g[i] * g[j] * (phi[i] - phi[j]).powi(2);
        if r[i] > rho && r[j] > rho {
            kept += e;
        } else {
            excised += e;
        }
    });
    let m = green.mass();
    Ok(BlowupCheck {
        lhs,
        rhs: kept - m,
        mass: m,
        excised,
        center_term: m * m / green.center_value(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConformalRelation {
    pub mass: f64,
    pub mass_prime: f64,
    /// Value `c` of the conformal factor at `p`.
    pub c: f64,
    pub ratio: f64,
    /// `c⁻²`.
    pub expected_ratio: f64,
    pub same_sign: bool,
}

/// Masses of `P = Δ_g + f` and of its conformal transform under
/// `g′ = u^{4/(n−2)}·g`.
///
/// The transformed potential is `f′ = c_n·scal_{g′} + u^{−4/(n−2)}(f − c_n·scal_g)`,
/// which reduces to the conformal Laplacian law when `f = c_n·scal_g` and
/// makes the discrete operators satisfy `A′ = U·A·U`. Hence
/// `G′ = G/(u(p)·u)` and `m′ = c⁻²·m` with `c = u(p)`.
pub fn conformal_mass_relation(
    metric: &ConformalMetric,
    potential: &Potential,
    u_conf: &ScalarField,
    cutoff: &CutoffProfile,
    opts: &SolveOptions,
) -> Result<ConformalRelation> {
    let n = metric.grid().dim() as f64;
    let cn = yamabe_constant(metric.grid().dim());
    let (metric2, c) = metric.conformal_change(u_conf)?;
    let lambda = c.powf(2.0 / (n - 2.0));
    let scal = compute_scalar_curvature(metric);
    let scal2 = compute_scalar_curvature(&metric2);
    let values: Vec<f64> = (0..u_conf.values().len())
        .map(|i| {
            let u = u_conf.at(i);
            cn * scal2.at(i)
                + u.powf(-4.0 / (n - 2.0)) * (potential.field().at(i) - cn * scal.at(i))
        })
        .collect();
    let f2 = Potential::new(
        ScalarField::from_values(metric2.grid(), values)?,
        potential.flat_radius_check() * lambda,
    )?;
    let cutoff2 = crate::kernel::build_cutoff(cutoff.dim(), cutoff.delta() * lambda)?;

    let m1 = {
        let kernel = build_kernel(metric, cutoff)?;
        let cop = CertifiedOperator::certify(assemble(metric, potential)?)?;
        mass_direct(&cop, &kernel, opts)?.mass
    };
    let m2 = {
        let kernel = build_kernel(&metric2, &cutoff2)?;
        let cop = CertifiedOperator::certify(assemble(&metric2, &f2)?)?;
        mass_direct(&cop, &kernel, opts)?.mass
    };
    Ok(ConformalRelation {
        mass: m1,
        mass_prime: m2,
        c,
        ratio: m2 / m1,
        expected_ratio: 1.0 / (c * c),
        same_sign: m1.signum() == m2.signum(),
    })
}

/// `(χu)·A·(χu)` and `Σ_faces a·u_i·u_j·(χ_i − χ_j)² + Σ χ_i²·u_i·(A·u)_i`,
/// the two sides of the discrete cut-off formula.
pub fn cutoff_formula(op: &OperatorSpec, u: &[f64], chi: &[f64]) -> (f64, f64) {
    let cu: Vec<f64> = u.iter().zip(chi).map(|(a, b)| a * b).collect();
    let lhs = linalg::dot(&cu, &op.apply(&cu));
    let au = op.apply(u);
    let mut grad = 0.0;
    op.for_each_face(|i, j, a| grad += a * u[i] * u[j] * (chi[i] - chi[j]).powi(2));
    let tail: f64 = linalg::sum(
        &(0..u.len())
            .map(|i| chi[i] * chi[i] * u[i] * au[i])
            .collect::<Vec<_>>(),
    );
    (lhs, grad + tail)
}

/// Smooth cutoff vanishing on `B(p, s)` and equal to 1 beyond `2s`.
pub fn center_cutoff(grid: &TorusGrid, s: f64) -> ScalarField {
    ScalarField::from_fn(grid, |i| {
        crate::expr::smoothstep((grid.distance_to_marked(i) - s) / s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::kernel::build_cutoff;
    use crate::manifold::build_metric;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    struct Setup {
        metric: ConformalMetric,
        potential: Potential,
        kernel: SingularKernel,
        cop: CertifiedOperator,
    }

    fn setup(res: usize, phi: &str, f: &str) -> Setup {
        let grid = TorusGrid::centered(3, 1.0, res).unwrap();
        let metric = build_metric(&grid, &Expr::parse(phi).unwrap(), 0.25).unwrap();
        let potential = Potential::from_expr(&grid, &Expr::parse(f).unwrap(), 0.25).unwrap();
        let kernel = build_kernel(&metric, &build_cutoff(3, 0.125).unwrap()).unwrap();
        let cop = CertifiedOperator::certify(assemble(&metric, &potential).unwrap()).unwrap();
        Setup {
            metric,
            potential,
            kernel,
            cop,
        }
    }

    fn opts() -> SolveOptions {
        SolveOptions::with_tol(1e-12)
    }

    #[test]
    fn dual_paths_agree_and_j_decreases() {
        let s = setup(
            32,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        );
        let d = mass_direct(&s.cop, &s.kernel, &opts()).unwrap();
        let v = mass_variational(&s.cop, &s.kernel, &opts()).unwrap();
        assert!((d.mass - v.result.mass).abs() <= 1e-8 * d.mass.abs().max(1.0));
        assert!(v.monotone());
        let u = &v.result.report.solution;
        assert!((evaluate_j(s.cop.op(), &s.kernel, u).unwrap() + d.mass).abs() < 1e-9);
    }

    #[test]
    fn j_at_zero_is_c0_and_i_adds_the_center_value() {
        let s = setup(32, "const(0)", "ramp(p, 0.25, 0.4, 10)");
        let op = s.cop.op();
        let zero = ScalarField::zeros(op.grid());
        let c0 = s.kernel.c0_lattice(op).unwrap();
        assert_eq!(evaluate_j(op, &s.kernel, &zero).unwrap(), c0);
        assert_eq!(evaluate_i(op, &s.kernel, &zero).unwrap(), c0);
        let u = Expr::parse("plateau(p, 0.1, 0.3, 0.1) + cos_mode([1, 0, 2], 0.05)")
            .unwrap()
            .sample(op.grid())
            .unwrap();
        assert!(matches!(
            evaluate_i(op, &s.kernel, &u),
            Err(MassError::CenterNotZero(_))
        ));
        let i = functional_i(op, &s.kernel, &u).unwrap();
        let j = evaluate_j(op, &s.kernel, &u).unwrap();
        assert!((i - (j + u.at_marked())).abs() < 1e-10 * i.abs().max(1.0));
    }

    #[test]
    fn random_fields_stay_above_minus_the_mass() {
        let s = setup(32, "const(0)", "ramp(p, 0.25, 0.4, 10)");
        let m = mass_direct(&s.cop, &s.kernel, &opts()).unwrap().mass;
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let grid = s.cop.op().grid().clone();
        for _ in 0..20 {
            let amp: f64 = rng.random_range(-1.0..1.0);
            let k = [rng.random_range(-2i64..3), rng.random_range(-2i64..3), 1];
            let e = Expr::CosMode {
                wave: k.to_vec(),
                amplitude: amp,
            };
            let u = e.sample(&grid).unwrap();
            assert!(evaluate_j(s.cop.op(), &s.kernel, &u).unwrap() >= -m - 1e-8 * m.abs().max(1.0));
        }
    }

    #[test]
    fn minimizer_is_unique() {
        let s = setup(32, "const(0)", "ramp(p, 0.25, 0.4, 10)");
        let grid = s.cop.op().grid().clone();
        let a = Expr::parse("cos_mode([1, 1, 0], 0.3)")
            .unwrap()
            .sample(&grid)
            .unwrap();
        let b = Expr::parse("plateau([0.5, 0.5, 0.5], 0.1, 0.3, -2)")
            .unwrap()
            .sample(&grid)
            .unwrap();
        let ua = mass_variational_from(&s.cop, &s.kernel, &a, &opts()).unwrap();
        let ub = mass_variational_from(&s.cop, &s.kernel, &b, &opts()).unwrap();
        assert!(ua.monotone() && ub.monotone());
        let scale = ua.minimizer().max_abs();
        for i in 0..grid.len() {
            assert!((ua.minimizer().at(i) - ub.minimizer().at(i)).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn mass_matches_a_dense_inverse() {
        // m = (A⁻¹)_pp − g0·h^{2−n}, independently of the kernel
        let grid = TorusGrid::centered(3, 1.0, 12).unwrap();
        let metric = ConformalMetric::flat_with_radius(&grid, 0.25).unwrap();
        let f = Potential::from_expr(&grid, &Expr::parse("ramp(p, 0.25, 0.4, 10)").unwrap(), 0.25)
            .unwrap();
        let op = assemble(&metric, &f).unwrap();
        let n = op.len();
        let mut a = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            a.set_column(j, &nalgebra::DVector::from_vec(op.apply(&e)));
            e[j] = 0.0;
        }
        let inv = a.cholesky().unwrap().inverse();
        let center = crate::kernel::lattice_green_origin(3) / grid.spacing();
        let oracle = inv[(0, 0)] - center;
        // no kernel is resolvable at N = 12, so pose A·u = −(A·k̃ − e_p) with k̃ = center·e_p
        let cop = CertifiedOperator::certify(op.clone()).unwrap();
        let mut kt = vec![0.0; n];
        kt[0] = center;
        let mut b = op.apply(&kt);
        b[0] -= 1.0;
        let u = solve_weak(cop.op(), &negated(&b), &SolveOptions::with_tol(1e-14)).unwrap();
        assert!((u.solution.at(0) - oracle).abs() < 1e-10 * oracle.abs());
    }

    #[test]
    fn mass_does_not_depend_on_the_cutoff_radius() {
        let grid = TorusGrid::centered(3, 1.0, 48).unwrap();
        let metric = build_metric(&grid, &Expr::zero(), 0.25).unwrap();
        let f = Potential::from_expr(&grid, &Expr::parse("ramp(p, 0.25, 0.4, 10)").unwrap(), 0.25)
            .unwrap();
        let cop = CertifiedOperator::certify(assemble(&metric, &f).unwrap()).unwrap();
        let m = |delta| {
            let k = build_kernel(&metric, &build_cutoff(3, delta).unwrap()).unwrap();
            mass_direct(&cop, &k, &opts()).unwrap().mass
        };
        let (a, b) = (m(0.09), m(0.09 * 1.3));
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn green_function_is_positive_and_reproduces_point_values() {
        let s = setup(
            32,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        );
        let g = green_function(&s.cop, &s.kernel, &opts()).unwrap();
        assert!(g.first_nonpositive().is_none());
        let grid = s.cop.op().grid().clone();
        for phi in [
            "plateau(p, 0.1, 0.2, 3)",
            "smoothstep_bump([0.1, 0, 0], 0.0, 0.2, 1) + const(2)",
        ] {
            let phi = Expr::parse(phi).unwrap().sample(&grid).unwrap();
            let pair = g.pairing(s.cop.op(), &phi).unwrap();
            assert!((pair - phi.at_marked()).abs() < 1e-9 * phi.at_marked().abs().max(1.0));
        }
        // the continuum-kernel form is dominated by κ r^{-1} near p and positive off p
        let cont = g.with_continuum_kernel(&s.kernel);
        assert!(cont.at_marked().is_nan());
        let p = grid.marked_index();
        assert!((0..grid.len())
            .filter(|&i| i != p)
            .all(|i| cont.at(i) > 0.0));
    }

    #[test]
    fn dirichlet_mass_equals_the_torus_mass_on_the_whole_torus() {
        let s = setup(32, "const(0)", "ramp(p, 0.25, 0.4, 10)");
        let whole = DirichletDomain::whole(s.cop.op().grid());
        let a = mass_dirichlet(s.cop.op(), &s.kernel, &whole, &opts())
            .unwrap()
            .mass;
        let b = mass_direct(&s.cop, &s.kernel, &opts()).unwrap().mass;
        assert!((a - b).abs() < 1e-10);
        let tiny = DirichletDomain::ball(s.cop.op().grid(), 0.2).unwrap();
        assert!(matches!(
            mass_dirichlet(s.cop.op(), &s.kernel, &tiny, &opts()),
            Err(MassError::DomainTooSmall { .. })
        ));
    }

    #[test]
    fn dirichlet_masses_are_nested() {
        let s = setup(32, "const(0)", "ramp(p, 0.25, 0.4, 10)");
        let grid = s.cop.op().grid().clone();
        let mut prev = f64::NEG_INFINITY;
        for r in [0.27, 0.33, 0.4, 0.47] {
            let d = DirichletDomain::ball(&grid, r).unwrap();
            let m = mass_dirichlet(s.cop.op(), &s.kernel, &d, &opts())
                .unwrap()
                .mass;
            assert!(m >= prev, "radius {r}: {m} < {prev}");
            prev = m;
        }
        let full = mass_direct(&s.cop, &s.kernel, &opts()).unwrap().mass;
        assert!(prev <= full);
    }

    #[test]
    fn blowup_identity_closes_exactly() {
        let s = setup(
            32,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        );
        let g = green_function(&s.cop, &s.kernel, &opts()).unwrap();
        let grid = s.cop.op().grid().clone();
        let zero = ScalarField::zeros(&grid);
        let chi = center_cutoff(&grid, 2.0 * grid.spacing());
        let near = g.regular().zip_map(&chi, |u, c| u * c).unwrap();
        for u in [&zero, &near] {
            for rho in [4.0, 8.0] {
                let c =
                    blowup_identity_check(&s.cop, &s.kernel, &g, u, rho * grid.spacing()).unwrap();
                assert!(
                    c.closure_error().abs() < 1e-9 * c.lhs.abs().max(1.0),
                    "{c:?}"
                );
            }
        }
        // for u = χ·(G − k̃), Φ ≡ 1 away from p and the identity approaches −m
        let c = blowup_identity_check(&s.cop, &s.kernel, &g, &near, 8.0 * grid.spacing()).unwrap();
        assert!((c.rhs + g.mass()).abs() < 1e-12);
    }

    #[test]
    fn cutoff_formula_is_exact() {
        let s = setup(
            32,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        );
        let grid = s.cop.op().grid().clone();
        let u = Expr::parse("cos_mode([1, 2, 0], 1) + plateau([0.3, 0.5, 0.5], 0.05, 0.3, 2)")
            .unwrap()
            .sample(&grid)
            .unwrap();
        let chi = center_cutoff(&grid, 0.1);
        let (l, r) = cutoff_formula(s.cop.op(), u.values(), chi.values());
        assert!((l - r).abs() < 1e-12 * l.abs());
        let bad = s.cop.op().corrupt_symmetry(1e-4);
        let (l, r) = cutoff_formula(&bad, u.values(), chi.values());
        assert!((l - r).abs() > 1e-9 * l.abs());
    }

    #[test]
    fn homothety_rescales_the_mass_exactly() {
        let s = setup(
            32,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        );
        let m = mass_direct(&s.cop, &s.kernel, &opts()).unwrap().mass;
        let lambda = 2.0;
        let metric = s.metric.scaled(lambda).unwrap();
        let pot = s.potential.scaled(lambda).unwrap();
        let kernel = build_kernel(&metric, &build_cutoff(3, 0.125 * lambda).unwrap()).unwrap();
        let cop = CertifiedOperator::certify(assemble(&metric, &pot).unwrap()).unwrap();
        let ms = mass_direct(&cop, &kernel, &opts()).unwrap().mass;
        assert!((ms - m / lambda).abs() <= 1e-12 * m.abs());
    }

    #[test]
    fn conformal_change_rescales_the_mass_by_c_to_the_minus_two() {
        let s = setup(
            32,
            "smoothstep_bump(p, 0.3, 0.45, 0.3)",
            "ramp(p, 0.25, 0.4, 10)",
        );
        let grid = s.metric.grid().clone();
        let cutoff = build_cutoff(3, 0.125).unwrap();
        for (u, c) in [
            ("const(1)", 1.0),
            ("const(1.5)", 1.5),
            ("const(1) + smoothstep_bump(p, 0.3, 0.45, 0.4)", 1.0),
        ] {
            let uf = Expr::parse(u).unwrap().sample(&grid).unwrap();
            let rel =
                conformal_mass_relation(&s.metric, &s.potential, &uf, &cutoff, &opts()).unwrap();
            assert_eq!(rel.c, c);
            assert!(rel.same_sign);
            assert!((rel.ratio - rel.expected_ratio).abs() < 1e-9, "{rel:?}");
        }
    }
}
