//! The radial cutoff `η`, the singular field `η·r^{2−n}`, its Laplacian
//! `F_η`, and the lattice kernel that the solves actually use.
//!
//! The continuum objects (`F_η` sampled from its closed form, `c0` by 1-D
//! quadrature) are kept as references. Solving against them leaves an
//! O(1) lattice error at `p`, because the grid cannot see `r^{2−n}` at one
//! node. The lattice kernel `k̃` avoids that: near `p` it is the lattice
//! Green function of the flat stencil, normalized so that
//! `k̃(p) = g0·h^{2−n}` where `g0` is the value at the origin of the unit
//! lattice Green function on ℤⁿ. Multiplying by `ψ/κ` cuts it off exactly
//! like `η·r^{2−n}`. The discrete source `b = A·k̃ − e_p` then vanishes
//! outside the annulus `δ − h < r < 2δ + h`, and `u(p)` for `A·u = −b` is
//! the discrete mass.

use std::io::Write;

use crate::error::{MassError, Result};
use crate::expr::{smoothstep, smoothstep_d1, smoothstep_d2};
use crate::grid::{ScalarField, TorusGrid};
use crate::linalg;
use crate::manifold::{assemble, ConformalMetric, OperatorSpec, Potential};
use crate::quadrature;
use crate::solver::{restrict_dirichlet, solve_weak, DirichletDomain, SolveOptions};

/// `∫₀^∞ (e^{−2t} I₀(2t))ⁿ dt`, the unit-lattice Green function of the
/// (2n+1)-point Laplacian at the origin, for n = 3, 4, 5.
#[allow(clippy::excessive_precision)]
const LATTICE_GREEN_ORIGIN: [f64; 3] = [
    0.252_731_009_858_663_003,
    0.154_933_390_231_060_214,
    0.115_630_812_484_023_118,
];

pub fn lattice_green_origin(dim: usize) -> f64 {
    LATTICE_GREEN_ORIGIN[dim - 3]
}

/// Volume `ω_{n−1}` of the unit (n−1)-sphere.
pub fn sphere_volume(dim: usize) -> f64 {
    use std::f64::consts::PI;
    match dim {
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        5 => 8.0 * PI * PI / 3.0,
        _ => unreachable!("dimension checked by the grid"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffProfile {
    dim: usize,
    delta: f64,
    kappa: f64,
}

/// `ψ = κ_n` on `[0, δ]`, quintic smoothstep down to 0 on `[δ, 2δ]`,
/// with `κ_n = 1/((n−2)·ω_{n−1})`.
pub fn build_cutoff(dim: usize, delta: f64) -> Result<CutoffProfile> {
    if !(3..=5).contains(&dim) {
        return Err(MassError::InvalidGrid(format!(
            "dimension {dim} outside 3..=5"
        )));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(MassError::GeometryError(format!(
            "cutoff radius {delta} must be positive"
        )));
    }
    let kappa = 1.0 / ((dim as f64 - 2.0) * sphere_volume(dim));
    Ok(CutoffProfile { dim, delta, kappa })
}

impl CutoffProfile {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Plateau value κ_n.
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn support_radius(&self) -> f64 {
        2.0 * self.delta
    }

    fn t(&self, r: f64) -> f64 {
        (r - self.delta) / self.delta
    }

    pub fn psi(&self, r: f64) -> f64 {
        self.kappa * (1.0 - smoothstep(self.t(r)))
    }

    pub fn psi_d1(&self, r: f64) -> f64 {
        -self.kappa * smoothstep_d1(self.t(r)) / self.delta
    }

    pub fn psi_d2(&self, r: f64) -> f64 {
        -self.kappa * smoothstep_d2(self.t(r)) / (self.delta * self.delta)
    }

    /// `ψ/κ`, the cutoff with plateau value 1.
    pub fn unit(&self, r: f64) -> f64 {
        1.0 - smoothstep(self.t(r))
    }

    /// `ψ(r)·r^{2−n}`.
    pub fn eta_r(&self, r: f64) -> f64 {
        self.psi(r) * r.powi(2 - self.dim as i32)
    }

    /// `F_η(r) = Δ(ψ r^{2−n}) = −ψ″·r^{2−n} + (n−3)·ψ′·r^{1−n}`.
    pub fn f_eta(&self, r: f64) -> f64 {
        if r <= self.delta || r >= 2.0 * self.delta {
            return 0.0;
        }
        let n = self.dim as i32;
        -self.psi_d2(r) * r.powi(2 - n) + (n - 3) as f64 * self.psi_d1(r) * r.powi(1 - n)
    }

    /// `c0 = ω_{n−1} ∫_δ^{2δ} ψ·r^{2−n}·F_η·r^{n−1} dr`.
    pub fn c0(&self) -> f64 {
        self.c0_with_breaks(&[self.delta, 2.0 * self.delta])
    }

    pub fn c0_with_breaks(&self, breaks: &[f64]) -> f64 {
        let n = self.dim as i32;
        let q = quadrature::integrate_partitioned(
            |r| self.eta_r(r) * self.f_eta(r) * r.powi(n - 1),
            breaks,
            1e-14,
        );
        sphere_volume(self.dim) * q.value
    }

    /// `ω_{n−1} ∫ F_η r^{n−1} dr`, which is −1 by the divergence theorem.
    pub fn f_eta_integral(&self) -> f64 {
        let n = self.dim as i32;
        let q = quadrature::integrate(
            |r| self.f_eta(r) * r.powi(n - 1),
            self.delta,
            2.0 * self.delta,
            1e-14,
        );
        sphere_volume(self.dim) * q.value
    }
}

#[derive(Debug, Clone)]
pub struct SingularKernel {
    cutoff: CutoffProfile,
    r_field: ScalarField,
    eta_r: ScalarField,
    f_eta: ScalarField,
    c0: f64,
    lattice: ScalarField,
    center_value: f64,
}

/// Builds the kernel on the metric's grid.
///
/// Errors with `ResolutionError` if `2δ < 8h` and `GeometryError` if the
/// cutoff support leaves the flat ball.
pub fn build_kernel(metric: &ConformalMetric, cutoff: &CutoffProfile) -> Result<SingularKernel> {
    let grid = metric.grid();
    if cutoff.dim() != grid.dim() {
        return Err(MassError::GridMismatch);
    }
    let h = grid.spacing();
    let outer = cutoff.support_radius();
    if outer < 8.0 * h * (1.0 - 1e-12) {
        return Err(MassError::ResolutionError(format!(
            "cutoff support 2δ = {outer} is below 8h = {}",
            8.0 * h
        )));
    }
    if outer > metric.flat_radius() * (1.0 + 1e-12) {
        return Err(MassError::GeometryError(format!(
            "cutoff support 2δ = {outer} exceeds the flat radius {}",
            metric.flat_radius()
        )));
    }
    let pidx = grid.marked_index();
    let r_field = ScalarField::from_fn(grid, |i| grid.distance_to_marked(i));
    let eta_r = ScalarField::from_raw(
        grid,
        r_field
            .values()
            .iter()
            .enumerate()
            .map(|(i, &r)| if i == pidx { f64::NAN } else { cutoff.eta_r(r) })
            .collect(),
    );
    let f_eta = r_field.map(|r| cutoff.f_eta(r));
    let center_value = lattice_green_origin(grid.dim()) * h.powi(2 - grid.dim() as i32);
    let lattice = lattice_kernel(grid, cutoff, center_value)?;
    Ok(SingularKernel {
        cutoff: *cutoff,
        r_field,
        eta_r,
        f_eta,
        c0: cutoff.c0(),
        lattice,
        center_value,
    })
}

/// `ψ̂·(k_D + C)`: `k_D` is the flat-lattice Dirichlet Green function of a
/// ball slightly larger than the cutoff support, `C` restores the
/// free-lattice value at `p`.
fn lattice_kernel(
    grid: &TorusGrid,
    cutoff: &CutoffProfile,
    center_value: f64,
) -> Result<ScalarField> {
    let h = grid.spacing();
    let radius = cutoff.support_radius() + 4.0 * h;
    let flat = ConformalMetric::flat_with_radius(grid, 0.0)?;
    let op = assemble(&flat, &Potential::zero(grid))?;
    let ball = DirichletDomain::staircase_ball(grid, radius)?;
    let restricted = restrict_dirichlet(&op, &ball)?;
    let pidx = grid.marked_index();
    let mut e = vec![0.0; grid.len()];
    e[pidx] = 1.0;
    let k = solve_weak(
        &restricted,
        &e,
        &SolveOptions {
            tol: 1e-14,
            max_iter: 20_000,
        },
    )?;
    if !(k.relative_residual <= 1e-12) {
        return Err(MassError::NotConverged {
            residual: k.relative_residual,
            iterations: k.iterations,
        });
    }
    let kd = k.solution.values();
    let shift = center_value - kd[pidx];
    let mut values: Vec<f64> = (0..grid.len())
        .map(|i| {
            let w = cutoff.unit(grid.distance_to_marked(i));
            if w == 0.0 {
                0.0
            } else {
                w * (kd[i] + shift)
            }
        })
        .collect();
    values[pidx] = center_value;
    ScalarField::from_values(grid, values)
}

impl SingularKernel {
    pub fn cutoff(&self) -> &CutoffProfile {
        &self.cutoff
    }

    pub fn grid(&self) -> &TorusGrid {
        self.r_field.grid()
    }

    pub fn r_field(&self) -> &ScalarField {
        &self.r_field
    }

    /// `η·r^{2−n}`; the value at `p` is a NaN sentinel that no formula reads.
    pub fn eta_r(&self) -> &ScalarField {
        &self.eta_r
    }

    /// Closed-form `F_η` sampled at the nodes.
    pub fn f_eta(&self) -> &ScalarField {
        &self.f_eta
    }

    /// Continuum `c0` from 1-D quadrature.
    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// The lattice kernel `k̃`.
    pub fn lattice(&self) -> &ScalarField {
        &self.lattice
    }

    /// `k̃(p) = g0·h^{2−n}`.
    pub fn center_value(&self) -> f64 {
        self.center_value
    }

    /// Weak-form source `b = A·k̃ − e_p` of `op` (zero on pinned nodes).
    pub fn source(&self, op: &OperatorSpec) -> Result<Vec<f64>> {
        if op.grid() != self.grid() {
            return Err(MassError::GridMismatch);
        }
        let mut b = op.apply(self.lattice.values());
        b[self.grid().marked_index()] -= 1.0;
        crate::solver::mask_pinned(op, &mut b);
        Ok(b)
    }

    /// Lattice counterpart of `c0`: `k̃·b`.
    pub fn c0_lattice(&self, op: &OperatorSpec) -> Result<f64> {
        Ok(linalg::dot(self.lattice.values(), &self.source(op)?))
    }

    /// Writes `node,r,eta,f_eta,lattice_kernel` rows for every node.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "node,r,eta,f_eta,lattice_kernel")?;
        for i in 0..self.grid().len() {
            let r = self.r_field.at(i);
            writeln!(
                out,
                "{i},{r:.17e},{:.17e},{:.17e},{:.17e}",
                self.cutoff.psi(r),
                self.f_eta.at(i),
                self.lattice.at(i)
            )?;
        }
        Ok(())
    }
}
