//! Conformally flat metrics on the torus, potentials, and the discrete
//! operator `P_f = Δ_g + f`.
//!
//! The metric is `g = e^{2φ}·ξ`. Writing `w = e^{(n−2)φ/2}`, the stiffness
//! form is the divergence-form Laplacian with face weights
//! `w_i·w_j·h^{n−2}` (the geometric mean of `e^{(n−2)φ}` at the two ends)
//! and the volume form is diagonal with entries `e^{nφ}·hⁿ`. Then
//!
//! ```text
//! u·A·u = Σ_faces a_ij (u_i − u_j)² + Σ_i V_i f_i u_i²
//! ```
//!
//! and `Δ_g` is the geometer's (nonnegative) Laplacian.

use rayon::prelude::*;

use crate::error::{MassError, Result};
use crate::expr::Expr;
use crate::grid::{ScalarField, TorusGrid, MAX_DIM};
use crate::linalg;

/// Largest |φ| or |f| accepted as "zero" near the marked point.
pub const FLAT_TOLERANCE: f64 = 1e-14;

/// `(n−2)/(4(n−1))`, the scalar-curvature coefficient of the conformal Laplacian.
pub fn yamabe_constant(dim: usize) -> f64 {
    let n = dim as f64;
    (n - 2.0) / (4.0 * (n - 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalMetric {
    log_factor: ScalarField,
    flat_radius: f64,
    /// `w = e^{(n−2)φ/2}` per node.
    weight: Vec<f64>,
    /// `e^{nφ}·hⁿ` per node.
    volume: Vec<f64>,
}

impl ConformalMetric {
    /// Flat torus metric. The flat radius is a quarter of the side.
    pub fn flat(grid: &TorusGrid) -> Self {
        Self::from_parts(ScalarField::zeros(grid), 0.25 * grid.side())
    }

    /// Flat torus metric that only promises flatness (and a vanishing
    /// potential) on `B(p, flat_radius)`; zero makes no promise.
    pub fn flat_with_radius(grid: &TorusGrid, flat_radius: f64) -> Result<Self> {
        if !(flat_radius >= 0.0 && 2.0 * flat_radius <= 0.5 * grid.side()) {
            return Err(MassError::GeometryError(format!(
                "flat radius {flat_radius} out of range"
            )));
        }
        Ok(Self::from_parts(ScalarField::zeros(grid), flat_radius))
    }

    /// Wraps a sampled log-conformal factor. The value at `p` is subtracted
    /// first, so a global constant shift is normalized away.
    pub fn from_log_factor(log_factor: ScalarField, flat_radius: f64) -> Result<Self> {
        let grid = log_factor.grid().clone();
        check_flat_radius(&grid, flat_radius)?;
        let shift = log_factor.at_marked();
        let phi = log_factor.map(|v| v - shift);
        // Flatness is required on the ball and on its lattice neighbours so
        // that the five-point curvature vanishes on the whole ball too.
        let reach = flat_radius + grid.spacing() * (1.0 + 1e-9);
        for i in 0..grid.len() {
            if grid.distance_to_marked(i) <= reach && phi.at(i).abs() > FLAT_TOLERANCE {
                return Err(MassError::FlatnessViolation {
                    node: i,
                    value: phi.at(i).abs(),
                });
            }
        }
        Ok(Self::from_parts(phi, flat_radius))
    }

    fn from_parts(log_factor: ScalarField, flat_radius: f64) -> Self {
        let grid = log_factor.grid();
        let n = grid.dim() as f64;
        let hn = grid.spacing().powi(grid.dim() as i32);
        let weight = log_factor
            .values()
            .iter()
            .map(|&p| ((n - 2.0) * p / 2.0).exp())
            .collect();
        let volume = log_factor
            .values()
            .iter()
            .map(|&p| (n * p).exp() * hn)
            .collect();
        Self {
            log_factor,
            flat_radius,
            weight,
            volume,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.log_factor.grid()
    }

    pub fn log_factor(&self) -> &ScalarField {
        &self.log_factor
    }

    pub fn flat_radius(&self) -> f64 {
        self.flat_radius
    }

    /// Node weights `w = e^{(n−2)φ/2}`.
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volume
    }

    pub fn is_flat(&self) -> bool {
        self.log_factor.values().iter().all(|&v| v == 0.0)
    }

    /// The same metric on a torus `lambda` times larger (φ transported node by node).
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        let grid = self.grid().scaled(lambda)?;
        let phi = ScalarField::from_values(&grid, self.log_factor.values().to_vec())?;
        Ok(Self::from_parts(phi, self.flat_radius * lambda))
    }

    /// The metric `u^{4/(n−2)}·g` for a positive factor `u` that equals a
    /// constant `c` near `p`. The result is stored in normalized form, on a
    /// torus `c^{2/(n−2)}` times larger; the returned `c` is the value of `u` at `p`.
    pub fn conformal_change(&self, u: &ScalarField) -> Result<(Self, f64)> {
        if !u.same_grid(&self.log_factor) {
            return Err(MassError::GridMismatch);
        }
        if let Some(i) = u.values().iter().position(|&v| !(v > 0.0)) {
            return Err(MassError::NotPositive(format!(
                "conformal factor at node {i}"
            )));
        }
        let c = u.at_marked();
        let n = self.grid().dim() as f64;
        let lambda = c.powf(2.0 / (n - 2.0));
        let grid = self.grid().scaled(lambda)?;
        let values: Vec<f64> = self
            .log_factor
            .values()
            .iter()
            .zip(u.values())
            .map(|(&p, &uv)| p + 2.0 / (n - 2.0) * (uv / c).ln())
            .collect();
        let phi = ScalarField::from_values(&grid, values)?;
        Ok((Self::from_log_factor(phi, self.flat_radius * lambda)?, c))
    }
}

fn check_flat_radius(grid: &TorusGrid, r_flat: f64) -> Result<()> {
    if !(r_flat > 0.0) {
        return Err(MassError::GeometryError(format!(
            "flat radius {r_flat} must be positive"
        )));
    }
    if 2.0 * r_flat > 0.5 * grid.side() {
        return Err(MassError::GeometryError(format!(
            "flat radius {r_flat} exceeds a quarter of the side {}",
            grid.side()
        )));
    }
    Ok(())
}

/// Samples `φ` from an expression and checks the flatness invariant.
///
/// Requires `r_flat ≥ 8h`; [`ConformalMetric::flat`] has no such floor.
pub fn build_metric(grid: &TorusGrid, phi: &Expr, r_flat: f64) -> Result<ConformalMetric> {
    check_flat_radius(grid, r_flat)?;
    if r_flat < 8.0 * grid.spacing() * (1.0 - 1e-12) {
        return Err(MassError::ResolutionError(format!(
            "flat radius {r_flat} is below 8h = {}",
            8.0 * grid.spacing()
        )));
    }
    ConformalMetric::from_log_factor(phi.sample(grid)?, r_flat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    field: ScalarField,
    flat_radius_check: f64,
}

impl Potential {
    /// Wraps `f`, checking that it vanishes on the open ball `B(p, flat_radius_check)`.
    pub fn new(field: ScalarField, flat_radius_check: f64) -> Result<Self> {
        let grid = field.grid();
        for i in 0..grid.len() {
            if grid.distance_to_marked(i) < flat_radius_check && field.at(i).abs() > FLAT_TOLERANCE
            {
                return Err(MassError::PotentialSupport {
                    node: i,
                    value: field.at(i).abs(),
                });
            }
        }
        Ok(Self {
            field,
            flat_radius_check,
        })
    }

    pub fn zero(grid: &TorusGrid) -> Self {
        Self {
            field: ScalarField::zeros(grid),
            flat_radius_check: 0.0,
        }
    }

    pub fn from_expr(grid: &TorusGrid, f: &Expr, flat_radius_check: f64) -> Result<Self> {
        Self::new(f.sample(grid)?, flat_radius_check)
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn flat_radius_check(&self) -> f64 {
        self.flat_radius_check
    }

    /// `f + a·φ`.
    pub fn shifted(&self, phi: &ScalarField, a: f64) -> Result<Self> {
        let field = self.field.zip_map(phi, |f, p| f + a * p)?;
        Ok(Self {
            field,
            flat_radius_check: self.flat_radius_check,
        })
    }

    /// `λ⁻²·f` on the `lambda`-times larger torus.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        let grid = self.field.grid().scaled(lambda)?;
        let inv = 1.0 / (lambda * lambda);
        let values = self.field.values().iter().map(|v| v * inv).collect();
        Ok(Self {
            field: ScalarField::from_values(&grid, values)?,
            flat_radius_check: self.flat_radius_check * lambda,
        })
    }
}

/// Discrete `scal_g = 4(n−1)/(n−2) · w^{−(n+2)/(n−2)} · Δ_h w` with the flat
/// five-point Laplacian `Δ_h` (geometer's sign).
pub fn compute_scalar_curvature(metric: &ConformalMetric) -> ScalarField {
    let grid = metric.grid();
    let n = grid.dim() as f64;
    let w = metric.weights();
    let h2 = grid.spacing() * grid.spacing();
    let pre = 4.0 * (n - 1.0) / (n - 2.0);
    let expo = -(n + 2.0) / (n - 2.0);
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut lap = 2.0 * n * w[i];
            for axis in 0..grid.dim() {
                lap -= w[grid.neighbor(i, axis, true)] + w[grid.neighbor(i, axis, false)];
            }
            pre * w[i].powf(expo) * lap / h2
        })
        .collect();
    ScalarField::from_raw(grid, values)
}

/// `f = (n−2)/(4(n−1))·scal_g`, so that assembling gives the conformal Laplacian.
pub fn yamabe_potential(metric: &ConformalMetric) -> Result<Potential> {
    let c = yamabe_constant(metric.grid().dim());
    Potential::new(
        compute_scalar_curvature(metric).map(|s| c * s),
        metric.flat_radius(),
    )
}

/// `Σ field·e^{nφ}·hⁿ`.
pub fn integrate(field: &ScalarField, metric: &ConformalMetric) -> Result<f64> {
    if field.grid() != metric.grid() {
        return Err(MassError::GridMismatch);
    }
    Ok(linalg::dot(field.values(), metric.volumes()))
}

/// Assembled discrete operator `A = S + V·f`, optionally restricted to a
/// Dirichlet domain.
///
/// Faces are stored per node and axis: `faces[i·n + k]` couples node `i`
/// with its forward neighbour along axis `k`. Dirichlet restriction moves
/// faces that cross the boundary onto the diagonal and turns exterior rows
/// into scaled identity rows.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    metric: ConformalMetric,
    potential: Potential,
    faces: Vec<f64>,
    diag: Vec<f64>,
    pinned: Option<Vec<bool>>,
    skew: f64,
}

pub fn assemble(metric: &ConformalMetric, potential: &Potential) -> Result<OperatorSpec> {
    OperatorSpec::new(metric, potential)
}

impl OperatorSpec {
    pub fn new(metric: &ConformalMetric, potential: &Potential) -> Result<Self> {
        let grid = metric.grid();
        if grid != potential.field().grid() {
            return Err(MassError::GridMismatch);
        }
        let f = potential.field();
        for i in 0..grid.len() {
            if grid.distance_to_marked(i) < metric.flat_radius() && f.at(i).abs() > FLAT_TOLERANCE {
                return Err(MassError::PotentialSupport {
                    node: i,
                    value: f.at(i).abs(),
                });
            }
        }
        let dim = grid.dim();
        let hd = grid.spacing().powi(dim as i32 - 2);
        let w = metric.weights();
        let mut faces = vec![0.0; grid.len() * dim];
        faces.par_chunks_mut(dim).enumerate().for_each(|(i, fc)| {
            for (axis, slot) in fc.iter_mut().enumerate() {
                *slot = w[i] * w[grid.neighbor(i, axis, true)] * hd;
            }
        });
        let diag = metric
            .volumes()
            .iter()
            .zip(f.values())
            .map(|(v, fv)| v * fv)
            .collect();
        Ok(Self {
            metric: metric.clone(),
            potential: potential.clone(),
            faces,
            diag,
            pinned: None,
            skew: 0.0,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        self.metric.grid()
    }

    pub fn metric(&self) -> &ConformalMetric {
        &self.metric
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn volumes(&self) -> &[f64] {
        self.metric.volumes()
    }

    pub fn len(&self) -> usize {
        self.grid().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pinned(&self) -> Option<&[bool]> {
        self.pinned.as_deref()
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinned.as_ref().is_some_and(|p| p[i])
    }

    /// Face weight between `i` and its forward neighbour along `axis`.
    pub fn face(&self, i: usize, axis: usize) -> f64 {
        self.faces[i * self.grid().dim() + axis]
    }

    /// Calls `visit(i, j, a_ij)` for every face, in a fixed order.
    pub fn for_each_face(&self, mut visit: impl FnMut(usize, usize, f64)) {
        let grid = self.grid();
        let dim = grid.dim();
        for i in 0..grid.len() {
            for axis in 0..dim {
                let a = self.faces[i * dim + axis];
                if a != 0.0 {
                    visit(i, grid.neighbor(i, axis, true), a);
                }
            }
        }
    }

    /// Diagonal of `A`, used as the Jacobi preconditioner.
    pub fn diagonal(&self) -> Vec<f64> {
        let grid = self.grid();
        let dim = grid.dim();
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                if self.is_pinned(i) {
                    return self.diag[i];
                }
                let mut d = self.diag[i];
                for axis in 0..dim {
                    d += self.faces[i * dim + axis];
                    d += self.faces[grid.neighbor(i, axis, false) * dim + axis];
                }
                d
            })
            .collect()
    }

    /// The diagonal `V·f` part plus any boundary terms.
    pub fn potential_diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// `out = A·u`.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let grid = self.grid();
        let n = grid.resolution();
        let dim = grid.dim();
        let last = dim - 1;
        let up = 1.0 + self.skew;
        let faces = &self.faces;
        let diag = &self.diag;
        let pinned = self.pinned.as_deref();
        out.par_chunks_mut(n).enumerate().for_each(|(line, o)| {
            let base = line * n;
            let mut fwd = [0isize; MAX_DIM];
            let mut bwd = [0isize; MAX_DIM];
            for axis in 0..last {
                fwd[axis] = grid.neighbor(base, axis, true) as isize - base as isize;
                bwd[axis] = grid.neighbor(base, axis, false) as isize - base as isize;
            }
            for (k, ok) in o.iter_mut().enumerate() {
                let i = base + k;
                let ui = u[i];
                if pinned.is_some_and(|p| p[i]) {
                    *ok = diag[i] * ui;
                    continue;
                }
                let mut s = diag[i] * ui;
                for axis in 0..last {
                    let j = (i as isize + fwd[axis]) as usize;
                    let m = (i as isize + bwd[axis]) as usize;
                    s += faces[i * dim + axis] * up * (ui - u[j]);
                    s += faces[m * dim + axis] * (ui - u[m]);
                }
                let j = if k + 1 == n { base } else { i + 1 };
                let m = if k == 0 { base + n - 1 } else { i - 1 };
                s += faces[i * dim + last] * up * (ui - u[j]);
                s += faces[m * dim + last] * (ui - u[m]);
                *ok = s;
            }
        });
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply_into(u, &mut out);
        out
    }

    /// `u·A·u` from the face/diagonal decomposition.
    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        let mut faces = 0.0;
        self.for_each_face(|i, j, a| faces += a * (u[i] - u[j]) * (u[i] - u[j]));
        faces + linalg::dot3(&self.diag, u, u)
    }

    /// `Σ_i V_i·x_i·y_i`.
    pub fn volume_pairing(&self, x: &[f64], y: &[f64]) -> f64 {
        linalg::dot3(self.volumes(), x, y)
    }

    /// Returns `A + a·V·φ`, i.e. the operator with potential `f + aφ`.
    pub fn with_shifted_potential(&self, phi: &ScalarField, a: f64) -> Result<Self> {
        let potential = self.potential.shifted(phi, a)?;
        let mut out = self.clone();
        for (i, d) in out.diag.iter_mut().enumerate() {
            if !self.is_pinned(i) {
                *d += a * self.volumes()[i] * phi.at(i);
            }
        }
        out.potential = potential;
        Ok(out)
    }

    /// Applies Dirichlet conditions outside `mask`. `cut` gives, for an
    /// interior node and an exterior forward/backward neighbour, the
    /// fraction of the face that lies inside the domain.
    pub(crate) fn restricted(
        &self,
        mask: &[bool],
        cut: impl Fn(usize, usize, usize, bool) -> f64,
    ) -> Self {
        let grid = self.grid();
        let dim = grid.dim();
        let full = self.diagonal();
        let mut out = self.clone();
        for i in 0..grid.len() {
            for axis in 0..dim {
                let k = i * dim + axis;
                let a = out.faces[k];
                if a == 0.0 {
                    continue;
                }
                let j = grid.neighbor(i, axis, true);
                match (mask[i], mask[j]) {
                    (true, true) => {}
                    (true, false) => {
                        out.faces[k] = 0.0;
                        out.diag[i] += a / cut(i, j, axis, true);
                    }
                    (false, true) => {
                        out.faces[k] = 0.0;
                        out.diag[j] += a / cut(j, i, axis, false);
                    }
                    (false, false) => out.faces[k] = 0.0,
                }
            }
        }
        let mut pinned = self
            .pinned
            .clone()
            .unwrap_or_else(|| vec![false; grid.len()]);
        for i in 0..grid.len() {
            if !mask[i] {
                pinned[i] = true;
                out.diag[i] = full[i];
            }
        }
        out.pinned = Some(pinned);
        out
    }

    #[cfg(test)]
    pub(crate) fn without_stiffness(&self) -> Self {
        let mut out = self.clone();
        out.faces.iter_mut().for_each(|a| *a = 0.0);
        out
    }

    /// Test hook: scales the forward-face coefficient of every row by
    /// `1 + eps`, which breaks symmetry of `apply` while leaving
    /// [`quadratic_form`](Self::quadratic_form) unchanged.
    pub fn corrupt_symmetry(&self, eps: f64) -> Self {
        let mut out = self.clone();
        out.skew = eps;
        out
    }
}
