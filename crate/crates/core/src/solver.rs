//! Preconditioned conjugate gradients, the smallest eigenpair of the pencil
//! `(A, V)`, and Dirichlet restriction.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::Serialize;

use crate::error::{MassError, Result};
use crate::grid::{ScalarField, TorusGrid, MAX_DIM};
use crate::linalg;
use crate::manifold::OperatorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SolveOptions {
    /// Relative residual target `‖b − Ax‖ / ‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub solution: ScalarField,
    pub relative_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SolveReport {
    /// Turns a non-converged report into [`MassError::NotConverged`].
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(MassError::NotConverged {
                residual: self.relative_residual,
                iterations: self.iterations,
            })
        }
    }
}

/// Raw PCG on `A·x = b` with a Jacobi preconditioner.
///
/// `on_step(alpha, rz)` is called after every update with the step length
/// and `rᵀz` before the update; for the quadratic `xAx − 2bx` the value
/// drops by exactly `alpha·rz`.
const STAGNATION_WINDOW: usize = 1000;

pub(crate) fn pcg(
    op: &OperatorSpec,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &SolveOptions,
    mut on_step: impl FnMut(f64, f64),
) -> Result<(Vec<f64>, f64, usize)> {
    let n = b.len();
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let bnorm = linalg::norm(b);
    let mut x = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 && x0.is_none() {
        return Ok((x, 0.0, 0));
    }
    let scale = if bnorm > 0.0 { bnorm } else { 1.0 };
    let mut r = op.apply(&x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = linalg::dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = linalg::norm(&r) / scale;
    let mut it = 0;
    let mut restarts = 0;
    loop {
        // give up on a pass once the residual has not halved in a while
        let (mut best, mut best_it) = (res, it);
        while res > opts.tol && it < opts.max_iter && it - best_it < STAGNATION_WINDOW {
            op.apply_into(&p, &mut ap);
            let pap = linalg::dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(MassError::NotPositive(format!(
                    "conjugate gradients met a direction with pAp = {pap:e}"
                )));
            }
            let alpha = rz / pap;
            linalg::axpy(alpha, &p, &mut x);
            linalg::axpy(-alpha, &ap, &mut r);
            on_step(alpha, rz);
            it += 1;
            // refresh the recursive residual now and then
            if it % 200 == 0 {
                let ax = op.apply(&x);
                for ((ri, bi), axi) in r.iter_mut().zip(b).zip(&ax) {
                    *ri = bi - axi;
                }
            }
            res = linalg::norm(&r) / scale;
            if res < 0.5 * best {
                (best, best_it) = (res, it);
            }
            for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&inv_diag) {
                *zi = ri * di;
            }
            let rz_new = linalg::dot(&r, &z);
            linalg::xpby(&z, rz_new / rz, &mut p);
            rz = rz_new;
        }
        // the recursive residual drifts from the true one; restart from the
        // latter a few times before giving up
        let ax = op.apply(&x);
        for ((ri, bi), axi) in r.iter_mut().zip(b).zip(&ax) {
            *ri = bi - axi;
        }
        let true_res = linalg::norm(&r) / scale;
        if true_res <= opts.tol || it >= opts.max_iter || restarts == 3 {
            return Ok((x, true_res, it));
        }
        restarts += 1;
        res = true_res;
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&inv_diag) {
            *zi = ri * di;
        }
        p.copy_from_slice(&z);
        rz = linalg::dot(&r, &z);
    }
}

/// Zeroes entries of pinned (Dirichlet-exterior) nodes.
pub(crate) fn mask_pinned(op: &OperatorSpec, v: &mut [f64]) {
    if let Some(p) = op.pinned() {
        for (x, &pin) in v.iter_mut().zip(p) {
            if pin {
                *x = 0.0;
            }
        }
    }
}

/// Solves `A·u = V·rhs`. A report with `converged = false` is returned
/// rather than an error so callers can inspect it.
pub fn solve_spd(op: &OperatorSpec, rhs: &ScalarField, tol: f64) -> Result<SolveReport> {
    solve_weak(op, &weak_rhs(op, rhs)?, &SolveOptions::with_tol(tol))
}

pub(crate) fn weak_rhs(op: &OperatorSpec, rhs: &ScalarField) -> Result<Vec<f64>> {
    if rhs.grid() != op.grid() {
        return Err(MassError::GridMismatch);
    }
    if let Some(i) = rhs.values().iter().position(|v| !v.is_finite()) {
        return Err(MassError::NonFinite(i));
    }
    let mut b: Vec<f64> = rhs
        .values()
        .iter()
        .zip(op.volumes())
        .map(|(r, v)| r * v)
        .collect();
    mask_pinned(op, &mut b);
    Ok(b)
}

/// Solves `A·u = b` for an already weak right-hand side.
pub fn solve_weak(op: &OperatorSpec, b: &[f64], opts: &SolveOptions) -> Result<SolveReport> {
    if b.len() != op.len() {
        return Err(MassError::GridMismatch);
    }
    let (x, res, it) = pcg(op, b, None, opts, |_, _| {})?;
    Ok(SolveReport {
        solution: ScalarField::from_values(op.grid(), x)?,
        relative_residual: res,
        iterations: it,
        converged: res <= opts.tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenPair {
    pub lambda: f64,
    #[serde(skip)]
    pub vector: ScalarField,
    /// `‖A·x − λ·V·x‖` in the `V⁻¹` norm, with `xᵀVx = 1`. Bounds the
    /// distance from `lambda` to the spectrum.
    pub residual: f64,
    pub iterations: usize,
}

impl EigenPair {
    /// True when the sign of `lambda` is certified: it exceeds three
    /// residuals in magnitude.
    pub fn sign_certified(&self) -> bool {
        self.lambda.abs() > 3.0 * self.residual
    }
}

fn v_norm_residual(r: &[f64], vol: &[f64]) -> f64 {
    r.iter()
        .zip(vol)
        .map(|(a, v)| a * a / v)
        .sum::<f64>()
        .sqrt()
}

/// Smallest eigenpair of `A·u = λ·V·u`.
///
/// Single-vector LOBPCG brings the residual to a moderate level; shifted
/// inverse iteration (each step a PCG solve with `A − σV`, σ just below the
/// estimate) then polishes it to `tol·max(1, |λ|)`. The eigenvector is
/// normalized to `∫u² dv = 1` and made positive at `p`.
pub fn smallest_eigenvalue(op: &OperatorSpec, tol: f64) -> Result<EigenPair> {
    let n = op.len();
    let vol = op.volumes().to_vec();
    let pinned = op.pinned().map(<[bool]>::to_vec);
    let is_free = |i: usize| pinned.as_ref().is_none_or(|p| !p[i]);
    let diag = op.diagonal();
    let pot = op.potential_diagonal();
    let precond: Vec<f64> = (0..n)
        .map(|i| 1.0 / (diag[i] - pot[i] + pot[i].abs()).max(f64::MIN_POSITIVE))
        .collect();

    let vnormalize = |x: &mut Vec<f64>| {
        let s = linalg::dot3(&vol, x, x).sqrt();
        if s > 0.0 {
            linalg::scale(1.0 / s, x);
        }
        s
    };

    let mut x: Vec<f64> = (0..n).map(|i| if is_free(i) { 1.0 } else { 0.0 }).collect();
    if x.iter().all(|&v| v == 0.0) {
        return Err(MassError::EmptyDomain);
    }
    vnormalize(&mut x);
    let mut ax = op.apply(&x);
    let mut lambda = linalg::dot(&x, &ax);
    let mut p: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residual;
    let mut iterations = 0;
    let coarse = (1e-3 * tol.sqrt()).max(tol);
    let max_lobpcg = 4000;
    loop {
        let mut r: Vec<f64> = (0..n).map(|i| ax[i] - lambda * vol[i] * x[i]).collect();
        mask_pinned(op, &mut r);
        residual = v_norm_residual(&r, &vol);
        if residual <= coarse * lambda.abs().max(1.0) || iterations >= max_lobpcg {
            break;
        }
        iterations += 1;
        // preconditioned residual, B-orthogonalized against x and p
        let mut w: Vec<f64> = r.iter().zip(&precond).map(|(a, t)| a * t).collect();
        let xw = linalg::dot3(&vol, &x, &w);
        linalg::axpy(-xw, &x, &mut w);
        if vnormalize(&mut w) == 0.0 {
            break;
        }
        let mut basis = vec![(x.clone(), ax.clone()), (w.clone(), op.apply(&w))];
        if let Some((mut pv, mut apv)) = p.take() {
            for (bv, abv) in &basis {
                let c = linalg::dot3(&vol, bv, &pv);
                linalg::axpy(-c, bv, &mut pv);
                linalg::axpy(-c, abv, &mut apv);
            }
            let s = linalg::dot3(&vol, &pv, &pv).sqrt();
            if s > 1e-10 {
                linalg::scale(1.0 / s, &mut pv);
                linalg::scale(1.0 / s, &mut apv);
                basis.push((pv, apv));
            }
        }
        let k = basis.len();
        let mut ga = Matrix3::<f64>::identity();
        let mut gb = Matrix3::<f64>::identity();
        for a in 0..k {
            for b in a..k {
                let va = linalg::dot(&basis[a].0, &basis[b].1);
                let vb = linalg::dot3(&vol, &basis[a].0, &basis[b].0);
                ga[(a, b)] = va;
                ga[(b, a)] = va;
                gb[(a, b)] = vb;
                gb[(b, a)] = vb;
            }
        }
        let ga = ga.view((0, 0), (k, k)).into_owned();
        let gb = gb.view((0, 0), (k, k)).into_owned();
        let Some(chol) = gb.clone().cholesky() else {
            p = None;
            continue;
        };
        let linv = chol
            .l()
            .try_inverse()
            .expect("triangular with positive diagonal");
        let c = &linv * &ga * linv.transpose();
        let c = (c.clone() + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c);
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let y = linv.transpose() * eig.eigenvectors.column(imin);
        let mut xn = vec![0.0; n];
        let mut axn = vec![0.0; n];
        let mut pn = vec![0.0; n];
        let mut apn = vec![0.0; n];
        for (j, (bv, abv)) in basis.iter().enumerate() {
            linalg::axpy(y[j], bv, &mut xn);
            linalg::axpy(y[j], abv, &mut axn);
            if j > 0 {
                linalg::axpy(y[j], bv, &mut pn);
                linalg::axpy(y[j], abv, &mut apn);
            }
        }
        x = xn;
        ax = axn;
        let s = vnormalize(&mut x);
        linalg::scale(1.0 / s, &mut ax);
        if iterations % 25 == 0 {
            ax = op.apply(&x);
        }
        lambda = linalg::dot(&x, &ax);
        p = Some((pn, apn));
    }

    // Shifted inverse iteration.
    let target = tol * lambda.abs().max(1.0);
    // A gap of a percent of |λ| keeps the shifted solves well conditioned
    // while still damping the rest of the spectrum by (λ₁ − σ)/(λ₂ − σ).
    let mut sigma_gap = (4.0 * residual).max(1e-2 * lambda.abs());
    let mut polish = 0;
    while residual > target && polish < 60 {
        polish += 1;
        let sigma = lambda - sigma_gap;
        let shifted = op.with_shifted_potential(&ScalarField::constant(op.grid(), 1.0), -sigma)?;
        let mut b: Vec<f64> = x.iter().zip(&vol).map(|(a, v)| a * v).collect();
        mask_pinned(op, &mut b);
        let opts = SolveOptions {
            tol: 1e-3 * tol,
            max_iter: 50_000,
        };
        match pcg(&shifted, &b, Some(&x), &opts, |_, _| {}) {
            Ok((mut y, _, _)) => {
                mask_pinned(op, &mut y);
                vnormalize(&mut y);
                x = y;
                ax = op.apply(&x);
                lambda = linalg::dot(&x, &ax);
                let mut r: Vec<f64> = (0..n).map(|i| ax[i] - lambda * vol[i] * x[i]).collect();
                mask_pinned(op, &mut r);
                residual = v_norm_residual(&r, &vol);
            }
            // σ landed above the bottom of the spectrum: back off.
            Err(MassError::NotPositive(_)) => sigma_gap *= 10.0,
            Err(e) => return Err(e),
        }
    }
    iterations += polish;
    if residual > target {
        return Err(MassError::NotConverged {
            residual,
            iterations,
        });
    }
    let pi = op.grid().marked_index();
    let sign = if x[pi] < 0.0 || (x[pi] == 0.0 && linalg::sum(&x) < 0.0) {
        -1.0
    } else {
        1.0
    };
    if sign < 0.0 {
        linalg::scale(-1.0, &mut x);
    }
    Ok(EigenPair {
        lambda,
        vector: ScalarField::from_values(op.grid(), x)?,
        residual,
        iterations,
    })
}

/// Interior-node mask of a Dirichlet domain, optionally with an analytic
/// spherical boundary around `p` used for cut-face corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletDomain {
    mask: Vec<bool>,
    description: String,
    sphere: Option<f64>,
}

impl DirichletDomain {
    pub fn from_mask(
        grid: &TorusGrid,
        mask: Vec<bool>,
        description: impl Into<String>,
    ) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(MassError::GridMismatch);
        }
        if !mask.iter().any(|&m| m) {
            return Err(MassError::EmptyDomain);
        }
        Ok(Self {
            mask,
            description: description.into(),
            sphere: None,
        })
    }

    pub fn whole(grid: &TorusGrid) -> Self {
        Self {
            mask: vec![true; grid.len()],
            description: "whole torus".into(),
            sphere: None,
        }
    }

    /// Open ball `B(p, radius)`. Faces crossing the sphere get the
    /// symmetric cut-face correction, which makes the ball mass second order.
    pub fn ball(grid: &TorusGrid, radius: f64) -> Result<Self> {
        let mut d = Self::staircase_ball(grid, radius)?;
        d.sphere = Some(radius);
        d.description = format!("ball of radius {radius} about p");
        Ok(d)
    }

    /// Nodes with `r < radius`, boundary treated face by face.
    pub fn staircase_ball(grid: &TorusGrid, radius: f64) -> Result<Self> {
        if 2.0 * radius > grid.side() {
            return Err(MassError::GeometryError(format!(
                "ball of radius {radius} wraps around the torus"
            )));
        }
        let mask = (0..grid.len())
            .map(|i| grid.distance_to_marked(i) < radius)
            .collect();
        Self::from_mask(
            grid,
            mask,
            format!("staircase ball of radius {radius} about p"),
        )
    }

    /// Complement of the support of `field`: nodes where it is exactly zero.
    pub fn zero_set(field: &ScalarField) -> Result<Self> {
        let mask = field.values().iter().map(|&v| v == 0.0).collect();
        Self::from_mask(field.grid(), mask, "zero set of the coupling field")
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn sphere(&self) -> Option<f64> {
        self.sphere
    }

    pub fn interior_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `self ⊂ other` as node sets.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.mask.len() == other.mask.len()
            && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

/// Smallest accepted cut fraction; keeps the boundary term bounded when the
/// sphere passes through a node.
const MIN_CUT: f64 = 1e-3;

/// Pins the exterior of `domain` to zero (identity rows scaled by the
/// original diagonal). Symmetric, and still an M-matrix when `A` is one.
pub fn restrict_dirichlet(op: &OperatorSpec, domain: &DirichletDomain) -> Result<OperatorSpec> {
    let grid = op.grid().clone();
    if domain.mask.len() != grid.len() {
        return Err(MassError::GridMismatch);
    }
    let h = grid.spacing();
    let dim = grid.dim();
    let out = match domain.sphere {
        None => op.restricted(&domain.mask, |_, _, _, _| 1.0),
        Some(radius) => op.restricted(&domain.mask, |i, _j, axis, forward| {
            let mut d = [0.0; MAX_DIM];
            grid.displacement(i, &mut d[..dim]);
            let s = if forward { 1.0 } else { -1.0 };
            // |d + s·t·h·e_axis| = R, smallest root t in (0, 1]
            let r2: f64 = d[..dim].iter().map(|v| v * v).sum();
            let b = s * d[axis];
            let disc = b * b - (r2 - radius * radius);
            let t = (-b + disc.max(0.0).sqrt()) / h;
            t.clamp(MIN_CUT, 1.0)
        }),
    };
    Ok(out)
}
