//! Periodic lattice standing in for the flat torus, and scalar fields on it.
//!
//! Nodes are stored in row-major order with the last axis fastest. The
//! marked point `p` always sits exactly on a node.

use serde::{Deserialize, Serialize};

use crate::error::{MassError, Result};

pub const MIN_DIM: usize = 3;
/// Dimensions above five are excluded: an N = 32 grid in six dimensions
/// already needs ~1e9 nodes.
pub const MAX_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    side: f64,
    resolution: usize,
    marked: Vec<usize>,
}

impl TorusGrid {
    pub fn new(dim: usize, side: f64, resolution: usize, marked: &[usize]) -> Result<Self> {
        if !(MIN_DIM..=MAX_DIM).contains(&dim) {
            return Err(MassError::InvalidGrid(format!(
                "dimension {dim} outside {MIN_DIM}..={MAX_DIM}"
            )));
        }
        if !(side.is_finite() && side > 0.0) {
            return Err(MassError::InvalidGrid(format!(
                "side length {side} must be positive"
            )));
        }
        if resolution < 4 || !resolution.is_multiple_of(2) {
            return Err(MassError::InvalidGrid(format!(
                "resolution {resolution} must be even and at least 4"
            )));
        }
        if marked.len() != dim || marked.iter().any(|&i| i >= resolution) {
            return Err(MassError::InvalidGrid(format!(
                "marked node {marked:?} is not a lattice index of a {dim}-dimensional grid"
            )));
        }
        let total = resolution
            .checked_pow(dim as u32)
            .filter(|&t| t <= 1 << 28)
            .ok_or_else(|| {
                MassError::InvalidGrid(format!("{resolution}^{dim} nodes is too many"))
            })?;
        debug_assert!(total > 0);
        Ok(Self {
            dim,
            side,
            resolution,
            marked: marked.to_vec(),
        })
    }

    /// Grid whose marked node is the origin.
    pub fn centered(dim: usize, side: f64, resolution: usize) -> Result<Self> {
        Self::new(dim, side, resolution, &vec![0; dim])
    }

    /// Snaps fractional coordinates in `[0, 1)` to the nearest node.
    pub fn with_fractional_point(
        dim: usize,
        side: f64,
        resolution: usize,
        frac: &[f64],
    ) -> Result<Self> {
        if frac.len() != dim {
            return Err(MassError::InvalidGrid(format!(
                "point has {} coordinates, expected {dim}",
                frac.len()
            )));
        }
        let marked: Vec<usize> = frac
            .iter()
            .map(|&x| {
                let k = (x.rem_euclid(1.0) * resolution as f64).round() as usize;
                k % resolution
            })
            .collect();
        Self::new(dim, side, resolution, &marked)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.resolution as f64
    }

    pub fn marked(&self) -> &[usize] {
        &self.marked
    }

    pub fn marked_index(&self) -> usize {
        self.linear(&self.marked)
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear offset between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.resolution.pow((self.dim - 1 - axis) as u32)
    }

    pub fn linear(&self, idx: &[usize]) -> usize {
        idx.iter()
            .fold(0, |acc, &i| acc * self.resolution + i % self.resolution)
    }

    pub fn unravel(&self, mut linear: usize, out: &mut [usize]) {
        for k in (0..self.dim).rev() {
            out[k] = linear % self.resolution;
            linear /= self.resolution;
        }
    }

    pub fn coord(&self, linear: usize, axis: usize) -> usize {
        (linear / self.stride(axis)) % self.resolution
    }

    /// Neighbour of `linear` one step along `axis`, forwards or backwards, with wrap-around.
    pub fn neighbor(&self, linear: usize, axis: usize, forward: bool) -> usize {
        let stride = self.stride(axis);
        let c = self.coord(linear, axis);
        if forward {
            if c + 1 == self.resolution {
                linear + stride - self.resolution * stride
            } else {
                linear + stride
            }
        } else if c == 0 {
            linear + (self.resolution - 1) * stride
        } else {
            linear - stride
        }
    }

    /// Minimal-image displacement from `origin` (physical units) to node `linear`.
    pub fn displacement_from(&self, origin: &[f64], linear: usize, out: &mut [f64]) {
        let h = self.spacing();
        let l = self.side;
        for (axis, o) in out.iter_mut().enumerate().take(self.dim) {
            let x = self.coord(linear, axis) as f64 * h;
            let mut d = (x - origin[axis]).rem_euclid(l);
            if d > 0.5 * l {
                d -= l;
            }
            *o = d;
        }
    }

    /// Minimal-image displacement from the marked node, computed on lattice
    /// indices so it is exact.
    pub fn displacement(&self, linear: usize, out: &mut [f64]) {
        let h = self.spacing();
        let n = self.resolution as isize;
        for (axis, o) in out.iter_mut().enumerate().take(self.dim) {
            let mut d = self.coord(linear, axis) as isize - self.marked[axis] as isize;
            d = d.rem_euclid(n);
            if d > n / 2 {
                d -= n;
            }
            *o = d as f64 * h;
        }
    }

    /// Torus distance from the marked node.
    pub fn distance_to_marked(&self, linear: usize) -> f64 {
        let mut d = [0.0; MAX_DIM];
        self.displacement(linear, &mut d[..self.dim]);
        d[..self.dim].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Physical coordinates of the marked node.
    pub fn marked_position(&self) -> Vec<f64> {
        self.marked
            .iter()
            .map(|&i| i as f64 * self.spacing())
            .collect()
    }

    /// Same lattice and marked node on a torus `factor` times larger.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.dim, self.side * factor, self.resolution, &self.marked)
    }

    /// Same torus and marked point at another resolution; the point must be
    /// exactly a node of the new lattice.
    pub fn with_resolution(&self, resolution: usize) -> Result<Self> {
        let frac: Vec<f64> = self
            .marked
            .iter()
            .map(|&i| i as f64 / self.resolution as f64)
            .collect();
        let g = Self::with_fractional_point(self.dim, self.side, resolution, &frac)?;
        let h = g.spacing();
        let moved = g
            .marked_position()
            .iter()
            .zip(self.marked_position())
            .any(|(a, b)| (a - b).abs() > 1e-9 * h);
        if moved {
            return Err(MassError::InvalidGrid(format!(
                "marked point is not a node at resolution {resolution}"
            )));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &TorusGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: &TorusGrid, c: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![c; grid.len()],
        }
    }

    pub fn from_values(grid: &TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(MassError::GridMismatch);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MassError::NonFinite(i));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Like [`from_values`](Self::from_values) but allows non-finite
    /// sentinels.
    pub(crate) fn from_raw(grid: &TorusGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn from_fn(grid: &TorusGrid, f: impl FnMut(usize) -> f64) -> Self {
        let values = (0..grid.len()).map(f).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, linear: usize) -> f64 {
        self.values[linear]
    }

    pub fn at_marked(&self) -> f64 {
        self.values[self.grid.marked_index()]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(MassError::GridMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            values,
        })
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.grid == other.grid
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_neighbours_wrap() {
        let g = TorusGrid::centered(3, 1.0, 8).unwrap();
        let i = g.linear(&[7, 0, 3]);
        let j = g.neighbor(i, 0, true);
        let mut c = [0; 3];
        g.unravel(j, &mut c);
        assert_eq!(c, [0, 0, 3]);
        assert_eq!(g.neighbor(j, 0, false), i);
        let k = g.neighbor(g.linear(&[2, 0, 3]), 1, false);
        g.unravel(k, &mut c);
        assert_eq!(c, [2, 7, 3]);
        assert_eq!(g.linear(&[9, 1, 2]), g.linear(&[1, 1, 2]));
    }

    #[test]
    fn distance_uses_minimal_image() {
        let g = TorusGrid::new(3, 2.0, 16, &[1, 1, 1]).unwrap();
        let far = g.linear(&[15, 1, 1]);
        assert!((g.distance_to_marked(far) - 2.0 * 2.0 / 16.0).abs() < 1e-15);
        let opposite = g.linear(&[9, 1, 1]);
        assert!((g.distance_to_marked(opposite) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TorusGrid::centered(2, 1.0, 16).is_err());
        assert!(TorusGrid::centered(6, 1.0, 16).is_err());
        assert!(TorusGrid::centered(3, 1.0, 15).is_err());
        assert!(TorusGrid::centered(3, -1.0, 16).is_err());
        assert!(TorusGrid::new(3, 1.0, 16, &[0, 16, 0]).is_err());
    }

    #[test]
    fn fractional_point_snaps_within_half_spacing() {
        let g = TorusGrid::with_fractional_point(3, 1.0, 32, &[0.51, 0.0, 0.99]).unwrap();
        let h = g.spacing();
        let pos = g.marked_position();
        for (x, want) in pos.iter().zip([0.51, 0.0, 0.99]) {
            let mut d = (x - want).rem_euclid(1.0);
            if d > 0.5 {
                d -= 1.0;
            }
            assert!(d.abs() <= 0.5 * h + 1e-15);
        }
    }

    #[test]
    fn refinement_keeps_marked_point() {
        let g = TorusGrid::new(3, 1.0, 32, &[16, 8, 0]).unwrap();
        let f = g.with_resolution(64).unwrap();
        assert_eq!(f.marked(), &[32, 16, 0]);
        assert!(g.with_resolution(48).is_ok());
        let odd = TorusGrid::new(3, 1.0, 32, &[1, 0, 0]).unwrap();
        assert!(odd.with_resolution(48).is_err());
    }
}
