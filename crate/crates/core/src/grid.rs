//! Metric layout of a BEV raster.
//!
//! Rows run from far (row 0) to near (last row); columns run left to right.
//! Cell `(row, col)` has its center at
//! `x = x_min + (col + 0.5) * resolution`, `z = z_max - (row + 0.5) * resolution`.
//! Continuous raster coordinates put cell centers on integers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EXTENT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub cells_x: usize,
    pub cells_z: usize,
    pub resolution: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl BevGridSpec {
    /// Builds a grid from its raster size, resolution and lower-left corner.
    pub fn new(cells_x: usize, cells_z: usize, resolution: f64, x_min: f64, z_min: f64) -> Result<Self> {
        let g = Self {
            cells_x,
            cells_z,
            resolution,
            x_min,
            x_max: x_min + cells_x as f64 * resolution,
            z_min,
            z_max: z_min + cells_z as f64 * resolution,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid with the camera at the bottom-center of the raster.
    pub fn camera_bottom_center(cells_x: usize, cells_z: usize, resolution: f64) -> Result<Self> {
        Self::new(cells_x, cells_z, resolution, -(cells_x as f64) * resolution / 2.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::InvalidGrid(format!("resolution {} must be > 0", self.resolution)));
        }
        if self.cells_x == 0 || self.cells_z == 0 {
            return Err(Error::InvalidGrid("empty raster".into()));
        }
        for v in [self.x_min, self.x_max, self.z_min, self.z_max] {
            if !v.is_finite() {
                return Err(Error::InvalidGrid("non-finite extent".into()));
            }
        }
        let nx = (self.x_max - self.x_min) / self.resolution;
        let nz = (self.z_max - self.z_min) / self.resolution;
        if (nx - self.cells_x as f64).abs() > EXTENT_TOL * nx.max(1.0)
            || (nz - self.cells_z as f64).abs() > EXTENT_TOL * nz.max(1.0)
        {
            return Err(Error::InvalidGrid(format!(
                "extents give {nx}x{nz} cells, declared {}x{}",
                self.cells_x, self.cells_z
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_z
    }

    /// Metric `(x, z)` of a cell center.
    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.z_max - (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous raster coordinates `(col, row)` of a metric position.
    #[inline]
    pub fn to_raster(&self, x: f64, z: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.resolution - 0.5,
            (self.z_max - z) / self.resolution - 0.5,
        )
    }

    /// Metric position of continuous raster coordinates.
    #[inline]
    pub fn to_metric(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.x_min + (col + 0.5) * self.resolution,
            self.z_max - (row + 0.5) * self.resolution,
        )
    }

    /// Cell `(row, col)` containing a metric position, if inside the grid.
    #[inline]
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.resolution).floor();
        let r = ((self.z_max - z) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c >= self.cells_x as f64 || r >= self.cells_z as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Continuous raster position of the camera (metric origin).
    pub fn camera_raster(&self) -> (f64, f64) {
        self.to_raster(0.0, 0.0)
    }

    /// Offsets `(row0, col0)` of `inner` inside `self` when both share a resolution
    /// and `inner` lies on whole cells of `self`.
    pub fn offset_of(&self, inner: &BevGridSpec) -> Result<(usize, usize)> {
        let res_tol = 1e-9 * self.resolution;
        if (inner.resolution - self.resolution).abs() > res_tol {
            return Err(Error::CropOutOfBounds(format!(
                "crop resolution {} differs from grid resolution {}",
                inner.resolution, self.resolution
            )));
        }
        let col0 = (inner.x_min - self.x_min) / self.resolution;
        let row0 = (self.z_max - inner.z_max) / self.resolution;
        let (c0, r0) = (col0.round(), row0.round());
        if (col0 - c0).abs() > 1e-6 || (row0 - r0).abs() > 1e-6 {
            return Err(Error::CropOutOfBounds("crop is not aligned to grid cells".into()));
        }
        if c0 < 0.0
            || r0 < 0.0
            || c0 as usize + inner.cells_x > self.cells_x
            || r0 as usize + inner.cells_z > self.cells_z
        {
            return Err(Error::CropOutOfBounds(format!(
                "crop {}x{} at ({r0},{c0}) exceeds {}x{}",
                inner.cells_z, inner.cells_x, self.cells_z, self.cells_x
            )));
        }
        Ok((r0 as usize, c0 as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_and_cells_agree() {
        let g = BevGridSpec::camera_bottom_center(10, 8, 0.5).unwrap();
        assert_eq!(g.x_min, -2.5);
        assert_eq!(g.z_max, 4.0);
        for r in 0..8 {
            for c in 0..10 {
                let (x, z) = g.cell_center(r, c);
                assert_eq!(g.cell_of(x, z), Some((r, c)));
                let (cf, rf) = g.to_raster(x, z);
                assert!((cf - c as f64).abs() < 1e-12 && (rf - r as f64).abs() < 1e-12);
            }
        }
        assert_eq!(g.cell_of(0.0, -0.1), None);
    }

    #[test]
    fn rejects_inconsistent_extents() {
        let mut g = BevGridSpec::camera_bottom_center(10, 8, 0.5).unwrap();
        g.x_max += 1.0;
        assert!(matches!(g.validate(), Err(Error::InvalidGrid(_))));
        assert!(BevGridSpec::new(4, 4, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn crop_offsets() {
        let g = BevGridSpec::camera_bottom_center(10, 8, 0.5).unwrap();
        let inner = BevGridSpec::new(4, 4, 0.5, -1.0, 0.0).unwrap();
        assert_eq!(g.offset_of(&inner).unwrap(), (4, 3));
        let outside = BevGridSpec::new(4, 4, 0.5, 1.0, 0.0).unwrap();
        assert!(g.offset_of(&outside).is_err());
    }
}
