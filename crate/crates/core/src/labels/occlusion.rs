//! 2D ray casting over the height map from the camera position.
//!
//! Rays run from the camera point to each target cell center. A cell counts
//! as crossed when the ray passes through its interior; a ray through an
//! exact lattice corner steps diagonally and skips both side cells.

use super::HeightMap;
use crate::grid::BevGridSpec;
use crate::raster::Raster;

/// Cells crossed by the ray from the camera to the center of `(row, col)`,
/// in order, excluding the target. Indices may fall outside the grid when the
/// camera sits outside it.
pub fn ray_cells(grid: &BevGridSpec, row: usize, col: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    walk(grid, row, col, |r, c| out.push((r, c)));
    out
}

fn walk(grid: &BevGridSpec, row: usize, col: usize, mut visit: impl FnMut(i64, i64)) {
    // Edge coordinates: cell (r, c) spans u in [c, c+1], v in [r, r+1].
    let u0 = (0.0 - grid.x_min) / grid.resolution;
    let v0 = grid.z_max / grid.resolution;
    let (u1, v1) = (col as f64 + 0.5, row as f64 + 0.5);
    let (du, dv) = (u1 - u0, v1 - v0);

    let start = |p: f64, d: f64| -> i64 {
        let f = p.floor();
        if f == p && d < 0.0 {
            f as i64 - 1
        } else {
            f as i64
        }
    };
    let (mut c, mut r) = (start(u0, du), start(v0, dv));
    let (tc, tr) = (col as i64, row as i64);

    let axis = |p: f64, d: f64, cell: i64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, ((cell + 1) as f64 - p) / d, 1.0 / d)
        } else if d < 0.0 {
            (-1, (cell as f64 - p) / d, -1.0 / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_c, mut t_c, dt_c) = axis(u0, du, c);
    let (step_r, mut t_r, dt_r) = axis(v0, dv, r);

    let limit = (tc - c).abs() + (tr - r).abs() + 2;
    for _ in 0..limit {
        if c == tc && r == tr {
            return;
        }
        visit(r, c);
        if t_c < t_r {
            c += step_c;
            t_c += dt_c;
        } else if t_r < t_c {
            r += step_r;
            t_r += dt_r;
        } else {
            c += step_c;
            r += step_r;
            t_c += dt_c;
            t_r += dt_r;
        }
    }
}

/// Occluded iff the cell height is strictly below the running maximum along
/// its ray. Empty and out-of-grid cells are at ground level (0 m).
pub fn occlusion_mask(h: &HeightMap, grid: &BevGridSpec) -> Raster<bool> {
    occlusion_mask_with_margin(h, grid, 0.0)
}

/// As [`occlusion_mask`], but a cell is occluded only when it lies more than
/// `margin` meters below the running maximum.
pub fn occlusion_mask_with_margin(h: &HeightMap, grid: &BevGridSpec, margin: f64) -> Raster<bool> {
    let (w, ht) = (grid.cells_x, grid.cells_z);
    Raster::from_fn(w, ht, |row, col| {
        let mut run = f64::NEG_INFINITY;
        walk(grid, row, col, |r, c| {
            let v = if r >= 0 && c >= 0 && (r as usize) < ht && (c as usize) < w {
                h.ground_filled(r as usize, c as usize)
            } else {
                0.0
            };
            run = run.max(v);
        });
        h.ground_filled(row, col) < run - margin
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BevGridSpec {
        BevGridSpec::camera_bottom_center(20, 20, 0.5).unwrap()
    }

    #[test]
    fn flat_map_has_no_occlusion() {
        let g = grid();
        let mut h = HeightMap::empty(20, 20);
        for r in 0..20 {
            for c in 0..20 {
                h.raise(r, c, 0.3);
            }
        }
        assert_eq!(occlusion_mask(&h, &g).count_true(), 0);
    }

    #[test]
    fn wall_shadows_cells_behind() {
        let g = grid();
        let mut h = HeightMap::empty(20, 20);
        h.raise(14, 10, 2.0);
        let m = occlusion_mask(&h, &g);
        assert!(!m.get(14, 10));
        for r in 0..14 {
            // Rays to these targets pass through the wall cell iff it lies on
            // their path.
            let through = ray_cells(&g, r, 10).contains(&(14, 10));
            assert_eq!(*m.get(r, 10), through, "row {r}");
        }
        assert!(*m.get(0, 10));
        assert!(!m.get(15, 10));
    }

    #[test]
    fn ray_ends_next_to_target_and_starts_at_camera() {
        let g = grid();
        let cells = ray_cells(&g, 0, 3);
        let last = *cells.last().unwrap();
        assert!((last.0 - 0).abs() + (last.1 - 3).abs() <= 2);
        assert_eq!(cells[0].0, 19);
        assert!(cells[0].1 == 9 || cells[0].1 == 10);
        for pair in cells.windows(2) {
            let d = (pair[0].0 - pair[1].0).abs().max((pair[0].1 - pair[1].1).abs());
            assert_eq!(d, 1);
        }
    }

    #[test]
    fn target_never_occludes_itself() {
        let g = grid();
        let mut h = HeightMap::empty(20, 20);
        h.raise(19, 10, 5.0);
        assert!(!occlusion_mask(&h, &g).get(19, 10));
    }

    #[test]
    fn margin_tolerates_small_steps() {
        let g = grid();
        let mut h = HeightMap::empty(20, 20);
        h.raise(15, 10, 0.1);
        assert!(*occlusion_mask(&h, &g).get(5, 10));
        assert!(!occlusion_mask_with_margin(&h, &g, 0.2).get(5, 10));
    }
}
