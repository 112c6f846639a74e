use std::collections::BTreeMap;

use super::morphology::{close, dilate};
use super::{Box3D, LabeledPointCloud, MorphKernelTable};
use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::panoptic::PanopticBevMap;
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceFusionParams {
    /// Densified dynamic blobs reaching within this Chebyshev distance (cells)
    /// of a same-class box footprint belong to that box and are not drawn.
    pub box_margin_cells: usize,
}

impl Default for InstanceFusionParams {
    fn default() -> Self {
        Self { box_margin_cells: 3 }
    }
}

/// Cells whose centers fall inside the box footprint (boundary inclusive).
pub fn box_footprint_cells(b: &Box3D, grid: &BevGridSpec) -> Vec<(usize, usize)> {
    let corners = b.footprint_corners();
    let (mut x0, mut x1, mut z0, mut z1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, z) in corners {
        x0 = x0.min(x);
        x1 = x1.max(x);
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    let res = grid.resolution;
    let col_lo = (((x0 - grid.x_min) / res).floor() - 1.0).max(0.0) as usize;
    let col_hi = (((x1 - grid.x_min) / res).ceil() + 1.0).min(grid.cells_x as f64).max(0.0) as usize;
    let row_lo = (((grid.z_max - z1) / res).floor() - 1.0).max(0.0) as usize;
    let row_hi = (((grid.z_max - z0) / res).ceil() + 1.0).min(grid.cells_z as f64).max(0.0) as usize;

    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.dims[0] / 2.0, b.dims[1] / 2.0);
    let mut cells = Vec::new();
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            let (x, z) = grid.cell_center(row, col);
            let dx = x - b.center[0];
            let dz = z - b.center[2];
            let along = dx * s + dz * c;
            let across = dx * c - dz * s;
            if along.abs() <= hl && across.abs() <= hw {
                cells.push((row, col));
            }
        }
    }
    cells
}

/// Writes box footprints and densified dynamic points as thing instances.
///
/// Boxes are drawn nearest-to-camera first and never overwrite each other;
/// each box that covers at least one cell gets the next instance index.
/// Dynamic points are projected and closed per thing class; pixels near a
/// same-class footprint are absorbed by it, and the remaining 4-connected
/// components become instances, numbered after the boxes in raster
/// order.
pub fn fuse_instances(
    map: &PanopticBevMap,
    boxes: &[Box3D],
    dynamic: &LabeledPointCloud,
    grid: &BevGridSpec,
    kernels: &MorphKernelTable,
    params: InstanceFusionParams,
) -> Result<PanopticBevMap> {
    if map.width() != grid.cells_x || map.height() != grid.cells_z {
        return Err(Error::ShapeMismatch("map does not match grid".into()));
    }
    let categories = map.categories.clone();
    let mut out = map.clone();

    let mut order: Vec<&Box3D> = boxes.iter().collect();
    for b in &order {
        b.validate()?;
        if !categories.is_thing(b.class_id) {
            return Err(Error::InvalidInput(format!(
                "box {} has non-thing class {}",
                b.instance_id, b.class_id
            )));
        }
    }
    order.sort_by(|a, b| {
        let da = a.center[0].powi(2) + a.center[2].powi(2);
        let db = b.center[0].powi(2) + b.center[2].powi(2);
        da.total_cmp(&db).then(a.instance_id.cmp(&b.instance_id))
    });

    let mut claimed: Raster<Option<u16>> = Raster::filled(grid.cells_x, grid.cells_z, None);
    let mut next_index: u32 = 1;
    for b in order {
        let cells: Vec<_> = box_footprint_cells(b, grid)
            .into_iter()
            .filter(|&(r, c)| claimed.get(r, c).is_none())
            .collect();
        if cells.is_empty() {
            continue;
        }
        let idx = to_index(next_index)?;
        next_index += 1;
        for (r, c) in cells {
            claimed.set(r, c, Some(b.class_id));
            out.set(r, c, b.class_id, idx);
        }
    }

    // Dynamic masks per thing class.
    let mut sparse: BTreeMap<u16, Raster<bool>> = BTreeMap::new();
    for p in &dynamic.points {
        if !categories.is_thing(p.class_id) {
            continue;
        }
        if let Some((r, c)) = grid.cell_of(p.position[0], p.position[2]) {
            sparse
                .entry(p.class_id)
                .or_insert_with(|| Raster::filled(grid.cells_x, grid.cells_z, false))
                .set(r, c, true);
        }
    }
    let mut free: Raster<u16> = Raster::filled(grid.cells_x, grid.cells_z, 0);
    let mut near_box: BTreeMap<u16, Raster<bool>> = BTreeMap::new();
    let margin = 2 * params.box_margin_cells + 1;
    for (&class, mask) in &sparse {
        let k = kernels.for_class(&categories, class)?;
        let closed = close(mask, k.dilation, k.erosion);
        near_box.insert(class, dilate(&claimed.map(|c| *c == Some(class)), margin));
        for (i, &on) in closed.iter().enumerate() {
            if on && claimed.as_slice()[i].is_none() && free.as_slice()[i] == 0 {
                free.as_mut_slice()[i] = class;
            }
        }
    }

    // Connected components of unclaimed dynamic pixels; a component touching
    // the margin around a same-class box belongs to that box.
    let (w, h) = (grid.cells_x, grid.cells_z);
    let mut seen = Raster::filled(w, h, false);
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        let class = free.as_slice()[start];
        if class == 0 || seen.as_slice()[start] {
            continue;
        }
        seen.as_mut_slice()[start] = true;
        stack.push(start);
        component.clear();
        while let Some(i) = stack.pop() {
            component.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if free.as_slice()[j] == class && !seen.as_slice()[j] {
                    seen.as_mut_slice()[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        let near = &near_box[&class];
        if component.iter().any(|&i| near.as_slice()[i]) {
            continue;
        }
        let idx = to_index(next_index)?;
        next_index += 1;
        for &i in &component {
            out.set(i / w, i % w, class, idx);
        }
    }
    Ok(out)
}

fn to_index(n: u32) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::InvalidInput("more than 65535 instances in one frame".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabeledPoint;
    use crate::panoptic::CategoryTable;
    use std::sync::Arc;

    fn car(x: f64, z: f64, yaw: f64, id: u16) -> Box3D {
        Box3D {
            center: [x, 0.8, z],
            dims: [4.0, 2.0, 1.5],
            yaw,
            class_id: 12,
            instance_id: id,
            frame: 0,
        }
    }

    fn grid() -> BevGridSpec {
        BevGridSpec::camera_bottom_center(200, 200, 0.1).unwrap()
    }

    fn empty_map(g: &BevGridSpec) -> PanopticBevMap {
        PanopticBevMap::for_grid(g, Arc::new(CategoryTable::bev_default()))
    }

    #[test]
    fn axis_aligned_footprint_size() {
        let g = grid();
        let cells = box_footprint_cells(&car(0.03, 10.03, 0.0, 1), &g);
        let rows: std::collections::BTreeSet<_> = cells.iter().map(|c| c.0).collect();
        let cols: std::collections::BTreeSet<_> = cells.iter().map(|c| c.1).collect();
        assert!((39..=41).contains(&rows.len()), "{}", rows.len());
        assert!((19..=21).contains(&cols.len()), "{}", cols.len());
        assert_eq!(cells.len(), rows.len() * cols.len());
    }

    #[test]
    fn quarter_turn_swaps_footprint() {
        let g = grid();
        let cells = box_footprint_cells(&car(0.03, 10.03, std::f64::consts::FRAC_PI_2, 1), &g);
        let rows: std::collections::BTreeSet<_> = cells.iter().map(|c| c.0).collect();
        let cols: std::collections::BTreeSet<_> = cells.iter().map(|c| c.1).collect();
        assert!((19..=21).contains(&rows.len()));
        assert!((39..=41).contains(&cols.len()));
    }

    #[test]
    fn nearer_box_wins_overlap() {
        let g = grid();
        let boxes = [car(0.0, 12.0, 0.0, 7), car(0.0, 10.0, 0.0, 9)];
        let out = fuse_instances(
            &empty_map(&g),
            &boxes,
            &LabeledPointCloud::default(),
            &g,
            &MorphKernelTable::table_default(),
            InstanceFusionParams::default(),
        )
        .unwrap();
        let (r, c) = g.cell_of(0.05, 11.05).unwrap();
        // Box 9 is nearer, drawn first with index 1.
        assert_eq!(out.get(r, c), (12, 1));
        assert_eq!(out.instance_count(), 2);
    }

    #[test]
    fn stray_dynamic_points_become_components() {
        let g = grid();
        let pts = |x0: f64, z0: f64| {
            (0..5).flat_map(move |i| {
                (0..5).map(move |j| LabeledPoint {
                    position: [x0 + 0.1 * i as f64, 1.0, z0 + 0.1 * j as f64],
                    class_id: 15,
                    instance_id: 3,
                    dynamic: true,
                    frame: 0,
                })
            })
        };
        let mut points: Vec<_> = pts(-5.0, 5.0).collect();
        points.extend(pts(5.0, 15.0));
        // Points hugging a box edge are absorbed by the box.
        points.push(LabeledPoint {
            position: [1.12, 1.0, 10.0],
            class_id: 12,
            instance_id: 1,
            dynamic: true,
            frame: 0,
        });
        let out = fuse_instances(
            &empty_map(&g),
            &[car(0.0, 10.0, 0.0, 1)],
            &LabeledPointCloud::new(points),
            &g,
            &MorphKernelTable::table_default(),
            InstanceFusionParams::default(),
        )
        .unwrap();
        assert_eq!(out.instance_count(), 3);
        let (r, c) = g.cell_of(-4.8, 5.2).unwrap();
        assert_eq!(out.get(r, c).0, 15);
        let (r, c) = g.cell_of(1.12, 10.0).unwrap();
        assert_eq!(out.get(r, c), (0, 0));
    }
}
