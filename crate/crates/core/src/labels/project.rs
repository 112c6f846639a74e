use std::sync::Arc;

use super::{HeightMap, LabeledPointCloud};
use crate::camera::CameraExtrinsics;
use crate::grid::BevGridSpec;
use crate::panoptic::{CategoryTable, ClassGroup, PanopticBevMap};
use crate::raster::Raster;

/// Orthographic projection of a reference-frame cloud onto the BEV grid.
///
/// Each cell takes the label of its highest non-vegetation point; vegetation
/// only labels cells that receive no other point. The height map records the
/// maximum height above ground of all points, vegetation included. Points
/// outside the grid are dropped.
pub fn project_orthographic(
    cloud: &LabeledPointCloud,
    extr: &CameraExtrinsics,
    grid: &BevGridSpec,
    categories: &Arc<CategoryTable>,
) -> (PanopticBevMap, HeightMap) {
    let mut heights = HeightMap::empty(grid.cells_x, grid.cells_z);
    // Current winner per cell: (is_vegetation, height, class, instance).
    let mut best: Raster<Option<(bool, f64, u16, u16)>> = Raster::filled(grid.cells_x, grid.cells_z, None);
    for p in &cloud.points {
        let [x, y, z] = p.position;
        let Some((r, c)) = grid.cell_of(x, z) else { continue };
        let h = extr.camera_height - y;
        heights.raise(r, c, h);
        let veg = categories.group(p.class_id) == Some(ClassGroup::Vegetation);
        let inst = if categories.is_thing(p.class_id) { p.instance_id } else { 0 };
        let cand = (veg, h, p.class_id, inst);
        let slot = best.get_mut(r, c);
        let replace = match slot {
            None => true,
            Some(cur) => beats(&cand, cur),
        };
        if replace {
            *slot = Some(cand);
        }
    }
    let mut map = PanopticBevMap::for_grid(grid, categories.clone());
    for (i, cell) in best.iter().enumerate() {
        if let Some((_, _, class, inst)) = *cell {
            map.class.as_mut_slice()[i] = class;
            map.instance.as_mut_slice()[i] = inst;
        }
    }
    (map, heights)
}

#[inline]
fn beats(a: &(bool, f64, u16, u16), b: &(bool, f64, u16, u16)) -> bool {
    if a.0 != b.0 {
        return !a.0;
    }
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    (a.2, a.3) < (b.2, b.3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabeledPoint;
    use crate::panoptic::VOID;

    fn point(x: f64, height: f64, z: f64, class: u16) -> LabeledPoint {
        LabeledPoint {
            position: [x, 1.5 - height, z],
            class_id: class,
            instance_id: 0,
            dynamic: false,
            frame: 0,
        }
    }

    fn setup() -> (CameraExtrinsics, BevGridSpec, Arc<CategoryTable>) {
        (
            CameraExtrinsics::level(1.5).unwrap(),
            BevGridSpec::camera_bottom_center(10, 10, 1.0).unwrap(),
            Arc::new(CategoryTable::bev_default()),
        )
    }

    #[test]
    fn single_point_labels_one_cell() {
        let (e, g, t) = setup();
        let cloud = LabeledPointCloud::new(vec![point(0.2, 0.0, 5.3, 1)]);
        let (m, h) = project_orthographic(&cloud, &e, &g, &t);
        assert_eq!(m.labeled_count(), 1);
        let (r, c) = g.cell_of(0.2, 5.3).unwrap();
        assert_eq!(m.get(r, c), (1, 0));
        assert_eq!(*h.heights.get(r, c), Some(0.0));
    }

    #[test]
    fn highest_point_wins() {
        let (e, g, t) = setup();
        let cloud = LabeledPointCloud::new(vec![point(0.5, 0.1, 5.5, 1), point(0.5, 2.0, 5.5, 6)]);
        let (m, h) = project_orthographic(&cloud, &e, &g, &t);
        let (r, c) = g.cell_of(0.5, 5.5).unwrap();
        assert_eq!(m.get(r, c).0, 6);
        assert!((h.heights.get(r, c).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn vegetation_yields_to_ground() {
        let (e, g, t) = setup();
        let cloud = LabeledPointCloud::new(vec![
            point(0.5, 0.0, 5.5, 1),
            point(0.5, 4.0, 5.5, 10),
            point(2.5, 4.0, 5.5, 10),
        ]);
        let (m, h) = project_orthographic(&cloud, &e, &g, &t);
        let (r, c) = g.cell_of(0.5, 5.5).unwrap();
        assert_eq!(m.get(r, c).0, 1);
        assert_eq!(*h.heights.get(r, c), Some(4.0));
        let (r, c) = g.cell_of(2.5, 5.5).unwrap();
        assert_eq!(m.get(r, c).0, 10);
        assert_eq!(m.get(0, 0).0, VOID);
    }
}
