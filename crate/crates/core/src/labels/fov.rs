use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::panoptic::{PanopticBevMap, VOID};
use crate::raster::Raster;

/// Voids pixels outside `mask` and crops the map from `grid` to `crop`.
pub fn apply_fov_crop(
    map: &PanopticBevMap,
    mask: &Raster<bool>,
    grid: &BevGridSpec,
    crop: &BevGridSpec,
) -> Result<PanopticBevMap> {
    if map.width() != grid.cells_x || map.height() != grid.cells_z || !map.class.same_shape(mask) {
        return Err(Error::ShapeMismatch("map, mask and grid must agree in size".into()));
    }
    let (row0, col0) = grid.offset_of(crop)?;
    let mut class = map.class.clone();
    let mut instance = map.instance.clone();
    for ((c, i), &inside) in class
        .as_mut_slice()
        .iter_mut()
        .zip(instance.as_mut_slice())
        .zip(mask.iter())
    {
        if !inside {
            *c = VOID;
            *i = 0;
        }
    }
    let class = class.crop(row0, col0, crop.cells_x, crop.cells_z)?;
    let instance = instance.crop(row0, col0, crop.cells_x, crop.cells_z)?;
    let mut out = PanopticBevMap::from_parts(class, instance, map.categories.clone())?;
    out.grid = Some(*crop);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    Vertical,
    Flat,
}

/// Splits a frontal-view class raster into `(vertical, flat)` masks. Void
/// pixels belong to neither.
pub fn fv_vertical_flat_masks(
    fv_labels: &Raster<u16>,
    grouping: &BTreeMap<u16, SurfaceKind>,
) -> Result<(Raster<bool>, Raster<bool>)> {
    let (w, h) = (fv_labels.width(), fv_labels.height());
    let mut vertical = Raster::filled(w, h, false);
    let mut flat = Raster::filled(w, h, false);
    for (i, &class) in fv_labels.iter().enumerate() {
        if class == VOID {
            continue;
        }
        match grouping.get(&class) {
            Some(SurfaceKind::Vertical) => vertical.as_mut_slice()[i] = true,
            Some(SurfaceKind::Flat) => flat.as_mut_slice()[i] = true,
            None => return Err(Error::UnmappedClass(class)),
        }
    }
    Ok((vertical, flat))
}
