use std::sync::Arc;

use super::{
    accumulate_static, apply_fov_crop, box_footprint_cells, densify, fuse_instances, occlusion_mask_with_margin,
    project_orthographic, Box3D, EgoPose, HeightMap, InstanceFusionParams, LabeledPointCloud, MorphKernelTable,
};
use crate::camera::{fov_mask, CameraRig};
use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::panoptic::{CategoryTable, PanopticBevMap};
use crate::raster::Raster;

/// Everything recorded around one target frame.
#[derive(Clone, Debug, Default)]
pub struct FrameInputs {
    pub clouds: Vec<LabeledPointCloud>,
    pub poses: Vec<EgoPose>,
    /// Boxes of all frames; only those of the target frame are drawn.
    pub boxes: Vec<Box3D>,
    pub target_frame: u32,
}

#[derive(Clone, Debug)]
pub struct LabelGenParams {
    pub rig: CameraRig,
    /// Working grid for projection and ray casting.
    pub grid: BevGridSpec,
    /// Output window inside `grid`; `None` keeps the whole grid.
    pub crop: Option<BevGridSpec>,
    pub kernels: MorphKernelTable,
    /// Frames farther than this from the target are ignored.
    pub window: Option<u32>,
    pub occlusion: bool,
    pub height_margin: f64,
    pub fusion: InstanceFusionParams,
    pub categories: Arc<CategoryTable>,
}

#[derive(Clone, Debug)]
pub struct LabelOutput {
    /// Final cropped map.
    pub map: PanopticBevMap,
    /// Heights over the working grid.
    pub heights: HeightMap,
    /// Occluded cells over the working grid.
    pub occluded: Raster<bool>,
    /// Field-of-view cells over the working grid.
    pub fov: Raster<bool>,
}

/// Runs accumulate, project, densify, fuse, occlude and mask for one frame.
pub fn generate_labels(inputs: &FrameInputs, params: &LabelGenParams) -> Result<LabelOutput> {
    params.grid.validate()?;
    params.kernels.validate()?;
    params.rig.intrinsics.validate()?;
    params.rig.extrinsics.validate()?;
    for cloud in &inputs.clouds {
        cloud.validate(&params.categories)?;
    }
    for pose in &inputs.poses {
        pose.validate()?;
    }
    let crop = params.crop.unwrap_or(params.grid);
    params.grid.offset_of(&crop)?;

    let grid = &params.grid;
    let extr = &params.rig.extrinsics;
    let accumulated = accumulate_static(&inputs.clouds, &inputs.poses, inputs.target_frame, params.window)?;
    let (stat, dynamic) = accumulated.split_dynamic();

    let (sparse, mut heights) = project_orthographic(&stat, extr, grid, &params.categories);
    let dense = densify(&sparse, &params.kernels)?;

    let (_, dyn_heights) = project_orthographic(&dynamic, extr, grid, &params.categories);
    heights.merge(&dyn_heights)?;
    let boxes: Vec<Box3D> = inputs
        .boxes
        .iter()
        .filter(|b| b.frame == inputs.target_frame)
        .copied()
        .collect();
    for b in &boxes {
        b.validate()?;
        let top = b.top_height(extr.camera_height);
        for (r, c) in box_footprint_cells(b, grid) {
            heights.raise(r, c, top);
        }
    }
    let mut fused = fuse_instances(&dense, &boxes, &dynamic, grid, &params.kernels, params.fusion)?;

    let occluded = if params.occlusion {
        occlusion_mask_with_margin(&heights, grid, params.height_margin)
    } else {
        Raster::filled(grid.cells_x, grid.cells_z, false)
    };
    let occ_id = params.categories.occlusion_id();
    for (i, &occ) in occluded.iter().enumerate() {
        if occ {
            fused.class.as_mut_slice()[i] = occ_id;
            fused.instance.as_mut_slice()[i] = 0;
        }
    }

    let fov = fov_mask(&params.rig.intrinsics, grid);
    let map = apply_fov_crop(&fused, &fov, grid, &crop)?;
    map.validate()
        .map_err(|e| Error::Invariant(format!("generated map is inconsistent: {e}")))?;
    Ok(LabelOutput {
        map,
        heights,
        occluded,
        fov,
    })
}
