//! Ground-truth generation from labeled LiDAR: accumulate, project,
//! densify and fuse, occlude, mask.

mod accumulate;
mod densify;
mod fov;
mod instances;
pub mod morphology;
mod occlusion;
mod pipeline;
mod project;

use std::collections::BTreeMap;

use nalgebra::{Matrix4, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{CategoryTable, ClassGroup};
use crate::raster::Raster;

pub use accumulate::accumulate_static;
pub use densify::{densify, densify_order};
pub use fov::{apply_fov_crop, fv_vertical_flat_masks, SurfaceKind};
pub use instances::{box_footprint_cells, fuse_instances, InstanceFusionParams};
pub use occlusion::{occlusion_mask, occlusion_mask_with_margin, ray_cells};
pub use pipeline::{generate_labels, FrameInputs, LabelGenParams, LabelOutput};
pub use project::project_orthographic;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    /// `x, y, z` in meters, sensor (reference) frame, y down.
    pub position: [f64; 3],
    pub class_id: u16,
    /// 0 for stuff.
    pub instance_id: u16,
    pub dynamic: bool,
    pub frame: u32,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledPointCloud {
    pub points: Vec<LabeledPoint>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<LabeledPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks finiteness and the thing/dynamic/instance invariants.
    pub fn validate(&self, categories: &CategoryTable) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("point {i} has non-finite coordinates")));
            }
            let cat = categories.get(p.class_id).ok_or(Error::UnknownClass(p.class_id))?;
            if cat.is_thing != p.dynamic {
                return Err(Error::InvalidInput(format!(
                    "point {i}: dynamic flag {} disagrees with class {}",
                    p.dynamic, cat.name
                )));
            }
            if !cat.is_thing && p.instance_id != 0 {
                return Err(Error::InvalidInput(format!(
                    "point {i}: stuff class {} with instance {}",
                    cat.name, p.instance_id
                )));
            }
        }
        Ok(())
    }

    /// Splits into `(static, dynamic)` points.
    pub fn split_dynamic(&self) -> (LabeledPointCloud, LabeledPointCloud) {
        let (d, s): (Vec<_>, Vec<_>) = self.points.iter().partition(|p| p.dynamic);
        (LabeledPointCloud::new(s), LabeledPointCloud::new(d))
    }
}

/// Sensor-to-world rigid transform of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoPose {
    pub frame: u32,
    pub matrix: Matrix4<f64>,
}

impl EgoPose {
    pub fn new(frame: u32, matrix: Matrix4<f64>) -> Result<Self> {
        let pose = Self { frame, matrix };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity(frame: u32) -> Self {
        Self {
            frame,
            matrix: Matrix4::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("pose {} is not finite", self.frame)));
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::InvalidInput(format!("pose {} bottom row is not (0,0,0,1)", self.frame)));
        }
        let r = m.fixed_view::<3, 3>(0, 0);
        let err = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "pose {} rotation is not orthonormal ({err:e})",
                self.frame
            )));
        }
        Ok(())
    }

    /// Closed-form inverse of the rigid transform.
    pub fn inverse_matrix(&self) -> Matrix4<f64> {
        let r = self.matrix.fixed_view::<3, 3>(0, 0).transpose();
        let t = self.matrix.fixed_view::<3, 1>(0, 3);
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(r * t)));
        inv
    }

    pub fn transform_point(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
        let q = m.transform_point(&Point3::new(p[0], p[1], p[2]));
        [q.x, q.y, q.z]
    }
}

/// Oriented 3D box; yaw rotates about the vertical (y) axis and yaw = 0 puts
/// the length along +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length, width, height.
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class_id: u16,
    pub instance_id: u16,
    pub frame: u32,
}

impl Box3D {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidInput(format!("box {} has non-positive dimensions", self.instance_id)));
        }
        if self.instance_id == 0 {
            return Err(Error::InvalidInput("box instance id must be > 0".into()));
        }
        if self.center.iter().any(|v| !v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::InvalidInput(format!("box {} is not finite", self.instance_id)));
        }
        Ok(())
    }

    /// Footprint corners `(x, z)` in counter-clockwise order.
    pub fn footprint_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        let along = (s, c);
        let across = (c, -s);
        let at = |a: f64, b: f64| {
            (
                self.center[0] + a * along.0 + b * across.0,
                self.center[2] + a * along.1 + b * across.1,
            )
        };
        [at(-hl, -hw), at(-hl, hw), at(hl, hw), at(hl, -hw)]
    }

    /// Height of the box top above the ground plane.
    pub fn top_height(&self, camera_height: f64) -> f64 {
        camera_height - (self.center[1] - self.dims[2] / 2.0)
    }
}

/// Maximum point height above ground per BEV cell; `None` for empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap {
    pub heights: Raster<Option<f64>>,
}

impl HeightMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            heights: Raster::filled(width, height, None),
        }
    }

    /// Height with empty cells at ground level.
    #[inline]
    pub fn ground_filled(&self, row: usize, col: usize) -> f64 {
        self.heights.get(row, col).unwrap_or(0.0)
    }

    pub fn raise(&mut self, row: usize, col: usize, h: f64) {
        let cell = self.heights.get_mut(row, col);
        *cell = Some(cell.map_or(h, |old| old.max(h)));
    }

    /// Cellwise maximum of two maps of equal size.
    pub fn merge(&mut self, other: &HeightMap) -> Result<()> {
        if !self.heights.same_shape(&other.heights) {
            return Err(Error::ShapeMismatch("height maps differ in size".into()));
        }
        for (a, b) in self.heights.as_mut_slice().iter_mut().zip(other.heights.iter()) {
            if let Some(h) = b {
                *a = Some(a.map_or(*h, |old| old.max(*h)));
            }
        }
        Ok(())
    }
}

/// Square structuring element sizes for one class group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSize {
    pub dilation: usize,
    pub erosion: usize,
}

/// Dilation / erosion sizes per class group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphKernelTable {
    pub kernels: BTreeMap<ClassGroup, KernelSize>,
}

impl MorphKernelTable {
    /// Sizes are given in the order St_T, St_S, Veg, Th_V, Th_P.
    pub fn from_lists(dilation: [usize; 5], erosion: [usize; 5]) -> Result<Self> {
        let kernels = ClassGroup::MORPHED
            .iter()
            .zip(dilation.iter().zip(erosion.iter()))
            .map(|(&g, (&d, &e))| {
                (
                    g,
                    KernelSize {
                        dilation: d,
                        erosion: e,
                    },
                )
            })
            .collect();
        let t = Self { kernels };
        t.validate()?;
        Ok(t)
    }

    /// Dilation 3/9/9/9/7, erosion 3/5/3/5/5.
    pub fn table_default() -> Self {
        Self::from_lists([3, 9, 9, 9, 7], [3, 5, 3, 5, 5]).expect("valid kernels")
    }

    pub fn validate(&self) -> Result<()> {
        for (g, k) in &self.kernels {
            for size in [k.dilation, k.erosion] {
                if size == 0 || size % 2 == 0 {
                    return Err(Error::InvalidInput(format!(
                        "kernel size {size} for {} must be odd and >= 1",
                        g.short_name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn for_group(&self, g: ClassGroup) -> Option<KernelSize> {
        self.kernels.get(&g).copied()
    }

    pub fn for_class(&self, categories: &CategoryTable, class: u16) -> Result<KernelSize> {
        categories
            .group(class)
            .and_then(|g| self.for_group(g))
            .ok_or(Error::MissingKernel(class))
    }

    pub fn dilation_list(&self) -> Vec<usize> {
        ClassGroup::MORPHED
            .iter()
            .map(|g| self.kernels.get(g).map_or(0, |k| k.dilation))
            .collect()
    }

    pub fn erosion_list(&self) -> Vec<usize> {
        ClassGroup::MORPHED
            .iter()
            .map(|g| self.kernels.get(g).map_or(0, |k| k.erosion))
            .collect()
    }
}
