//! Pinhole projection, inverse perspective mapping and BEV/FV resampling.
//!
//! Frames: the camera frame is x-right, y-down, z-forward. The reference
//! (vehicle) frame shares those axes and is anchored at the camera mount, so
//! the ground plane is `y = camera_height`. Extrinsics map reference-frame
//! points into the camera frame: `p_cam = R * p_ref + t`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::raster::{ChannelRaster, Raster};

const ORTHONORMAL_TOL: f64 = 1e-9;
const DET_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    /// Reference frame to camera frame.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Height of the camera mount above the ground plane, in meters.
    pub camera_height: f64,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, camera_height: f64) -> Result<Self> {
        let e = Self {
            rotation,
            translation,
            camera_height,
        };
        e.validate()?;
        Ok(e)
    }

    /// Level camera at the reference origin.
    pub fn level(camera_height: f64) -> Result<Self> {
        Self::new(Matrix3::identity(), Vector3::zeros(), camera_height)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidCamera(format!("rotation is not orthonormal (|R^T R - I| = {err:e})")));
        }
        if !(self.camera_height > 0.0) || !self.camera_height.is_finite() {
            return Err(Error::InvalidCamera(format!(
                "camera_height must be positive, got {}",
                self.camera_height
            )));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Point3D) -> Point3D {
        let v = self.rotation * Vector3::new(p.x, p.y, p.z) + self.translation;
        Point3D::new(v.x, v.y, v.z)
    }

    /// Camera center expressed in the reference frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Camera intrinsics and extrinsics, as loaded from a rig document.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

#[derive(Serialize, Deserialize)]
struct RigDocument {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
    camera_height: f64,
}

impl CameraRig {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RigDocument =
            serde_json::from_str(text).map_err(|e| Error::parse("camera rig", e))?;
        let intrinsics = CameraIntrinsics::new(doc.fx, doc.fy, doc.cx, doc.cy, doc.width, doc.height)?;
        let extrinsics = CameraExtrinsics::new(
            Matrix3::from_row_slice(&doc.rotation),
            Vector3::from_row_slice(&doc.translation),
            doc.camera_height,
        )?;
        Ok(Self {
            intrinsics,
            extrinsics,
        })
    }

    pub fn to_json(&self) -> String {
        let k = &self.intrinsics;
        let e = &self.extrinsics;
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = e.rotation[(r, c)];
            }
        }
        let doc = RigDocument {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation,
            translation: [e.translation.x, e.translation.y, e.translation.z],
            camera_height: e.camera_height,
        };
        serde_json::to_string_pretty(&doc).expect("rig serializes")
    }

    /// KITTI-360 front perspective camera (rectified image_00), level mount.
    pub fn kitti360() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 552.554261,
                fy: 552.554261,
                cx: 682.049453,
                cy: 238.769549,
                width: 1408,
                height: 376,
            },
            extrinsics: CameraExtrinsics {
                rotation: Matrix3::identity(),
                translation: Vector3::zeros(),
                camera_height: 1.55,
            },
        }
    }

    /// nuScenes CAM_FRONT, level mount.
    pub fn nuscenes() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 1266.417203,
                fy: 1266.417203,
                cx: 816.267020,
                cy: 491.507066,
                width: 1600,
                height: 900,
            },
            extrinsics: CameraExtrinsics {
                rotation: Matrix3::identity(),
                translation: Vector3::zeros(),
                camera_height: 1.51,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

/// Pinhole projection of a camera-frame point.
pub fn project_point(intr: &CameraIntrinsics, p: Point3D) -> Result<Pixel> {
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    Ok(Pixel {
        u: intr.fx * p.x / p.z + intr.cx,
        v: intr.fy * p.y / p.z + intr.cy,
    })
}

/// A projectively normalized 3x3 homography.
///
/// `front_sign` fixes the overall sign so that `front_sign * w > 0` for points
/// that lie in front of the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    front_sign: f64,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let (m, sign) = normalize(m)?;
        Ok(Self { m, front_sign: sign })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
            front_sign: 1.0,
        }
    }

    /// Normalizes `m` while keeping positive `w` for points in front of the camera.
    fn oriented(m: Matrix3<f64>) -> Result<Self> {
        let (m, divisor_sign) = normalize(m)?;
        Ok(Self {
            m,
            front_sign: divisor_sign,
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("homography is singular".into()))?;
        let (m, divisor_sign) = normalize(inv)?;
        Ok(Self {
            m,
            front_sign: self.front_sign * divisor_sign,
        })
    }

    /// Maps a point; `None` when it lands at infinity or behind the camera.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if !(w * self.front_sign > 1e-12) {
            return None;
        }
        Some((
            (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w,
            (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w,
        ))
    }
}

/// Scales so that `m[2][2] = 1`, or to unit Frobenius norm when that entry is zero.
/// Returns the normalized matrix and the sign of the divisor.
fn normalize(m: Matrix3<f64>) -> Result<(Matrix3<f64>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateConfiguration("non-finite homography".into()));
    }
    let norm = m.norm();
    if norm == 0.0 {
        return Err(Error::DegenerateConfiguration("zero homography".into()));
    }
    let divisor = if m[(2, 2)].abs() > DET_EPS * norm {
        m[(2, 2)]
    } else {
        norm
    };
    let n = m / divisor;
    if !(n.determinant().abs() > DET_EPS) {
        return Err(Error::DegenerateConfiguration(format!(
            "|det| = {:e} after normalization",
            n.determinant().abs()
        )));
    }
    Ok((n, divisor.signum()))
}

/// Metric ground coordinates `(x, z, 1)` to continuous BEV raster coordinates.
pub fn metric_to_raster(grid: &BevGridSpec) -> Matrix3<f64> {
    let s = 1.0 / grid.resolution;
    Matrix3::new(
        s,
        0.0,
        -grid.x_min * s - 0.5,
        0.0,
        -s,
        grid.z_max * s - 0.5,
        0.0,
        0.0,
        1.0,
    )
}

/// Ground plane `(x, z, 1)` to homogeneous image coordinates; `w` is the camera depth.
pub fn ground_to_image(intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Matrix3<f64> {
    let r = &extr.rotation;
    let offset = r.column(1) * extr.camera_height + extr.translation;
    let mut basis = Matrix3::zeros();
    basis.set_column(0, &r.column(0));
    basis.set_column(1, &r.column(2));
    basis.set_column(2, &offset);
    intr.matrix() * basis
}

/// Homography from FV pixels to continuous BEV raster coordinates for points on
/// the ground plane.
pub fn ipm_homography(intr: &CameraIntrinsics, extr: &CameraExtrinsics, grid: &BevGridSpec) -> Result<Homography> {
    let g = ground_to_image(intr, extr);
    let g_inv = g.try_inverse().ok_or_else(|| {
        Error::DegenerateConfiguration("camera center lies on the ground plane".into())
    })?;
    Homography::oriented(metric_to_raster(grid) * g_inv)
}

/// Continuous BEV raster position of a reference-frame ground point.
pub fn orthographic_cell(grid: &BevGridSpec, x: f64, z: f64) -> (f64, f64) {
    grid.to_raster(x, z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

/// A warped image together with the mask of pixels that had a valid source sample.
#[derive(Clone, Debug)]
pub struct Warped {
    pub image: ChannelRaster,
    pub valid: Raster<bool>,
}

#[inline]
fn sample_plane(plane: &[f64], width: usize, height: usize, u: f64, v: f64, mode: Sampling) -> Option<f64> {
    if !(u.is_finite() && v.is_finite()) {
        return None;
    }
    match mode {
        Sampling::Nearest => {
            let c = (u + 0.5).floor();
            let r = (v + 0.5).floor();
            if c < 0.0 || r < 0.0 || c >= width as f64 || r >= height as f64 {
                return None;
            }
            Some(plane[r as usize * width + c as usize])
        }
        Sampling::Bilinear => {
            if u < 0.0 || v < 0.0 || u > (width - 1) as f64 || v > (height - 1) as f64 {
                return None;
            }
            let x0 = u.floor() as usize;
            let y0 = v.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let y1 = (y0 + 1).min(height - 1);
            let ax = u - x0 as f64;
            let ay = v - y0 as f64;
            let top = plane[y0 * width + x0] * (1.0 - ax) + plane[y0 * width + x1] * ax;
            let bottom = plane[y1 * width + x0] * (1.0 - ax) + plane[y1 * width + x1] * ax;
            Some(top * (1.0 - ay) + bottom * ay)
        }
    }
}

/// Inverse-mapping warp: `source_of(row, col)` gives the source position `(u, v)`.
fn warp_with(
    image: &ChannelRaster,
    out_width: usize,
    out_height: usize,
    mode: Sampling,
    source_of: impl Fn(usize, usize) -> Option<(f64, f64)>,
) -> Warped {
    let channels = image.channels();
    let mut out = ChannelRaster::zeros(out_width, out_height, channels);
    let mut valid = Raster::filled(out_width, out_height, false);
    if image.width() == 0 || image.height() == 0 {
        return Warped { image: out, valid };
    }
    for row in 0..out_height {
        for col in 0..out_width {
            let Some((u, v)) = source_of(row, col) else { continue };
            // Validity depends only on the position, so the first miss ends the pixel.
            for ch in 0..channels {
                match sample_plane(image.plane(ch), image.width(), image.height(), u, v, mode) {
                    Some(s) => {
                        out.set(ch, row, col, s);
                        valid.set(row, col, true);
                    }
                    None => break,
                }
            }
        }
    }
    Warped { image: out, valid }
}

/// Warps a frontal-view image onto the BEV grid. `h` maps FV pixels to BEV raster
/// coordinates; out-of-source samples are zero.
pub fn warp_fv_to_bev(image: &ChannelRaster, h: &Homography, grid: &BevGridSpec, mode: Sampling) -> Result<Warped> {
    let inv = h.inverse()?;
    Ok(warp_with(image, grid.cells_x, grid.cells_z, mode, |row, col| {
        inv.apply(col as f64, row as f64)
    }))
}

/// Projects a BEV image back into the frontal view using the inverse of `h`.
pub fn warp_bev_to_fv(image: &ChannelRaster, h: &Homography, intr: &CameraIntrinsics, mode: Sampling) -> Result<Warped> {
    Ok(warp_with(image, intr.width, intr.height, mode, |row, col| {
        h.apply(col as f64, row as f64)
    }))
}

/// Nearest-neighbour warp of a label raster (labels are never blended).
pub fn warp_labels_fv_to_bev(labels: &Raster<u16>, h: &Homography, grid: &BevGridSpec) -> Result<Raster<u16>> {
    let inv = h.inverse()?;
    Ok(Raster::from_fn(grid.cells_x, grid.cells_z, |row, col| {
        inv.apply(col as f64, row as f64)
            .and_then(|(u, v)| {
                let c = (u + 0.5).floor();
                let r = (v + 0.5).floor();
                labels.checked(r as i64, c as i64).copied().filter(|_| c >= 0.0 && r >= 0.0)
            })
            .unwrap_or(0)
    }))
}

/// Source coordinates `(column, row)` that turn a column-aligned perspective
/// feature map of `src_width` x `src_rows` into the Cartesian BEV grid.
///
/// Columns follow `u = fx * x / z + cx` rescaled to `src_width`; rows are linear
/// in depth with row 0 at `z_max`. Cells with `z <= 0` get NaN.
pub fn polar_resample_grid(
    intr: &CameraIntrinsics,
    grid: &BevGridSpec,
    src_width: usize,
    src_rows: usize,
) -> Raster<[f64; 2]> {
    let col_scale = src_width as f64 / intr.width as f64;
    let depth = grid.z_max - grid.z_min;
    Raster::from_fn(grid.cells_x, grid.cells_z, |row, col| {
        let (x, z) = grid.cell_center(row, col);
        if z <= 0.0 {
            return [f64::NAN, f64::NAN];
        }
        let u = intr.fx * x / z + intr.cx;
        let src_row = (grid.z_max - z) / depth * src_rows as f64 - 0.5;
        [u * col_scale, src_row]
    })
}

/// Resamples a perspective feature map into the BEV grid through
/// [`polar_resample_grid`].
pub fn resample_polar(features: &ChannelRaster, intr: &CameraIntrinsics, grid: &BevGridSpec, mode: Sampling) -> Warped {
    let coords = polar_resample_grid(intr, grid, features.width(), features.height());
    warp_with(features, grid.cells_x, grid.cells_z, mode, |row, col| {
        let [u, v] = *coords.get(row, col);
        Some((u, v))
    })
}

/// Cells whose centers project inside the image columns `0 <= u < width`.
pub fn fov_mask(intr: &CameraIntrinsics, grid: &BevGridSpec) -> Raster<bool> {
    Raster::from_fn(grid.cells_x, grid.cells_z, |row, col| {
        let (x, z) = grid.cell_center(row, col);
        if z <= 0.0 {
            return false;
        }
        let u = intr.fx * x / z + intr.cx;
        u >= 0.0 && u < intr.width as f64
    })
}
