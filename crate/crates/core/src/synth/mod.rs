//! Seeded synthetic street scenes with exact ground truth, ray-cast LiDAR
//! sweeps, and brute-force reference implementations for testing.
//!
//! Ground is flat at the camera height below the sensor. A road strip runs
//! along z with sidewalks on both sides and terrain beyond. Walls and bushes
//! are axis-aligned and snapped to cell boundaries so that both the exact
//! raster and the LiDAR returns agree cell by cell; vehicles and pedestrians
//! are arbitrary oriented boxes. Only IEEE-exact arithmetic and `libm` are
//! used, so scenes are bit-identical across platforms.

pub mod oracle;
mod rng;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraExtrinsics, CameraRig};
use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::labels::{
    generate_labels, Box3D, EgoPose, FrameInputs, HeightMap, InstanceFusionParams, LabelGenParams, LabeledPoint,
    LabeledPointCloud, MorphKernelTable, ray_cells,
};
use crate::metrics::{panoptic_quality, PanopticScores};
use crate::panoptic::{CategoryTable, PanopticBevMap, VOID};
use crate::raster::Raster;

pub use rng::SceneRng;

pub const ROAD: u16 = 1;
pub const SIDEWALK: u16 = 2;
pub const TERRAIN: u16 = 4;
pub const WALL: u16 = 7;
pub const VEGETATION: u16 = 10;
pub const CAR: u16 = 12;
pub const PERSON: u16 = 15;

/// Inset of axis-aligned static objects from cell boundaries, as a fraction
/// of the resolution. Vegetation is outset instead: a cell holding both
/// ground and vegetation returns takes the ground label, so faces must not
/// leave a strip of visible ground inside a vegetation cell.
const INSET: f64 = 0.05;
const PLACEMENT_TRIES: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    pub azimuth_step_deg: f64,
    pub azimuth_half_range_deg: f64,
    /// Spacing of ring footprints on the ground, meters.
    pub ground_spacing: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Isotropic Gaussian noise added to every return, meters.
    pub noise_sigma: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            azimuth_step_deg: 0.15,
            azimuth_half_range_deg: 56.0,
            ground_spacing: 0.06,
            min_range: 0.3,
            max_range: 40.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: u32,
    /// Forward motion per frame, meters. Frame 0 is the latest.
    pub step: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self { frames: 3, step: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: BevGridSpec,
    pub camera_height: f64,
    pub road_width: [f64; 2],
    pub sidewalk_width: [f64; 2],
    pub road_offset: [f64; 2],
    pub vehicles: usize,
    pub vehicle_length: [f64; 2],
    pub vehicle_width: [f64; 2],
    pub vehicle_height: [f64; 2],
    /// Maximum absolute vehicle yaw, radians.
    pub vehicle_yaw: f64,
    pub pedestrians: usize,
    pub pedestrian_size: [f64; 2],
    pub pedestrian_height: [f64; 2],
    pub walls: usize,
    pub wall_length: [f64; 2],
    pub wall_thickness: [f64; 2],
    pub wall_height: [f64; 2],
    pub bushes: usize,
    pub bush_size: [f64; 2],
    pub bush_height: [f64; 2],
    /// Free space kept between object footprints, meters.
    pub clearance: f64,
    pub lidar: LidarSpec,
    pub trajectory: TrajectorySpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: BevGridSpec::camera_bottom_center(160, 160, 0.15).expect("valid grid"),
            camera_height: 1.55,
            road_width: [6.0, 9.0],
            sidewalk_width: [1.5, 3.0],
            road_offset: [-3.0, 3.0],
            vehicles: 3,
            vehicle_length: [3.8, 4.8],
            vehicle_width: [1.7, 2.0],
            vehicle_height: [1.4, 1.6],
            vehicle_yaw: 0.4,
            pedestrians: 2,
            pedestrian_size: [0.5, 0.8],
            pedestrian_height: [1.6, 1.9],
            walls: 2,
            wall_length: [2.0, 5.0],
            wall_thickness: [0.3, 0.45],
            wall_height: [0.8, 1.4],
            bushes: 2,
            bush_size: [0.9, 2.0],
            bush_height: [0.4, 1.0],
            clearance: 0.6,
            lidar: LidarSpec::default(),
            trajectory: TrajectorySpec::default(),
        }
    }
}

impl SceneSpec {
    /// Ground only.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            vehicles: 0,
            pedestrians: 0,
            walls: 0,
            bushes: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |msg: &str| Err(Error::InvalidInput(format!("scene spec: {msg}")));
        if !(self.camera_height > 0.0) {
            return bad("camera_height must be positive");
        }
        for (name, r) in [
            ("road_width", self.road_width),
            ("sidewalk_width", self.sidewalk_width),
            ("road_offset", self.road_offset),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("vehicle_height", self.vehicle_height),
            ("pedestrian_size", self.pedestrian_size),
            ("pedestrian_height", self.pedestrian_height),
            ("wall_length", self.wall_length),
            ("wall_thickness", self.wall_thickness),
            ("wall_height", self.wall_height),
            ("bush_size", self.bush_size),
            ("bush_height", self.bush_height),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(&format!("{name} must be an ordered finite range"));
            }
            if name != "road_offset" && !(r[0] > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        let l = &self.lidar;
        if !(l.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(l.azimuth_step_deg > 0.0 && l.ground_spacing > 0.0 && l.min_range > 0.0 && l.max_range > l.min_range) {
            return bad("lidar steps and ranges must be positive");
        }
        if !(l.azimuth_half_range_deg > 0.0 && l.azimuth_half_range_deg < 90.0) {
            return bad("azimuth_half_range_deg must lie in (0, 90)");
        }
        if self.trajectory.frames == 0 || !(self.trajectory.step >= 0.0) {
            return bad("trajectory needs at least one frame and a non-negative step");
        }
        if !(self.clearance >= 0.0) {
            return bad("clearance must be >= 0");
        }
        Ok(())
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig {
            intrinsics: CameraRig::kitti360().intrinsics,
            extrinsics: CameraExtrinsics::level(self.camera_height).expect("validated height"),
        }
    }
}

/// Oriented box standing on the ground; yaw 0 puts the length along +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center_x: f64,
    pub center_z: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub yaw: f64,
    pub class_id: u16,
    pub instance_id: u16,
}

impl SceneObject {
    /// Ground-plane axes `(along, across)` as `(x, z)` pairs.
    fn axes(&self) -> ((f64, f64), (f64, f64)) {
        if self.yaw == 0.0 {
            return ((0.0, 1.0), (1.0, 0.0));
        }
        let (s, c) = (libm::sin(self.yaw), libm::cos(self.yaw));
        ((s, c), (c, -s))
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (a, b) = self.axes();
        let (dx, dz) = (x - self.center_x, z - self.center_z);
        (dx * a.0 + dz * a.1).abs() <= self.length / 2.0 && (dx * b.0 + dz * b.1).abs() <= self.width / 2.0
    }

    /// Axis-aligned bounds `(x0, x1, z0, z1)` of the footprint.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (a, b) = self.axes();
        let ex = (a.0 * self.length / 2.0).abs() + (b.0 * self.width / 2.0).abs();
        let ez = (a.1 * self.length / 2.0).abs() + (b.1 * self.width / 2.0).abs();
        (self.center_x - ex, self.center_x + ex, self.center_z - ez, self.center_z + ez)
    }

    /// Ray parameter of the first hit of `o + t d` with `t` in `(0, t_max)`.
    fn intersect(&self, o: [f64; 3], d: [f64; 3], camera_height: f64, t_max: f64) -> Option<f64> {
        let (a, b) = self.axes();
        let (ox, oz) = (o[0] - self.center_x, o[2] - self.center_z);
        let slabs = [
            (ox * a.0 + oz * a.1, d[0] * a.0 + d[2] * a.1, -self.length / 2.0, self.length / 2.0),
            (ox * b.0 + oz * b.1, d[0] * b.0 + d[2] * b.1, -self.width / 2.0, self.width / 2.0),
            (o[1], d[1], camera_height - self.height, camera_height),
        ];
        let (mut t0, mut t1) = (0.0f64, t_max);
        for (p, v, lo, hi) in slabs {
            if v == 0.0 {
                if p < lo || p > hi {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - p) / v, (hi - p) / v);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 0.0 && t0 < t_max).then_some(t0)
    }
}

/// Ground classes by column: road, sidewalks on both sides, terrain beyond.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundLayout {
    pub road_cols: (i64, i64),
    pub sidewalk_left_cols: (i64, i64),
    pub sidewalk_right_cols: (i64, i64),
}

impl GroundLayout {
    /// Class of the ground at lateral position `x` (half-open column ranges,
    /// using the same binning as the grid).
    pub fn class_at(&self, grid: &BevGridSpec, x: f64) -> u16 {
        let col = ((x - grid.x_min) / grid.resolution).floor() as i64;
        let inside = |r: (i64, i64)| col >= r.0 && col < r.1;
        if inside(self.road_cols) {
            ROAD
        } else if inside(self.sidewalk_left_cols) || inside(self.sidewalk_right_cols) {
            SIDEWALK
        } else {
            TERRAIN
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalyticScene {
    pub spec: SceneSpec,
    pub rig: CameraRig,
    pub categories: Arc<CategoryTable>,
    pub layout: GroundLayout,
    pub objects: Vec<SceneObject>,
    /// Exact orthographic raster at frame 0, before occlusion and FoV.
    pub gt: PanopticBevMap,
    pub heights: HeightMap,
    pub clouds: Vec<LabeledPointCloud>,
    pub poses: Vec<EgoPose>,
    pub boxes: Vec<Box3D>,
}

impl AnalyticScene {
    pub fn frame_inputs(&self, target_frame: u32) -> FrameInputs {
        FrameInputs {
            clouds: self.clouds.clone(),
            poses: self.poses.clone(),
            boxes: self.boxes.clone(),
            target_frame,
        }
    }

    /// Label parameters matching the scene grid and rig.
    pub fn label_params(&self, height_margin: f64) -> LabelGenParams {
        LabelGenParams {
            rig: self.rig,
            grid: self.spec.grid,
            crop: None,
            kernels: MorphKernelTable::table_default(),
            window: None,
            occlusion: true,
            height_margin,
            fusion: InstanceFusionParams::default(),
            categories: self.categories.clone(),
        }
    }
}

fn snap_cols(grid: &BevGridSpec, x0: f64, x1: f64) -> (i64, i64) {
    let c0 = ((x0 - grid.x_min) / grid.resolution).round() as i64;
    let c1 = ((x1 - grid.x_min) / grid.resolution).round() as i64;
    (c0, c1.max(c0 + 1))
}

fn origin(spec: &SceneSpec, frame: u32) -> [f64; 3] {
    [0.0, 0.0, -(frame as f64) * spec.trajectory.step]
}

pub fn gen_scene(spec: &SceneSpec) -> Result<AnalyticScene> {
    spec.validate()?;
    let grid = spec.grid;
    let res = grid.resolution;
    let mut rng = SceneRng::new(spec.seed);

    let road_w = rng.range(spec.road_width[0], spec.road_width[1]);
    let offset = rng.range(spec.road_offset[0], spec.road_offset[1]);
    let sw_l = rng.range(spec.sidewalk_width[0], spec.sidewalk_width[1]);
    let sw_r = rng.range(spec.sidewalk_width[0], spec.sidewalk_width[1]);
    let road_cols = snap_cols(&grid, offset - road_w / 2.0, offset + road_w / 2.0);
    let left = snap_cols(&grid, offset - road_w / 2.0 - sw_l, offset - road_w / 2.0);
    let right = snap_cols(&grid, offset + road_w / 2.0, offset + road_w / 2.0 + sw_r);
    let layout = GroundLayout {
        road_cols,
        sidewalk_left_cols: (left.0, road_cols.0),
        sidewalk_right_cols: (road_cols.1, right.1.max(road_cols.1 + 1)),
    };

    // Placement area leaves room behind the camera row and at the far edge.
    let (ax0, ax1) = (grid.x_min + 1.0, grid.x_max - 1.0);
    let (az0, az1) = (grid.z_min + 2.5, grid.z_max - 1.0);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut next_instance = 1u16;

    let mut place = |rng: &mut SceneRng, make: &mut dyn FnMut(&mut SceneRng) -> SceneObject| -> Result<SceneObject> {
        for _ in 0..PLACEMENT_TRIES {
            let o = make(rng);
            let (x0, x1, z0, z1) = o.bounds();
            if x0 < ax0 || x1 > ax1 || z0 < az0 || z1 > az1 {
                continue;
            }
            let c = spec.clearance;
            let clear = objects.iter().all(|p| {
                let (px0, px1, pz0, pz1) = p.bounds();
                x1 + c <= px0 || px1 + c <= x0 || z1 + c <= pz0 || pz1 + c <= z0
            });
            if clear {
                objects.push(o);
                return Ok(o);
            }
        }
        Err(Error::InfeasibleSpec(format!(
            "could not place object {} without overlap after {PLACEMENT_TRIES} tries",
            objects.len() + 1
        )))
    };

    // Axis-aligned static box occupying whole cells, inset from their edges
    // (outset for vegetation).
    let snapped = |rng: &mut SceneRng, len: [f64; 2], wid: [f64; 2], hgt: [f64; 2], class: u16| {
        let along_z = rng.uniform() < 0.5;
        let l = rng.range(len[0], len[1]);
        let w = rng.range(wid[0], wid[1]);
        let (sx, sz) = if along_z { (w, l) } else { (l, w) };
        let nx = ((sx / res).round() as i64).max(1);
        let nz = ((sz / res).round() as i64).max(1);
        let c0 = rng.int(0, grid.cells_x as i64 - nx);
        let r0 = rng.int(0, grid.cells_z as i64 - nz);
        let x0 = grid.x_min + c0 as f64 * res;
        let z1 = grid.z_max - r0 as f64 * res;
        let inset = if class == VEGETATION { -INSET } else { INSET };
        let (wx, wz) = ((nx as f64 - 2.0 * inset) * res, (nz as f64 - 2.0 * inset) * res);
        SceneObject {
            center_x: x0 + nx as f64 * res / 2.0,
            center_z: z1 - nz as f64 * res / 2.0,
            length: wz,
            width: wx,
            height: rng.range(hgt[0], hgt[1]),
            yaw: 0.0,
            class_id: class,
            instance_id: 0,
        }
    };

    for _ in 0..spec.walls {
        place(&mut rng, &mut |r| {
            snapped(r, spec.wall_length, spec.wall_thickness, spec.wall_height, WALL)
        })?;
    }
    for _ in 0..spec.bushes {
        place(&mut rng, &mut |r| snapped(r, spec.bush_size, spec.bush_size, spec.bush_height, VEGETATION))?;
    }
    for _ in 0..spec.vehicles {
        let id = next_instance;
        place(&mut rng, &mut |r| SceneObject {
            center_x: r.range(ax0, ax1),
            center_z: r.range(az0, az1),
            length: r.range(spec.vehicle_length[0], spec.vehicle_length[1]),
            width: r.range(spec.vehicle_width[0], spec.vehicle_width[1]),
            height: r.range(spec.vehicle_height[0], spec.vehicle_height[1]),
            yaw: r.range(-spec.vehicle_yaw, spec.vehicle_yaw),
            class_id: CAR,
            instance_id: id,
        })?;
        next_instance += 1;
    }
    for _ in 0..spec.pedestrians {
        let id = next_instance;
        place(&mut rng, &mut |r| {
            let s = r.range(spec.pedestrian_size[0], spec.pedestrian_size[1]);
            SceneObject {
                center_x: r.range(ax0, ax1),
                center_z: r.range(az0, az1),
                length: s,
                width: s,
                height: r.range(spec.pedestrian_height[0], spec.pedestrian_height[1]),
                yaw: r.range(-std::f64::consts::PI, std::f64::consts::PI),
                class_id: PERSON,
                instance_id: id,
            }
        })?;
        next_instance += 1;
    }

    let categories = Arc::new(CategoryTable::bev_default());
    let (gt, heights) = rasterize(&grid, &layout, &objects, &categories);

    let mut noise = SceneRng::new(spec.seed ^ 0x5eed_0f_5ca1_ab1e);
    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    let mut boxes = Vec::new();
    for frame in 0..spec.trajectory.frames {
        let o = origin(spec, frame);
        let mut m = nalgebra::Matrix4::identity();
        m[(2, 3)] = o[2];
        poses.push(EgoPose::new(frame, m)?);
        clouds.push(scan(spec, &layout, &objects, frame, &mut noise));
        for ob in objects.iter().filter(|ob| ob.instance_id > 0) {
            boxes.push(Box3D {
                center: [ob.center_x, spec.camera_height - ob.height / 2.0, ob.center_z - o[2]],
                dims: [ob.length, ob.width, ob.height],
                yaw: ob.yaw,
                class_id: ob.class_id,
                instance_id: ob.instance_id,
                frame,
            });
        }
    }

    Ok(AnalyticScene {
        spec: spec.clone(),
        rig: spec.rig(),
        categories,
        layout,
        objects,
        gt,
        heights,
        clouds,
        poses,
        boxes,
    })
}

/// Exact raster: each cell takes the object containing its center, else the
/// ground class.
fn rasterize(
    grid: &BevGridSpec,
    layout: &GroundLayout,
    objects: &[SceneObject],
    categories: &Arc<CategoryTable>,
) -> (PanopticBevMap, HeightMap) {
    let mut map = PanopticBevMap::for_grid(grid, categories.clone());
    let mut heights = HeightMap::empty(grid.cells_x, grid.cells_z);
    for row in 0..grid.cells_z {
        for col in 0..grid.cells_x {
            let (x, z) = grid.cell_center(row, col);
            match objects.iter().find(|o| o.contains(x, z)) {
                Some(o) => {
                    map.set(row, col, o.class_id, o.instance_id);
                    heights.raise(row, col, o.height);
                }
                None => {
                    map.set(row, col, layout.class_at(grid, x), 0);
                    heights.raise(row, col, 0.0);
                }
            }
        }
    }
    (map, heights)
}

/// One sweep from the sensor of `frame`; points in that frame's coordinates.
fn scan(
    spec: &SceneSpec,
    layout: &GroundLayout,
    objects: &[SceneObject],
    frame: u32,
    noise: &mut SceneRng,
) -> LabeledPointCloud {
    let grid = &spec.grid;
    let l = &spec.lidar;
    let h = spec.camera_height;
    let o = origin(spec, frame);
    let n_az = (l.azimuth_half_range_deg / l.azimuth_step_deg).floor() as i64;
    // Smallest camera-to-top height among objects lower than the camera.
    let top_drop = objects
        .iter()
        .map(|ob| h - ob.height)
        .filter(|&dz| dz > 0.05)
        .min_by(f64::total_cmp);
    let mut points = Vec::new();
    for i in -n_az..=n_az {
        let phi = (i as f64 * l.azimuth_step_deg).to_radians();
        let (s, c) = (libm::sin(phi), libm::cos(phi));
        // Ground returns stop where the footprint leaves the grid.
        let mut rho_exit = f64::INFINITY;
        if s.abs() > 1e-12 {
            let x_lim = if s > 0.0 { grid.x_max + 0.5 } else { grid.x_min - 0.5 };
            rho_exit = rho_exit.min((x_lim - o[0]) / s);
        }
        rho_exit = rho_exit.min((grid.z_max + 0.5 - o[2]) / c);
        let rho_ground = rho_exit.min(l.max_range);
        let n_rho = ((rho_ground - l.min_range) / l.ground_spacing).floor().max(-1.0) as i64;
        let mut rhos: Vec<f64> = (0..=n_rho).map(|k| l.min_range + k as f64 * l.ground_spacing).collect();
        // Flatter rays only matter for object tops inside the grid. A top
        // `drop` below the camera is met at ground-equivalent range
        // rho * drop / h, so geometric spacing keeps every such top sampled
        // at least as densely as the ground.
        if let Some(drop) = top_drop {
            let far = rho_exit * h / drop;
            let ratio = 1.0 + l.ground_spacing / rho_exit;
            let mut rho = rhos.last().copied().unwrap_or(l.min_range) * ratio;
            while rho <= far {
                rhos.push(rho);
                rho *= ratio;
            }
        }
        for rho in rhos {
            let d = [rho * s, h, rho * c];
            let mut best = (1.0, None);
            for ob in objects {
                if let Some(t) = ob.intersect(o, d, h, best.0) {
                    best = (t, Some(ob));
                }
            }
            let (t, hit) = best;
            if hit.is_none() && rho > rho_ground + 1e-9 {
                continue;
            }
            let mut p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let (ex, ey, ez) = (p[0] - o[0], p[1] - o[1], p[2] - o[2]);
            let range = (ex * ex + ey * ey + ez * ez).sqrt();
            if range > l.max_range {
                continue;
            }
            let (class_id, instance_id) = match hit {
                Some(ob) => (ob.class_id, ob.instance_id),
                None => (layout.class_at(grid, p[0]), 0),
            };
            if l.noise_sigma > 0.0 {
                for v in &mut p {
                    *v += l.noise_sigma * noise.normal();
                }
            }
            points.push(LabeledPoint {
                position: [p[0] - o[0], p[1] - o[1], p[2] - o[2]],
                class_id,
                instance_id,
                dynamic: class_id == CAR || class_id == PERSON,
                frame,
            });
        }
    }
    LabeledPointCloud::new(points)
}

/// Whether the top surface at each cell center is directly visible from the
/// frame-0 sensor, ignoring the object that surface belongs to.
fn line_of_sight(scene: &AnalyticScene) -> Raster<bool> {
    let grid = &scene.spec.grid;
    let h = scene.spec.camera_height;
    let o = origin(&scene.spec, 0);
    Raster::from_fn(grid.cells_x, grid.cells_z, |row, col| {
        let (x, z) = grid.cell_center(row, col);
        let owner = scene.objects.iter().position(|ob| ob.contains(x, z));
        let y = owner.map_or(h, |i| h - scene.objects[i].height);
        let d = [x - o[0], y - o[1], z - o[2]];
        !scene
            .objects
            .iter()
            .enumerate()
            .any(|(i, ob)| Some(i) != owner && ob.intersect(o, d, h, 1.0 - 1e-9).is_some())
    })
}

fn robust_occlusion(h: &HeightMap, grid: &BevGridSpec, margin: f64) -> Raster<bool> {
    let (w, ht) = (grid.cells_x, grid.cells_z);
    let widened = Raster::from_fn(w, ht, |row, col| {
        let mut m = 0.0f64;
        for r in row.saturating_sub(1)..(row + 2).min(ht) {
            for c in col.saturating_sub(1)..(col + 2).min(w) {
                m = m.max(h.ground_filled(r, c));
            }
        }
        m
    });
    Raster::from_fn(w, ht, |row, col| {
        let run = ray_cells(grid, row, col)
            .into_iter()
            .filter(|&(r, c)| r >= 0 && c >= 0 && (r as usize) < ht && (c as usize) < w)
            .map(|(r, c)| *widened.get(r as usize, c as usize))
            .fold(0.0, f64::max);
        h.ground_filled(row, col) < run - margin
    })
}

/// Outcome of running the label pipeline on a scene and scoring it.
#[derive(Clone, Debug)]
pub struct EndToEnd {
    pub scores: PanopticScores,
    /// Cells scored: inside the FoV, with the cell-center surface in direct
    /// line of sight from the frame-0 sensor, and not occluded in the exact
    /// height raster even when every occluder is widened by one cell.
    pub region: Raster<bool>,
    pub pred: PanopticBevMap,
    pub gt: PanopticBevMap,
}

/// Generates labels for frame 0 and scores them against the exact raster on
/// the visible region. Predicted occlusion inside that region counts as a
/// miss.
///
/// Object faces fall on cell boundaries, so returns from a face can raise
/// the neighbouring cell and widen its shadow by a cell. The scored region
/// therefore uses occluder heights max-filtered over 3x3 neighbourhoods.
pub fn end_to_end(spec: &SceneSpec, height_margin: f64) -> Result<EndToEnd> {
    let scene = gen_scene(spec)?;
    let params = scene.label_params(height_margin);
    let out = generate_labels(&scene.frame_inputs(0), &params)?;
    let grid = &spec.grid;
    let occluded = robust_occlusion(&scene.heights, grid, height_margin);
    let fov = crate::camera::fov_mask(&scene.rig.intrinsics, grid);
    let sight = line_of_sight(&scene);
    let region = Raster::from_fn(grid.cells_x, grid.cells_z, |r, c| {
        *fov.get(r, c) && !occluded.get(r, c) && *sight.get(r, c)
    });

    let occ = scene.categories.occlusion_id();
    let mut gt = scene.gt.clone();
    let mut pred = out.map.clone();
    for (i, &inside) in region.iter().enumerate() {
        if !inside {
            gt.class.as_mut_slice()[i] = VOID;
            gt.instance.as_mut_slice()[i] = 0;
        }
        if pred.class.as_slice()[i] == occ {
            pred.class.as_mut_slice()[i] = VOID;
            pred.instance.as_mut_slice()[i] = 0;
        }
    }
    let scores = panoptic_quality(&pred, &gt)?;
    Ok(EndToEnd {
        scores,
        region,
        pred,
        gt,
    })
}
