//! Browser demo: sensitivity weights, inverse perspective mapping and BEV
//! occlusion, each rendered to an RGBA buffer for a canvas.

use panbev::camera::{ipm_homography, warp_bev_to_fv, warp_fv_to_bev, CameraExtrinsics, CameraIntrinsics, Sampling};
use panbev::grid::BevGridSpec;
use panbev::labels::{occlusion_mask, HeightMap};
use panbev::raster::{ChannelRaster, Raster};
use panbev::weighting::{sensitivity_map, sensitivity_weight};
use wasm_bindgen::prelude::*;

fn err(e: panbev::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Blue to yellow ramp over `t` in `[0, 1]`.
fn ramp(t: f64) -> [u8; 4] {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.sqrt()) as u8;
    let g = (220.0 * t) as u8;
    let b = (255.0 * (1.0 - t)) as u8;
    [r, g, b, 255]
}

fn to_rgba(r: &Raster<f64>) -> Vec<u8> {
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    r.iter().flat_map(|&v| ramp((v - lo) / span)).collect()
}

fn square_grid(size: usize, range: f64) -> Result<BevGridSpec, JsError> {
    BevGridSpec::camera_bottom_center(size, size, range / size as f64).map_err(err)
}

/// Sensitivity weights over a `size`x`size` grid spanning `range` meters in
/// front of the camera, as RGBA (row 0 is the far edge).
#[wasm_bindgen]
pub fn sensitivity_heatmap(size: usize, range: f64, focal: f64, camera_height: f64, lambda_s: f64) -> Result<Vec<u8>, JsError> {
    let grid = square_grid(size, range)?;
    let intr = CameraIntrinsics::new(focal, focal, 320.0, 180.0, 640, 360).map_err(err)?;
    let s = sensitivity_map(&intr, &grid, camera_height).map_err(err)?;
    let w = sensitivity_weight(&s, lambda_s).map_err(err)?;
    Ok(to_rgba(&w.w))
}

fn checkerboard(size: usize, cells: usize) -> ChannelRaster {
    let step = (size / cells.max(1)).max(1);
    let plane = Raster::from_fn(size, size, |r, c| {
        let base = if (r / step + c / step) % 2 == 0 { 0.9 } else { 0.15 };
        // A stripe down the middle marks the optical axis.
        if c.abs_diff(size / 2) <= step / 8 {
            0.55
        } else {
            base
        }
    });
    ChannelRaster::from_planes(&[plane]).expect("single plane")
}

fn gray_rgba(img: &ChannelRaster, valid: &Raster<bool>) -> Vec<u8> {
    img.plane(0)
        .iter()
        .zip(valid.iter())
        .flat_map(|(&v, &ok)| {
            if ok {
                let g = (255.0 * v.clamp(0.0, 1.0)) as u8;
                [g, g, g, 255]
            } else {
                [40, 20, 20, 255]
            }
        })
        .collect()
}

/// A ground checkerboard seen by a level camera at `camera_height`, then
/// mapped back to the ground plane. Returns the 640x360 frontal view
/// followed by the `bev_size`x`bev_size` BEV image, both RGBA.
#[wasm_bindgen]
pub fn ipm_round_trip(bev_size: usize, range: f64, focal: f64, camera_height: f64) -> Result<Vec<u8>, JsError> {
    let grid = square_grid(bev_size, range)?;
    let intr = CameraIntrinsics::new(focal, focal, 320.0, 180.0, 640, 360).map_err(err)?;
    let extr = CameraExtrinsics::level(camera_height).map_err(err)?;
    let h = ipm_homography(&intr, &extr, &grid).map_err(err)?;
    let board = checkerboard(bev_size, 12);
    let fv = warp_bev_to_fv(&board, &h, &intr, Sampling::Bilinear).map_err(err)?;
    let bev = warp_fv_to_bev(&fv.image, &h, &grid, Sampling::Bilinear).map_err(err)?;
    let mut out = gray_rgba(&fv.image, &fv.valid);
    out.extend(gray_rgba(&bev.image, &bev.valid));
    Ok(out)
}

/// One box of height `height` meters centered at (`x`, `z`) with side
/// `side`, plus the cells it hides from a camera at the bottom center.
/// Gray: ground, white: box, red: occluded.
#[wasm_bindgen]
pub fn occlusion_view(size: usize, range: f64, x: f64, z: f64, side: f64, height: f64) -> Result<Vec<u8>, JsError> {
    let grid = square_grid(size, range)?;
    let mut hm = HeightMap::empty(size, size);
    for r in 0..size {
        for c in 0..size {
            let (cx, cz) = grid.cell_center(r, c);
            if (cx - x).abs() <= side / 2.0 && (cz - z).abs() <= side / 2.0 {
                hm.raise(r, c, height);
            }
        }
    }
    let occ = occlusion_mask(&hm, &grid);
    Ok(hm
        .heights
        .iter()
        .zip(occ.iter())
        .flat_map(|(h, &o)| match (h, o) {
            (_, true) => [200, 40, 40, 255],
            (Some(_), false) => [245, 245, 245, 255],
            (None, false) => [90, 90, 90, 255],
        })
        .collect())
}
