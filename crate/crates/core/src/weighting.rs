//! Sensitivity- and class-based loss weight maps.
//!
//! The FV-BEV sensitivity of a BEV cell at `(x, y, z)` is
//! `S = sqrt(fx^2 z^2 + (fx x + fy y)^2) / z^2` (pixels of FV motion per meter of
//! BEV motion), and its weight is `w = 1 + 1 / ln(1 + lambda_s * S)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::panoptic::{PanopticBevMap, VOID};
use crate::raster::Raster;

/// Default sensitivity scale.
pub const DEFAULT_LAMBDA_S: f64 = 10.0;
/// Default width of the class-boundary blend band, in pixels.
pub const DEFAULT_BLEND_RADIUS: u32 = 20;
/// Sensitivity floor used to bound the weight.
pub const S_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    pub s: Raster<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Sensitivity,
    Class,
    Combined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub w: Raster<f64>,
    pub kind: WeightKind,
    /// Upper bound on every entry.
    pub cap: f64,
}

impl WeightMap {
    /// Elementwise product of two weight maps.
    pub fn combine(&self, other: &WeightMap) -> Result<WeightMap> {
        if !self.w.same_shape(&other.w) {
            return Err(Error::ShapeMismatch("weight maps differ in size".into()));
        }
        let data = self.w.iter().zip(other.w.iter()).map(|(a, b)| a * b).collect();
        Ok(WeightMap {
            w: Raster::from_vec(self.w.width(), self.w.height(), data)?,
            kind: WeightKind::Combined,
            cap: self.cap * other.cap,
        })
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.w.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Sensitivity at a single point.
#[inline]
pub fn sensitivity_at(fx: f64, fy: f64, x: f64, y: f64, z: f64) -> f64 {
    let lateral = fx * x + fy * y;
    (fx * fx * z * z + lateral * lateral).sqrt() / (z * z)
}

/// Sensitivity over the BEV grid with every cell placed at height `plane_height`.
pub fn sensitivity_map(intr: &CameraIntrinsics, grid: &BevGridSpec, plane_height: f64) -> Result<SensitivityMap> {
    if grid.z_max - 0.5 * grid.resolution <= 0.0 || grid.z_min + 0.5 * grid.resolution <= 0.0 {
        return Err(Error::InvalidGrid(format!(
            "cell centers must have z > 0 (z_min = {})",
            grid.z_min
        )));
    }
    let s = Raster::from_fn(grid.cells_x, grid.cells_z, |row, col| {
        let (x, z) = grid.cell_center(row, col);
        sensitivity_at(intr.fx, intr.fy, x, plane_height, z)
    });
    Ok(SensitivityMap { s })
}

/// Largest sensitivity weight for a given `lambda_s`.
pub fn weight_cap(lambda_s: f64) -> f64 {
    1.0 + 1.0 / (lambda_s * S_MIN).ln_1p()
}

#[inline]
fn weight_of(s: f64, lambda_s: f64) -> f64 {
    1.0 + 1.0 / (lambda_s * s.max(S_MIN)).ln_1p()
}

pub fn sensitivity_weight(s: &SensitivityMap, lambda_s: f64) -> Result<WeightMap> {
    if !(lambda_s > 0.0) || !lambda_s.is_finite() {
        return Err(Error::NonPositiveLambda(lambda_s));
    }
    if let Some(bad) = s.s.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!("sensitivity entry {bad} is not a finite value >= 0")));
    }
    Ok(WeightMap {
        w: s.s.map(|&v| weight_of(v, lambda_s)),
        kind: WeightKind::Sensitivity,
        cap: weight_cap(lambda_s),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequency {
    pub frequency: f64,
    pub infrequent: bool,
}

/// Relative pixel frequency per class, with the frequent/infrequent split.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    pub classes: BTreeMap<u16, ClassFrequency>,
}

impl ClassFrequencyTable {
    /// Tallies labeled pixels of `maps`; thing classes are marked infrequent.
    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a PanopticBevMap>) -> Self {
        let mut counts: BTreeMap<u16, u64> = BTreeMap::new();
        let mut total = 0u64;
        let mut table = None;
        for m in maps {
            table.get_or_insert_with(|| m.categories.clone());
            for &c in m.class.iter() {
                total += 1;
                if c != VOID {
                    *counts.entry(c).or_insert(0) += 1;
                }
            }
        }
        let classes = counts
            .into_iter()
            .map(|(c, n)| {
                let infrequent = table.as_ref().is_some_and(|t| t.is_thing(c));
                (
                    c,
                    ClassFrequency {
                        frequency: n as f64 / total as f64,
                        infrequent,
                    },
                )
            })
            .collect();
        Self { classes }
    }
}

/// Per-class weights and the set of infrequent classes.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: BTreeMap<u16, f64>,
    pub infrequent: BTreeSet<u16>,
}

/// `w_c = frequency^(-1/2)` for every class in the table.
pub fn class_weights(freq: &ClassFrequencyTable) -> Result<ClassWeights> {
    let mut out = ClassWeights::default();
    for (&class, f) in &freq.classes {
        if !(f.frequency > 0.0) {
            return Err(Error::ZeroFrequencyClass(class));
        }
        if f.frequency > 1.0 || !f.frequency.is_finite() {
            return Err(Error::InvalidInput(format!(
                "class {class} frequency {} outside (0, 1]",
                f.frequency
            )));
        }
        out.weights.insert(class, 1.0 / f.frequency.sqrt());
        if f.infrequent {
            out.infrequent.insert(class);
        }
    }
    Ok(out)
}

/// Exact L1 distance to the nearest seed, with the class of that seed.
///
/// Two-pass 4-neighbour chamfer; unreachable pixels get `u32::MAX`.
pub fn l1_distance_transform(seeds: &Raster<Option<u16>>) -> Raster<(u32, u16)> {
    let (w, h) = (seeds.width(), seeds.height());
    let mut out = seeds.map(|s| match s {
        Some(c) => (0u32, *c),
        None => (u32::MAX, 0u16),
    });
    let relax = |cur: (u32, u16), nb: (u32, u16)| {
        if nb.0 != u32::MAX && nb.0 + 1 < cur.0 {
            (nb.0 + 1, nb.1)
        } else {
            cur
        }
    };
    for r in 0..h {
        for c in 0..w {
            let mut cur = *out.get(r, c);
            if r > 0 {
                cur = relax(cur, *out.get(r - 1, c));
            }
            if c > 0 {
                cur = relax(cur, *out.get(r, c - 1));
            }
            out.set(r, c, cur);
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let mut cur = *out.get(r, c);
            if r + 1 < h {
                cur = relax(cur, *out.get(r + 1, c));
            }
            if c + 1 < w {
                cur = relax(cur, *out.get(r, c + 1));
            }
            out.set(r, c, cur);
        }
    }
    out
}

/// Class weights with a linear falloff around infrequent classes.
///
/// A frequent pixel at L1 distance `D` from the nearest infrequent pixel uses
/// `d = D - 1` (so the first ring outside the boundary has `d = 0`) and gets
/// `((radius - d) * w_infreq + d * w_freq) / radius` for `d < radius`, else
/// `w_freq`. Void pixels weigh 1.
pub fn boundary_blend_weights(labels: &PanopticBevMap, weights: &ClassWeights, radius: u32) -> Result<WeightMap> {
    if radius == 0 {
        return Err(Error::InvalidInput("blend radius must be >= 1".into()));
    }
    let weight_of = |c: u16| -> Result<f64> {
        if c == VOID {
            return Ok(1.0);
        }
        weights.weights.get(&c).copied().ok_or(Error::UnknownClass(c))
    };
    for &c in labels.class.iter() {
        weight_of(c)?;
    }
    let seeds = labels.class.map(|&c| weights.infrequent.contains(&c).then_some(c));
    let dist = l1_distance_transform(&seeds);
    let radius_f = f64::from(radius);
    let mut data = Vec::with_capacity(labels.class.len());
    for (&c, &(dist_px, nearest)) in labels.class.iter().zip(dist.iter()) {
        let own = weight_of(c)?;
        let w = if weights.infrequent.contains(&c) || dist_px == u32::MAX {
            own
        } else {
            let d = dist_px - 1;
            if d >= radius {
                own
            } else {
                let w_inf = weight_of(nearest)?;
                if d == 0 {
                    w_inf
                } else {
                    let d = f64::from(d);
                    ((radius_f - d) * w_inf + d * own) / radius_f
                }
            }
        };
        data.push(w);
    }
    let cap = weights.weights.values().copied().fold(1.0, f64::max);
    Ok(WeightMap {
        w: Raster::from_vec(labels.width(), labels.height(), data)?,
        kind: WeightKind::Class,
        cap,
    })
}
