//! Pipeline configuration: dataset presets, TOML files and overrides.
//!
//! Values resolve as command-line override > config file > preset. The
//! effective configuration serializes back to TOML, and its SHA-256 is the
//! config hash recorded next to every output.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::io::{read_text, sha256_hex};
use crate::labels::{InstanceFusionParams, LabelGenParams, MorphKernelTable};
use crate::panoptic::CategoryTable;
use crate::weighting::{DEFAULT_BLEND_RADIUS, DEFAULT_LAMBDA_S};

pub const SCHEMA_VERSION: u32 = 1;

/// Value of a `key=value` override.
pub type OverrideValue = toml::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Kitti360,
    Nuscenes,
    Custom,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "kitti360" => Ok(Preset::Kitti360),
            "nuscenes" => Ok(Preset::Nuscenes),
            "custom" => Ok(Preset::Custom),
            _ => Err(Error::InvalidInput(format!(
                "unknown preset {name:?} (expected kitti360, nuscenes or custom)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Cells along z (image rows).
    pub rows: usize,
    /// Cells along x (image columns).
    pub cols: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub x_min: f64,
    pub z_min: f64,
}

/// Square structuring element sizes, listed for St_T, St_S, Veg, Th_V, Th_P.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphologyConfig {
    pub dilation: [usize; 5],
    pub erosion: [usize; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccumulationConfig {
    /// Frames on either side of the target.
    pub window: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    pub enabled: bool,
    /// A cell counts as occluded only when it is this much (meters) lower
    /// than the highest cell before it on the ray.
    pub height_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancesConfig {
    pub box_margin_cells: usize,
}

/// Output window as a sub-grid of the working grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    pub lambda_s: f64,
    pub radius: u32,
    /// Height `y` (camera frame, meters) at which sensitivity is evaluated.
    /// Defaults to the ground plane, `y = camera_height`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_height: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Recorded for completeness; no proposal network runs here.
    pub rpn_nms_threshold: f64,
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub min_segment_px: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub preset: Preset,
    /// Camera rig JSON, relative to the config file. Presets fall back to
    /// their built-in rig.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<String>,
    pub grid: GridConfig,
    pub morphology: MorphologyConfig,
    pub accumulation: AccumulationConfig,
    pub occlusion: OcclusionConfig,
    pub instances: InstancesConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropConfig>,
    pub weighting: WeightingConfig,
    pub fusion: FusionConfig,
    /// Directory holding the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        // Camera at the bottom center of the grid.
        let (rows, cols, resolution, x_min, nms, score) = match p {
            Preset::Kitti360 | Preset::Custom => (768, 704, 0.074, -26.048, 0.3, 0.1),
            Preset::Nuscenes => (896, 768, 0.077, -29.568, 0.2, 0.3),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            preset: p,
            rig: None,
            grid: GridConfig {
                rows,
                cols,
                resolution,
                x_min,
                z_min: 0.0,
            },
            morphology: MorphologyConfig {
                dilation: [3, 9, 9, 9, 7],
                erosion: [3, 5, 3, 5, 5],
            },
            accumulation: AccumulationConfig { window: 50 },
            occlusion: OcclusionConfig {
                enabled: true,
                height_margin: 0.2,
            },
            instances: InstancesConfig {
                box_margin_cells: InstanceFusionParams::default().box_margin_cells,
            },
            crop: None,
            weighting: WeightingConfig {
                lambda_s: DEFAULT_LAMBDA_S,
                radius: DEFAULT_BLEND_RADIUS,
                plane_height: None,
            },
            fusion: FusionConfig {
                rpn_nms_threshold: 0.7,
                nms_threshold: nms,
                score_threshold: score,
                min_segment_px: crate::fusion::DEFAULT_MIN_SEGMENT_PX,
            },
            base_dir: None,
        }
    }

    /// Resolves preset, optional file and overrides (`dotted.key`, value).
    ///
    /// The preset is `preset` if given, else the file's `preset` key, else
    /// kitti360. File tables are merged key by key over the preset.
    pub fn resolve(
        preset: Option<Preset>,
        file: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<Self> {
        let (file_value, base_dir) = match file {
            Some(path) => {
                let text = read_text(path)?;
                let v: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(path, e))?;
                (Some(v), path.parent().map(Path::to_path_buf))
            }
            None => (None, None),
        };
        let file_preset = match file_value.as_ref().and_then(|t| t.get("preset")) {
            Some(toml::Value::String(s)) => Some(Preset::parse(s)?),
            Some(_) => return Err(Error::InvalidInput("preset must be a string".into())),
            None => None,
        };
        let chosen = preset.or(file_preset).unwrap_or(Preset::Kitti360);
        let mut value = toml::Table::try_from(Self::preset(chosen)).map_err(|e| Error::Invariant(e.to_string()))?;
        if let Some(f) = file_value {
            merge(&mut value, f);
        }
        for (key, v) in overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        value.insert("preset".into(), toml::Value::String(preset_name(chosen).into()));
        let source = file.map_or_else(|| "configuration".to_string(), |p| p.display().to_string());
        let mut cfg: PipelineConfig =
            toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::parse(&source, e))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.grid_spec()?;
        self.kernels()?;
        if let Some(c) = &self.crop {
            self.crop_spec()?.expect("crop present");
            if c.rows == 0 || c.cols == 0 {
                return Err(Error::CropOutOfBounds("crop must be non-empty".into()));
            }
        }
        let w = &self.weighting;
        if !(w.lambda_s > 0.0 && w.lambda_s.is_finite()) {
            return Err(Error::NonPositiveLambda(w.lambda_s));
        }
        if w.radius == 0 {
            return Err(Error::InvalidInput("weighting.radius must be >= 1".into()));
        }
        let f = &self.fusion;
        for (name, v) in [
            ("rpn_nms_threshold", f.rpn_nms_threshold),
            ("nms_threshold", f.nms_threshold),
            ("score_threshold", f.score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("fusion.{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.occlusion.height_margin >= 0.0) {
            return Err(Error::InvalidInput("occlusion.height_margin must be >= 0".into()));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<BevGridSpec> {
        let g = &self.grid;
        BevGridSpec::new(g.cols, g.rows, g.resolution, g.x_min, g.z_min)
    }

    pub fn crop_spec(&self) -> Result<Option<BevGridSpec>> {
        let Some(c) = &self.crop else {
            return Ok(None);
        };
        let g = self.grid_spec()?;
        if c.row0 + c.rows > g.cells_z || c.col0 + c.cols > g.cells_x {
            return Err(Error::CropOutOfBounds(format!(
                "crop {}x{} at ({}, {}) exceeds the {}x{} grid",
                c.rows, c.cols, c.row0, c.col0, g.cells_z, g.cells_x
            )));
        }
        let res = g.resolution;
        let z_max = g.z_max - c.row0 as f64 * res;
        BevGridSpec::new(
            c.cols,
            c.rows,
            res,
            g.x_min + c.col0 as f64 * res,
            z_max - c.rows as f64 * res,
        )
        .map(Some)
    }

    pub fn kernels(&self) -> Result<MorphKernelTable> {
        MorphKernelTable::from_lists(self.morphology.dilation, self.morphology.erosion)
    }

    pub fn rig(&self) -> Result<CameraRig> {
        match (&self.rig, self.preset) {
            (Some(path), _) => {
                let p = match &self.base_dir {
                    Some(base) => base.join(path),
                    None => PathBuf::from(path),
                };
                CameraRig::from_json(&read_text(&p)?).map_err(|e| match e {
                    Error::Parse { message, .. } => Error::parse(&p, message),
                    other => other,
                })
            }
            (None, Preset::Kitti360) => Ok(CameraRig::kitti360()),
            (None, Preset::Nuscenes) => Ok(CameraRig::nuscenes()),
            (None, Preset::Custom) => Err(Error::MissingInput("custom preset needs a rig path".into())),
        }
    }

    pub fn label_params(&self, categories: Arc<CategoryTable>) -> Result<LabelGenParams> {
        Ok(LabelGenParams {
            rig: self.rig()?,
            grid: self.grid_spec()?,
            crop: self.crop_spec()?,
            kernels: self.kernels()?,
            window: Some(self.accumulation.window),
            occlusion: self.occlusion.enabled,
            height_margin: self.occlusion.height_margin,
            fusion: InstanceFusionParams {
                box_margin_cells: self.instances.box_margin_cells,
            },
            categories,
        })
    }

    pub fn plane_height(&self) -> Result<f64> {
        match self.weighting.plane_height {
            Some(h) => Ok(h),
            None => Ok(self.rig()?.extrinsics.camera_height),
        }
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Kitti360 => "kitti360",
        Preset::Nuscenes => "nuscenes",
        Preset::Custom => "custom",
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::InvalidInput(format!("bad config key {key:?}")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => return Err(Error::InvalidInput(format!("config key {key:?} crosses a non-table value"))),
        };
    }
    Ok(())
}

/// Parses `key=value`, reading the value as a TOML literal and falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
