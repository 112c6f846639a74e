//! On-disk formats: point clouds, poses, boxes, label images with sidecars,
//! float rasters with JSON headers, and preview images.
//!
//! Every writer goes through [`write_atomic`], so an interrupted run leaves
//! either the old file or the new one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{InstanceSet, PixelBox, PredictedInstance, SemanticLogits};
use crate::grid::BevGridSpec;
use crate::labels::{Box3D, EgoPose, LabeledPoint, LabeledPointCloud};
use crate::panoptic::{CategoryTable, PanopticBevMap};
use crate::raster::{ChannelRaster, Raster};
use crate::weighting::{WeightKind, WeightMap};

pub const CLOUD_MAGIC: [u8; 8] = *b"PBEVCLD\0";
pub const CLOUD_VERSION: u32 = 1;
const CLOUD_HEADER_LEN: usize = 16;
const CLOUD_RECORD_LEN: usize = 22;

/// Label pixels hold `class * LABEL_DIVISOR + instance`.
pub const LABEL_DIVISOR: u32 = 1000;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames it into place, creating
/// parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))
}

/// Regular files directly inside `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Point clouds

pub fn encode_cloud(cloud: &LabeledPointCloud) -> Result<Vec<u8>> {
    let n = u32::try_from(cloud.points.len())
        .map_err(|_| Error::InvalidInput("too many points for one cloud file".into()))?;
    let mut out = Vec::with_capacity(CLOUD_HEADER_LEN + CLOUD_RECORD_LEN * cloud.points.len());
    out.extend_from_slice(&CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for p in &cloud.points {
        for v in p.position {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.class_id.to_le_bytes());
        out.extend_from_slice(&p.instance_id.to_le_bytes());
        out.extend_from_slice(&p.frame.to_le_bytes());
        out.push(u8::from(p.dynamic));
        out.push(0);
    }
    Ok(out)
}

pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<LabeledPointCloud> {
    if bytes.len() < CLOUD_HEADER_LEN || bytes[..8] != CLOUD_MAGIC {
        return Err(Error::parse(path, "not a point cloud file (bad magic)"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != CLOUD_VERSION {
        return Err(Error::parse(path, format!("unsupported cloud version {version}")));
    }
    let n = word(12) as usize;
    let body = &bytes[CLOUD_HEADER_LEN..];
    if body.len() != n * CLOUD_RECORD_LEN {
        return Err(Error::parse(
            path,
            format!("header says {n} points but body holds {} bytes", body.len()),
        ));
    }
    let mut points = Vec::with_capacity(n);
    for rec in body.chunks_exact(CLOUD_RECORD_LEN) {
        let f = |at: usize| f64::from(f32::from_le_bytes(rec[at..at + 4].try_into().expect("4 bytes")));
        let h = |at: usize| u16::from_le_bytes(rec[at..at + 2].try_into().expect("2 bytes"));
        let dynamic = match rec[20] {
            0 => false,
            1 => true,
            v => return Err(Error::parse(path, format!("dynamic flag must be 0 or 1, got {v}"))),
        };
        points.push(LabeledPoint {
            position: [f(0), f(4), f(8)],
            class_id: h(12),
            instance_id: h(14),
            frame: u32::from_le_bytes(rec[16..20].try_into().expect("4 bytes")),
            dynamic,
        });
    }
    Ok(LabeledPointCloud::new(points))
}

#[derive(Deserialize)]
struct CsvPoint {
    x: f32,
    y: f32,
    z: f32,
    class: u16,
    instance: u16,
    frame: u32,
    dynamic: u8,
}

/// CSV with header `x,y,z,class,instance,frame,dynamic` (an optional
/// trailing `pad` column is ignored).
pub fn parse_cloud_csv(text: &str, path: &Path) -> Result<LabeledPointCloud> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut points = Vec::new();
    for row in reader.deserialize::<CsvPoint>() {
        let r = row.map_err(|e| Error::parse(path, e))?;
        if r.dynamic > 1 {
            return Err(Error::parse(path, format!("dynamic flag must be 0 or 1, got {}", r.dynamic)));
        }
        points.push(LabeledPoint {
            position: [f64::from(r.x), f64::from(r.y), f64::from(r.z)],
            class_id: r.class,
            instance_id: r.instance,
            frame: r.frame,
            dynamic: r.dynamic == 1,
        });
    }
    Ok(LabeledPointCloud::new(points))
}

/// Loads a `.bin` or `.csv` cloud.
pub fn load_cloud(path: &Path) -> Result<LabeledPointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => parse_cloud_csv(&read_text(path)?, path),
        _ => decode_cloud(&read_bytes(path)?, path),
    }
}

// ---------------------------------------------------------------------------
// Poses and boxes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub frame: u32,
    /// Row-major 4x4 sensor-to-reference transform.
    pub matrix: [f64; 16],
}

impl PoseRecord {
    pub fn from_pose(p: &EgoPose) -> Self {
        let mut matrix = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                matrix[r * 4 + c] = p.matrix[(r, c)];
            }
        }
        Self { frame: p.frame, matrix }
    }

    pub fn to_pose(&self) -> Result<EgoPose> {
        EgoPose::new(self.frame, Matrix4::from_row_slice(&self.matrix))
    }
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<EgoPose>> {
    let records: Vec<PoseRecord> = serde_json::from_str(text).map_err(|e| Error::parse(path, e))?;
    records.iter().map(PoseRecord::to_pose).collect()
}

pub fn poses_to_json(poses: &[EgoPose]) -> String {
    let records: Vec<PoseRecord> = poses.iter().map(PoseRecord::from_pose).collect();
    serde_json::to_string_pretty(&records).expect("poses serialize") + "\n"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub frame: u32,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class: u16,
    pub instance: u16,
}

impl From<&Box3D> for BoxRecord {
    fn from(b: &Box3D) -> Self {
        Self {
            frame: b.frame,
            center: b.center,
            dims: b.dims,
            yaw: b.yaw,
            class: b.class_id,
            instance: b.instance_id,
        }
    }
}

impl From<&BoxRecord> for Box3D {
    fn from(r: &BoxRecord) -> Self {
        Box3D {
            center: r.center,
            dims: r.dims,
            yaw: r.yaw,
            class_id: r.class,
            instance_id: r.instance,
            frame: r.frame,
        }
    }
}

pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<Box3D>> {
    let records: Vec<BoxRecord> = serde_json::from_str(text).map_err(|e| Error::parse(path, e))?;
    let boxes: Vec<Box3D> = records.iter().map(Box3D::from).collect();
    for b in &boxes {
        b.validate()?;
    }
    Ok(boxes)
}

pub fn boxes_to_json(boxes: &[Box3D]) -> String {
    let records: Vec<BoxRecord> = boxes.iter().map(BoxRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("boxes serialize") + "\n"
}

// ---------------------------------------------------------------------------
// Label maps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSidecar {
    pub categories: CategoryTable,
    pub grid: Option<BevGridSpec>,
    pub config_hash: Option<String>,
}

/// 16-bit grayscale PNG of `class * 1000 + instance`.
pub fn encode_label_png(map: &PanopticBevMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(map.class.len());
    for (&c, &i) in map.class.iter().zip(map.instance.iter()) {
        let v = u32::from(c) * LABEL_DIVISOR + u32::from(i);
        if u32::from(i) >= LABEL_DIVISOR || v > u32::from(u16::MAX) {
            return Err(Error::InvalidInput(format!(
                "label (class {c}, instance {i}) does not fit the 16-bit encoding"
            )));
        }
        data.push(v as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, data).expect("buffer sized to map");
    png_bytes(&image::DynamicImage::ImageLuma16(img))
}

pub fn decode_label_png(bytes: &[u8], categories: Arc<CategoryTable>, path: &Path) -> Result<PanopticBevMap> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::parse(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::parse(
                path,
                format!("expected a 16-bit grayscale label image, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let class = Raster::from_vec(w, h, raw.iter().map(|&v| (u32::from(v) / LABEL_DIVISOR) as u16).collect())?;
    let instance = Raster::from_vec(w, h, raw.iter().map(|&v| (u32::from(v) % LABEL_DIVISOR) as u16).collect())?;
    let map = PanopticBevMap::from_parts(class, instance, categories)?;
    map.validate().map_err(|e| Error::parse(path, e))?;
    Ok(map)
}

/// Sidecar path for a label image: `frame.png` -> `frame.json`.
pub fn sidecar_path(label: &Path) -> PathBuf {
    label.with_extension("json")
}

pub fn save_label_map(path: &Path, map: &PanopticBevMap, config_hash: Option<&str>) -> Result<()> {
    write_atomic(path, &encode_label_png(map)?)?;
    let sidecar = LabelSidecar {
        categories: (*map.categories).clone(),
        grid: map.grid,
        config_hash: config_hash.map(str::to_string),
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// Loads a label image; the category table comes from the sidecar when one
/// exists, else the default table.
pub fn load_label_map(path: &Path) -> Result<PanopticBevMap> {
    let side = sidecar_path(path);
    let (categories, grid) = if side.exists() {
        let s: LabelSidecar = read_json(&side)?;
        (Arc::new(s.categories), s.grid)
    } else {
        (Arc::new(CategoryTable::bev_default()), None)
    };
    let mut map = decode_label_png(&read_bytes(path)?, categories, path)?;
    map.grid = grid;
    Ok(map)
}

// ---------------------------------------------------------------------------
// Float rasters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightHeader {
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub kind: WeightKind,
    pub cap: f64,
    pub grid: Option<BevGridSpec>,
    pub data: String,
}

pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn parse_f32(bytes: &[u8], expected: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected {expected} f32 values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect())
}

/// Writes `<stem>.f32`, `<stem>.json` and an 8-bit `<stem>.png` heat map.
pub fn save_weight_map(dir: &Path, stem: &str, map: &WeightMap, grid: Option<BevGridSpec>) -> Result<()> {
    let data = format!("{stem}.f32");
    write_atomic(&dir.join(&data), &f32_bytes(map.w.as_slice()))?;
    let header = WeightHeader {
        shape: [map.w.height(), map.w.width()],
        kind: map.kind,
        cap: map.cap,
        grid,
        data,
    };
    write_json(&dir.join(format!("{stem}.json")), &header)?;
    write_atomic(&dir.join(format!("{stem}.png")), &encode_heat_png(&map.w)?)
}

pub fn load_weight_map(header_path: &Path) -> Result<WeightMap> {
    let header: WeightHeader = read_json(header_path)?;
    let data_path = header_path.with_file_name(&header.data);
    let [rows, cols] = header.shape;
    let values = parse_f32(&read_bytes(&data_path)?, rows * cols, &data_path)?;
    Ok(WeightMap {
        w: Raster::from_vec(cols, rows, values)?,
        kind: header.kind,
        cap: header.cap,
    })
}

/// Grayscale preview scaled linearly between the raster's min and max.
pub fn encode_heat_png(r: &Raster<f64>) -> Result<Vec<u8>> {
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data: Vec<u8> = r.iter().map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8).collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(r.width() as u32, r.height() as u32, data).expect("buffer sized to raster");
    png_bytes(&image::DynamicImage::ImageLuma8(img))
}

pub fn encode_rgb_png(r: &Raster<[u8; 3]>) -> Result<Vec<u8>> {
    let data: Vec<u8> = r.iter().flat_map(|p| p.iter().copied()).collect();
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(r.width() as u32, r.height() as u32, data).expect("buffer sized to raster");
    png_bytes(&image::DynamicImage::ImageRgb8(img))
}

fn png_bytes(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Invariant(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

// ---------------------------------------------------------------------------
// Logits and instances

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsHeader {
    /// `[channels, rows, cols]`.
    pub shape: [usize; 3],
    pub stuff_classes: Vec<u16>,
    pub thing_classes: Vec<u16>,
    pub data: String,
}

pub fn load_semantic_logits(header_path: &Path, categories: Arc<CategoryTable>) -> Result<SemanticLogits> {
    let header: LogitsHeader = read_json(header_path)?;
    let [c, rows, cols] = header.shape;
    if c != header.stuff_classes.len() + header.thing_classes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {c} channels for {} stuff and {} thing classes",
            header_path.display(),
            header.stuff_classes.len(),
            header.thing_classes.len()
        )));
    }
    let data_path = header_path.with_file_name(&header.data);
    let values = parse_f32(&read_bytes(&data_path)?, c * rows * cols, &data_path)?;
    SemanticLogits::new(
        ChannelRaster::from_vec(cols, rows, c, values)?,
        header.stuff_classes,
        header.thing_classes,
        categories,
    )
}

pub fn save_semantic_logits(dir: &Path, stem: &str, sem: &SemanticLogits) -> Result<()> {
    let data = format!("{stem}.f32");
    write_atomic(&dir.join(&data), &f32_bytes(sem.logits.as_slice()))?;
    let header = LogitsHeader {
        shape: [sem.logits.channels(), sem.logits.height(), sem.logits.width()],
        stuff_classes: sem.stuff_classes.clone(),
        thing_classes: sem.thing_classes.clone(),
        data,
    };
    write_json(&dir.join(format!("{stem}.json")), &header)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub class: u16,
    pub confidence: f64,
    /// Half-open `[row0, col0, row1, col1]`.
    pub bbox: [usize; 4],
    /// Raw f32 mask logits, `rows * cols`, relative to the JSON file.
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancesDocument {
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub instances: Vec<InstanceRecord>,
}

pub fn load_instances(path: &Path) -> Result<InstanceSet> {
    let doc: InstancesDocument = read_json(path)?;
    let [rows, cols] = doc.shape;
    let mut instances = Vec::with_capacity(doc.instances.len());
    for rec in &doc.instances {
        let mask_path = path.with_file_name(&rec.mask);
        let values = parse_f32(&read_bytes(&mask_path)?, rows * cols, &mask_path)?;
        let [row0, col0, row1, col1] = rec.bbox;
        instances.push(PredictedInstance {
            mask: Raster::from_vec(cols, rows, values)?,
            class_id: rec.class,
            confidence: rec.confidence,
            bbox: PixelBox { row0, col0, row1, col1 },
        });
    }
    Ok(InstanceSet { instances })
}

pub fn save_instances(dir: &Path, stem: &str, set: &InstanceSet, rows: usize, cols: usize) -> Result<()> {
    let mut records = Vec::with_capacity(set.instances.len());
    for (j, inst) in set.instances.iter().enumerate() {
        let mask = format!("{stem}_{j:03}.f32");
        write_atomic(&dir.join(&mask), &f32_bytes(inst.mask.as_slice()))?;
        let b = inst.bbox;
        records.push(InstanceRecord {
            class: inst.class_id,
            confidence: inst.confidence,
            bbox: [b.row0, b.col0, b.row1, b.col1],
            mask,
        });
    }
    write_json(
        &dir.join(format!("{stem}.json")),
        &InstancesDocument {
            shape: [rows, cols],
            instances: records,
        },
    )
}

/// File hashes keyed by path relative to `root` (forward slashes).
pub fn hash_tree(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, sha256_hex(&read_bytes(f)?));
    }
    Ok(out)
}
