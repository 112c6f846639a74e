//! File-level drivers behind the command-line tool.
//!
//! Every command reads its inputs, runs the library and writes results under
//! an output directory. Nothing is written before all inputs validate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{
    filter_instances, merge_logits, panoptic_cross_entropy, resolve_panoptic, InstanceSet, PixelBox,
    PredictedInstance, SemanticLogits,
};
use crate::io::{
    boxes_to_json, encode_rgb_png, encode_cloud, hash_tree, list_files, load_cloud, load_instances,
    load_label_map, load_semantic_logits, load_weight_map, parse_boxes, parse_poses, poses_to_json, read_text,
    save_instances, save_label_map, save_semantic_logits, save_weight_map, sha256_hex, write_atomic, write_json,
};
use crate::labels::{generate_labels, FrameInputs};
use crate::metrics::{format_table, improvement_error_map, match_segments, ConfusionMatrix, PanopticScores, PqAccumulator};
use crate::panoptic::{CategoryTable, PanopticBevMap, VOID};
use crate::raster::{ChannelRaster, Raster};
use crate::synth::{gen_scene, SceneSpec};
use crate::weighting::{
    boundary_blend_weights, class_weights, sensitivity_map, sensitivity_weight, ClassFrequencyTable,
};

/// Sink for human-readable progress lines.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

pub fn frame_stem(frame: u32) -> String {
    format!("frame_{frame:06}")
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// labelgen

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: u32,
    pub file: String,
    pub sha256: String,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub config_hash: String,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub frames: Vec<FrameRecord>,
}

struct SceneInputs {
    inputs: FrameInputs,
    frames: Vec<u32>,
    files: Vec<PathBuf>,
}

/// Input layout: `clouds/*.bin|*.csv`, `poses.json`, optional `boxes.json`.
fn read_scene_inputs(input: &Path) -> Result<SceneInputs> {
    let clouds_dir = input.join("clouds");
    let mut cloud_files = Vec::new();
    if clouds_dir.is_dir() {
        cloud_files.extend(list_files(&clouds_dir, "bin")?);
        cloud_files.extend(list_files(&clouds_dir, "csv")?);
        cloud_files.sort();
    }
    let poses_path = input.join("poses.json");
    if cloud_files.is_empty() {
        if !input.is_dir() {
            return Err(Error::MissingInput(format!("{} is not a directory", input.display())));
        }
        return Err(Error::NoFrames);
    }
    if !poses_path.is_file() {
        return Err(Error::MissingInput(format!("{} not found", poses_path.display())));
    }
    let poses = parse_poses(&read_text(&poses_path)?, &poses_path)?;
    if poses.is_empty() {
        return Err(Error::NoFrames);
    }
    let boxes_path = input.join("boxes.json");
    let boxes = if boxes_path.is_file() {
        parse_boxes(&read_text(&boxes_path)?, &boxes_path)?
    } else {
        Vec::new()
    };
    let clouds = cloud_files.iter().map(|p| load_cloud(p)).collect::<Result<Vec<_>>>()?;
    let frames: BTreeSet<u32> = poses.iter().map(|p| p.frame).collect();
    let mut files = cloud_files;
    files.push(poses_path);
    if boxes_path.is_file() {
        files.push(boxes_path);
    }
    Ok(SceneInputs {
        inputs: FrameInputs {
            clouds,
            poses,
            boxes,
            target_frame: 0,
        },
        frames: frames.into_iter().collect(),
        files,
    })
}

/// Generates one label map per posed frame into `out/labels`, plus
/// `out/manifest.json`.
pub fn labelgen(cfg: &PipelineConfig, input: &Path, out: &Path, workers: usize, progress: Progress) -> Result<LabelManifest> {
    let scene = read_scene_inputs(input)?;
    let categories = Arc::new(CategoryTable::bev_default());
    let params = cfg.label_params(categories)?;
    let config_hash = cfg.hash();
    let inputs_hash = hash_tree(input, &scene.files)?;
    progress(&format!("labelgen: {} frames, {} workers", scene.frames.len(), workers.max(1)));

    let workers = workers.max(1).min(scene.frames.len());
    let chunks: Vec<&[u32]> = scene.frames.chunks(scene.frames.len().div_ceil(workers)).collect();
    let results: Vec<Result<Vec<(u32, PanopticBevMap, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                let scene = &scene;
                let params = &params;
                s.spawn(move || {
                    let mut done = Vec::with_capacity(chunk.len());
                    for &frame in chunk.iter() {
                        let t = Instant::now();
                        let mut inputs = scene.inputs.clone();
                        inputs.target_frame = frame;
                        let out = generate_labels(&inputs, params)?;
                        progress(&format!("labelgen: frame {frame} done"));
                        done.push((frame, out.map, t.elapsed().as_secs_f64() * 1e3));
                    }
                    Ok(done)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invariant("worker panicked".into()))))
            .collect()
    });
    let mut maps = Vec::new();
    for r in results {
        maps.extend(r?);
    }
    maps.sort_by_key(|m| m.0);

    let labels_dir = out.join("labels");
    let mut frames = Vec::with_capacity(maps.len());
    for (frame, map, millis) in &maps {
        let file = format!("labels/{}.png", frame_stem(*frame));
        let path = labels_dir.join(format!("{}.png", frame_stem(*frame)));
        save_label_map(&path, map, Some(&config_hash))?;
        frames.push(FrameRecord {
            frame: *frame,
            sha256: sha256_hex(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?),
            file,
            millis: *millis,
        });
    }
    let manifest = LabelManifest {
        config_hash,
        config: cfg.to_toml(),
        inputs: inputs_hash,
        frames,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// weights

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsReport {
    pub lambda_s: f64,
    pub cap: f64,
    pub min: f64,
    pub max: f64,
    /// Per-class weights when class weighting ran.
    pub class_weights: Option<BTreeMap<u16, f64>>,
    pub frames: Vec<String>,
}

/// Writes the sensitivity weight map over the output grid to
/// `out/weights/sensitivity.*`. With `class_weighting`, class frequencies
/// come from `labels/*.png`, and each frame gets `class_<stem>` and
/// `combined_<stem>` maps.
pub fn weights(
    cfg: &PipelineConfig,
    labels: Option<&Path>,
    class_weighting: bool,
    out: &Path,
    progress: Progress,
) -> Result<WeightsReport> {
    let label_maps = if class_weighting {
        let dir = labels.ok_or_else(|| Error::MissingInput("class weighting needs a label directory".into()))?;
        let files = if dir.is_dir() { list_files(dir, "png")? } else { Vec::new() };
        if files.is_empty() {
            return Err(Error::MissingInput(format!("no label images in {}", dir.display())));
        }
        files
            .iter()
            .map(|p| Ok((stem_of(p), load_label_map(p)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let grid = cfg.crop_spec()?.unwrap_or(cfg.grid_spec()?);
    let rig = cfg.rig()?;
    for (stem, m) in &label_maps {
        if m.width() != grid.cells_x || m.height() != grid.cells_z {
            return Err(Error::ShapeMismatch(format!(
                "labels/{stem}.png is {}x{}, grid is {}x{}",
                m.height(),
                m.width(),
                grid.cells_z,
                grid.cells_x
            )));
        }
    }
    let lambda = cfg.weighting.lambda_s;
    let s = sensitivity_map(&rig.intrinsics, &grid, cfg.plane_height()?)?;
    let w = sensitivity_weight(&s, lambda)?;
    let dir = out.join("weights");
    save_weight_map(&dir, "sensitivity", &w, Some(grid))?;
    progress("weights: sensitivity written");

    let mut report = WeightsReport {
        lambda_s: lambda,
        cap: w.cap,
        min: w.min(),
        max: w.max(),
        class_weights: None,
        frames: Vec::new(),
    };
    if class_weighting {
        let freq = ClassFrequencyTable::from_maps(label_maps.iter().map(|(_, m)| m));
        let cw = class_weights(&freq)?;
        for (stem, m) in &label_maps {
            let c = boundary_blend_weights(m, &cw, cfg.weighting.radius)?;
            save_weight_map(&dir, &format!("class_{stem}"), &c, Some(grid))?;
            save_weight_map(&dir, &format!("combined_{stem}"), &w.combine(&c)?, Some(grid))?;
            report.frames.push(stem.clone());
        }
        write_json(&dir.join("class_weights.json"), &cw)?;
        progress(&format!("weights: {} class maps written", label_maps.len()));
        report.class_weights = Some(cw.weights);
    }
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// fuse

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseFrame {
    pub frame: String,
    pub instances_kept: usize,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub frames: Vec<FuseFrame>,
    /// Mean loss over frames when ground truth was given.
    pub mean_loss: Option<f64>,
}

fn check_shape(path: &Path, w: usize, h: usize, expect_w: usize, expect_h: usize) -> Result<()> {
    if w != expect_w || h != expect_h {
        return Err(Error::ShapeMismatch(format!(
            "{} is {h}x{w}, expected {expect_h}x{expect_w}",
            path.display()
        )));
    }
    Ok(())
}

/// Fuses `semantic/<stem>.json` logits with `instances/<stem>.json` into
/// `out/panoptic/<stem>.png`. With `gt`, the weighted loss against
/// `gt/<stem>.png` goes to `out/loss.json`.
pub fn fuse(
    cfg: &PipelineConfig,
    semantic: &Path,
    instances: &Path,
    gt: Option<&Path>,
    weights: Option<&Path>,
    out: &Path,
    progress: Progress,
) -> Result<FuseReport> {
    let categories = Arc::new(CategoryTable::bev_default());
    let sem_files = if semantic.is_dir() {
        list_files(semantic, "json")?
    } else {
        return Err(Error::MissingInput(format!("{} is not a directory", semantic.display())));
    };
    if sem_files.is_empty() {
        return Err(Error::NoFrames);
    }
    let weight_map = weights.map(load_weight_map).transpose()?;

    let mut jobs = Vec::new();
    for sem_path in &sem_files {
        let stem = stem_of(sem_path);
        let sem = load_semantic_logits(sem_path, categories.clone())?;
        let (w, h) = (sem.logits.width(), sem.logits.height());
        let inst_path = instances.join(format!("{stem}.json"));
        if !inst_path.is_file() {
            return Err(Error::FrameMismatch(format!("no instances for {stem} ({})", inst_path.display())));
        }
        let inst = load_instances(&inst_path)?;
        for p in &inst.instances {
            check_shape(&inst_path, p.mask.width(), p.mask.height(), w, h)?;
        }
        let gt_map = match gt {
            Some(dir) => {
                let p = dir.join(format!("{stem}.png"));
                if !p.is_file() {
                    return Err(Error::FrameMismatch(format!("no ground truth for {stem} ({})", p.display())));
                }
                let m = load_label_map(&p)?;
                check_shape(&p, m.width(), m.height(), w, h)?;
                Some(m)
            }
            None => None,
        };
        if let (Some(wm), Some(wp)) = (&weight_map, weights) {
            check_shape(wp, wm.w.width(), wm.w.height(), w, h)?;
        }
        jobs.push((stem, sem, inst, gt_map));
    }

    let f = &cfg.fusion;
    let mut report = FuseReport {
        frames: Vec::new(),
        mean_loss: None,
    };
    for (stem, sem, inst, gt_map) in jobs {
        let kept = filter_instances(&inst, f.score_threshold, f.nms_threshold)?;
        let pl = merge_logits(&sem, &kept)?;
        let map = resolve_panoptic(&pl, f.min_segment_px)?;
        save_label_map(&out.join("panoptic").join(format!("{stem}.png")), &map, Some(&cfg.hash()))?;
        let loss = gt_map
            .as_ref()
            .map(|g| panoptic_cross_entropy(&pl, g, weight_map.as_ref()))
            .transpose()?;
        progress(&format!("fuse: {stem} done"));
        report.frames.push(FuseFrame {
            frame: stem,
            instances_kept: kept.instances.len(),
            loss,
        });
    }
    if gt.is_some() {
        let n = report.frames.len() as f64;
        report.mean_loss = Some(report.frames.iter().filter_map(|f| f.loss).sum::<f64>() / n);
        write_json(&out.join("loss.json"), &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub iou: Option<f64>,
}

/// Scores in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub miou: f64,
    pub per_class: BTreeMap<u16, ClassScore>,
}

fn paired_files(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    for d in [pred, gt] {
        if !d.is_dir() {
            return Err(Error::MissingInput(format!("{} is not a directory", d.display())));
        }
    }
    let names = |d: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(list_files(d, "png")?
            .into_iter()
            .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), p))
            .collect())
    };
    let p = names(pred)?;
    let g = names(gt)?;
    let unpaired: Vec<String> = p
        .keys()
        .filter(|k| !g.contains_key(*k))
        .map(|k| format!("{k} (prediction only)"))
        .chain(g.keys().filter(|k| !p.contains_key(*k)).map(|k| format!("{k} (ground truth only)")))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::FrameMismatch(unpaired.join(", ")));
    }
    if p.is_empty() {
        return Err(Error::NoFrames);
    }
    Ok(p.into_iter()
        .map(|(k, pp)| {
            let gp = g[&k].clone();
            (k, pp, gp)
        })
        .collect())
}

fn to_report(scores: &PanopticScores, cm: &ConfusionMatrix, frames: usize, categories: &CategoryTable) -> EvalReport {
    let miou = cm.miou();
    let per_class = scores
        .per_class
        .iter()
        .map(|(&c, t)| {
            (
                c,
                ClassScore {
                    name: categories.get(c).map_or_else(|| c.to_string(), |k| k.name.clone()),
                    pq: 100.0 * t.pq,
                    sq: 100.0 * t.sq,
                    rq: 100.0 * t.rq,
                    iou: miou.per_class.get(&c).map(|v| 100.0 * v),
                },
            )
        })
        .collect();
    let a = &scores.aggregate;
    EvalReport {
        frames,
        pq: 100.0 * a.all.pq,
        sq: 100.0 * a.all.sq,
        rq: 100.0 * a.all.rq,
        pq_things: 100.0 * a.things.pq,
        pq_stuff: 100.0 * a.stuff.pq,
        miou: 100.0 * miou.mean,
        per_class,
    }
}

/// Scores `pred/*.png` against `gt/*.png` paired by file name. Writes
/// `out/scores.json` and `out/scores.txt`; with `baseline`, also
/// `out/comparison/<name>.png` (green: only `pred` right, blue: only the
/// baseline right, red: both wrong).
pub fn eval(pred: &Path, gt: &Path, baseline: Option<&Path>, out: &Path, progress: Progress) -> Result<EvalReport> {
    let pairs = paired_files(pred, gt)?;
    if let Some(b) = baseline {
        paired_files(b, gt)?;
    }
    let mut acc = PqAccumulator::default();
    let mut cm: Option<ConfusionMatrix> = None;
    let mut categories = None;
    let mut comparisons = Vec::new();
    for (name, pp, gp) in &pairs {
        let p = load_label_map(pp)?;
        let g = load_label_map(gp)?;
        check_shape(pp, p.width(), p.height(), g.width(), g.height())?;
        acc.add(&match_segments(&p, &g)?);
        let m = ConfusionMatrix::from_rasters(&p.class, &g.class)?;
        match &mut cm {
            Some(c) => c.merge(&m),
            None => cm = Some(m),
        }
        if let Some(b) = baseline {
            let bp = b.join(name);
            let bm = load_label_map(&bp)?;
            check_shape(&bp, bm.width(), bm.height(), g.width(), g.height())?;
            let cmp = improvement_error_map(&p, &bm, &g)?;
            comparisons.push((name.clone(), cmp.map(|c| c.color())));
        }
        categories.get_or_insert_with(|| g.categories.clone());
        progress(&format!("eval: {name}"));
    }
    let categories = categories.expect("at least one pair");
    let cm = cm.expect("at least one pair");
    let scores = acc.scores(&categories);
    let report = to_report(&scores, &cm, pairs.len(), &categories);
    write_json(&out.join("scores.json"), &report)?;
    write_atomic(
        &out.join("scores.txt"),
        format_table(&scores, Some(&cm.miou()), &categories).as_bytes(),
    )?;
    for (name, img) in comparisons {
        write_atomic(&out.join("comparison").join(name), &encode_rgb_png(&img)?)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: SceneSpec,
    pub files: BTreeMap<String, String>,
}

/// One-hot style logits that reproduce `gt` exactly under fusion.
pub fn oracle_predictions(gt: &PanopticBevMap) -> Result<(SemanticLogits, InstanceSet)> {
    const HIGH: f64 = 4.0;
    let cats = gt.categories.clone();
    let stuff = cats.stuff_ids();
    let things = cats.thing_ids();
    let (w, h) = (gt.width(), gt.height());
    let mut logits = ChannelRaster::zeros(w, h, stuff.len() + things.len());
    for row in 0..h {
        for col in 0..w {
            let (c, _) = gt.get(row, col);
            if c == VOID {
                continue;
            }
            let ch = stuff
                .iter()
                .position(|&s| s == c)
                .or_else(|| things.iter().position(|&t| t == c).map(|j| stuff.len() + j));
            if let Some(ch) = ch {
                logits.set(ch, row, col, HIGH);
            }
        }
    }
    let mut boxes: BTreeMap<(u16, u16), PixelBox> = BTreeMap::new();
    for (row, col, &c) in gt.class.indexed() {
        let i = *gt.instance.get(row, col);
        if i == 0 || !cats.is_thing(c) {
            continue;
        }
        let b = boxes.entry((c, i)).or_insert(PixelBox {
            row0: row,
            col0: col,
            row1: row + 1,
            col1: col + 1,
        });
        b.row0 = b.row0.min(row);
        b.col0 = b.col0.min(col);
        b.row1 = b.row1.max(row + 1);
        b.col1 = b.col1.max(col + 1);
    }
    let instances = boxes
        .into_iter()
        .map(|((c, i), bbox)| PredictedInstance {
            mask: Raster::from_fn(w, h, |r, k| if gt.get(r, k) == (c, i) { HIGH } else { -HIGH }),
            class_id: c,
            confidence: 0.9,
            bbox,
        })
        .collect();
    Ok((SemanticLogits::new(logits, stuff, things, cats)?, InstanceSet { instances }))
}

/// Writes a synthetic scene in the formats `labelgen`, `fuse` and `eval`
/// read: `clouds/`, `poses.json`, `boxes.json`, `rig.json`, `config.toml`,
/// `gt/`, oracle `semantic/` and `instances/` for frame 0, and
/// `manifest.json` with every file hash.
pub fn synth(spec: &SceneSpec, out: &Path, progress: Progress) -> Result<SynthManifest> {
    let scene = gen_scene(spec)?;
    progress(&format!("synth: seed {} generated", spec.seed));
    let mut files = Vec::new();
    let mut put = |rel: &str, bytes: &[u8]| -> Result<()> {
        let p = out.join(rel);
        write_atomic(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    for (frame, cloud) in scene.clouds.iter().enumerate() {
        put(&format!("clouds/{}.bin", frame_stem(frame as u32)), &encode_cloud(cloud)?)?;
    }
    put("poses.json", poses_to_json(&scene.poses).as_bytes())?;
    put("boxes.json", boxes_to_json(&scene.boxes).as_bytes())?;
    put("rig.json", scene.rig.to_json().as_bytes())?;
    let g = &spec.grid;
    let mut cfg = PipelineConfig::preset(crate::config::Preset::Custom);
    cfg.rig = Some("rig.json".into());
    cfg.grid = crate::config::GridConfig {
        rows: g.cells_z,
        cols: g.cells_x,
        resolution: g.resolution,
        x_min: g.x_min,
        z_min: g.z_min,
    };
    cfg.accumulation.window = spec.trajectory.frames;
    put("config.toml", cfg.to_toml().as_bytes())?;
    let stem = frame_stem(0);
    let gt_path = out.join("gt").join(format!("{stem}.png"));
    save_label_map(&gt_path, &scene.gt, None)?;
    files.push(gt_path.clone());
    files.push(crate::io::sidecar_path(&gt_path));
    let (sem, inst) = oracle_predictions(&scene.gt)?;
    save_semantic_logits(&out.join("semantic"), &stem, &sem)?;
    save_instances(&out.join("instances"), &stem, &inst, g.cells_z, g.cells_x)?;
    files.extend(list_files(&out.join("semantic"), "json")?);
    files.extend(list_files(&out.join("semantic"), "f32")?);
    files.extend(list_files(&out.join("instances"), "json")?);
    files.extend(list_files(&out.join("instances"), "f32")?);
    let manifest = SynthManifest {
        seed: spec.seed,
        spec: spec.clone(),
        files: hash_tree(out, &files)?,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a scene spec from TOML; missing keys take their defaults.
pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    let spec: SceneSpec = toml::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))?;
    spec.validate()?;
    Ok(spec)
}
