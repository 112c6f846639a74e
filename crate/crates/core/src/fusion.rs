//! Merging semantic and instance predictions into panoptic logits, argmax
//! resolution and the panoptic cross-entropy loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{CategoryTable, PanopticBevMap, VOID};
use crate::raster::{ChannelRaster, Raster};
use crate::weighting::WeightMap;

/// Instance-channel logit outside the instance's box.
pub const OUTSIDE_BOX_LOGIT: f64 = -1.0e4;

pub const DEFAULT_MIN_SEGMENT_PX: usize = 16;

/// Per-pixel semantic logits; channels are `stuff_classes` then `thing_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLogits {
    pub logits: ChannelRaster,
    pub stuff_classes: Vec<u16>,
    pub thing_classes: Vec<u16>,
    pub categories: Arc<CategoryTable>,
}

impl SemanticLogits {
    pub fn new(
        logits: ChannelRaster,
        stuff_classes: Vec<u16>,
        thing_classes: Vec<u16>,
        categories: Arc<CategoryTable>,
    ) -> Result<Self> {
        let s = Self {
            logits,
            stuff_classes,
            thing_classes,
            categories,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.channels() != self.stuff_classes.len() + self.thing_classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels for {} stuff and {} thing classes",
                self.logits.channels(),
                self.stuff_classes.len(),
                self.thing_classes.len()
            )));
        }
        for &c in &self.stuff_classes {
            let cat = self.categories.get(c).ok_or(Error::UnknownClass(c))?;
            if cat.is_thing {
                return Err(Error::InvalidInput(format!("{} listed as stuff", cat.name)));
            }
        }
        for &c in &self.thing_classes {
            let cat = self.categories.get(c).ok_or(Error::UnknownClass(c))?;
            if !cat.is_thing {
                return Err(Error::InvalidInput(format!("{} listed as thing", cat.name)));
            }
        }
        if self.logits.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("semantic logits are not finite".into()));
        }
        Ok(())
    }

    pub fn thing_channel(&self, class: u16) -> Option<usize> {
        self.thing_classes
            .iter()
            .position(|&c| c == class)
            .map(|j| self.stuff_classes.len() + j)
    }
}

/// Axis-aligned pixel box, half-open: rows `row0..row1`, cols `col0..col1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let r0 = self.row0.max(other.row0);
        let r1 = self.row1.min(other.row1);
        let c0 = self.col0.max(other.col0);
        let c1 = self.col1.min(other.col1);
        let inter = r1.saturating_sub(r0) * c1.saturating_sub(c0);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedInstance {
    /// Mask logits over the full raster.
    pub mask: Raster<f64>,
    pub class_id: u16,
    pub confidence: f64,
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct InstanceSet {
    pub instances: Vec<PredictedInstance>,
}

impl InstanceSet {
    pub fn validate(&self, categories: &CategoryTable) -> Result<()> {
        for (j, inst) in self.instances.iter().enumerate() {
            if !(0.0..=1.0).contains(&inst.confidence) {
                return Err(Error::InvalidInput(format!(
                    "instance {j} confidence {} outside [0, 1]",
                    inst.confidence
                )));
            }
            if !categories.is_thing(inst.class_id) {
                return Err(Error::InvalidInput(format!(
                    "instance {j} has non-thing class {}",
                    inst.class_id
                )));
            }
            if inst.mask.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("instance {j} mask is not finite")));
            }
        }
        Ok(())
    }
}

/// Drops instances below `score_thr`, then greedy NMS by descending confidence
/// suppressing boxes with IoU above `nms_thr`. Ties keep input order.
pub fn filter_instances(set: &InstanceSet, score_thr: f64, nms_thr: f64) -> Result<InstanceSet> {
    for t in [score_thr, nms_thr] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("threshold {t} outside [0, 1]")));
        }
    }
    let mut order: Vec<usize> = (0..set.instances.len())
        .filter(|&i| set.instances[i].confidence >= score_thr)
        .collect();
    order.sort_by(|&a, &b| set.instances[b].confidence.total_cmp(&set.instances[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &set.instances[i].bbox;
        if kept.iter().all(|&k| set.instances[k].bbox.iou(b) <= nms_thr) {
            kept.push(i);
        }
    }
    Ok(InstanceSet {
        instances: kept.into_iter().map(|i| set.instances[i].clone()).collect(),
    })
}

/// Channels: `stuff_classes`, then one per instance with class
/// `instance_classes[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticLogits {
    pub logits: ChannelRaster,
    pub stuff_classes: Vec<u16>,
    pub instance_classes: Vec<u16>,
    pub categories: Arc<CategoryTable>,
}

impl PanopticLogits {
    pub fn num_stuff(&self) -> usize {
        self.stuff_classes.len()
    }

    pub fn num_instances(&self) -> usize {
        self.instance_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.channels() != self.num_stuff() + self.num_instances() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels for {} stuff classes and {} instances",
                self.logits.channels(),
                self.num_stuff(),
                self.num_instances()
            )));
        }
        if self.logits.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("panoptic logits are not finite".into()));
        }
        Ok(())
    }

    /// `(class, is_instance)` of a channel.
    pub fn channel_class(&self, ch: usize) -> (u16, bool) {
        if ch < self.num_stuff() {
            (self.stuff_classes[ch], false)
        } else {
            (self.instance_classes[ch - self.num_stuff()], true)
        }
    }
}

/// Stuff channels copied; instance channel `j` is the mask logit plus the
/// semantic logit of the instance's class inside its box, and
/// [`OUTSIDE_BOX_LOGIT`] elsewhere.
pub fn merge_logits(sem: &SemanticLogits, inst: &InstanceSet) -> Result<PanopticLogits> {
    sem.validate()?;
    inst.validate(&sem.categories)?;
    let (w, h) = (sem.logits.width(), sem.logits.height());
    let ns = sem.stuff_classes.len();
    let mut data = Vec::with_capacity((ns + inst.instances.len()) * w * h);
    for ch in 0..ns {
        data.extend_from_slice(sem.logits.plane(ch));
    }
    for (j, p) in inst.instances.iter().enumerate() {
        if p.mask.width() != w || p.mask.height() != h {
            return Err(Error::ShapeMismatch(format!("instance {j} mask size differs from logits")));
        }
        let ch = sem
            .thing_channel(p.class_id)
            .ok_or_else(|| Error::InvalidInput(format!("instance {j} class {} has no semantic channel", p.class_id)))?;
        let plane = sem.logits.plane(ch);
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                data.push(if p.bbox.contains(row, col) {
                    p.mask.as_slice()[i] + plane[i]
                } else {
                    OUTSIDE_BOX_LOGIT
                });
            }
        }
    }
    let pl = PanopticLogits {
        logits: ChannelRaster::from_vec(w, h, ns + inst.instances.len(), data)?,
        stuff_classes: sem.stuff_classes.clone(),
        instance_classes: inst.instances.iter().map(|p| p.class_id).collect(),
        categories: sem.categories.clone(),
    };
    Ok(pl)
}

/// Index of the first maximal value.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Winning channel per pixel.
pub fn argmax_channels(pl: &PanopticLogits) -> Raster<usize> {
    let l = &pl.logits;
    Raster::from_fn(l.width(), l.height(), |row, col| {
        argmax((0..l.channels()).map(|ch| l.get(ch, row, col)))
    })
}

/// Per-pixel argmax; instance segments under `min_segment_px` pixels fall
/// back to the best stuff channel. Surviving instances are numbered from 1
/// in channel order.
pub fn resolve_panoptic(pl: &PanopticLogits, min_segment_px: usize) -> Result<PanopticBevMap> {
    pl.validate()?;
    let ns = pl.num_stuff();
    if ns == 0 && min_segment_px > 0 && pl.num_instances() > 0 {
        // Nothing to fall back to; keep every segment.
        return resolve_panoptic(pl, 0);
    }
    let l = &pl.logits;
    let (w, h) = (l.width(), l.height());
    let win = argmax_channels(pl);
    let mut counts = vec![0usize; l.channels()];
    for &ch in win.iter() {
        counts[ch] += 1;
    }
    let mut index = vec![0u16; pl.num_instances()];
    let mut next = 0u32;
    for j in 0..pl.num_instances() {
        if counts[ns + j] > 0 && counts[ns + j] >= min_segment_px {
            next += 1;
            index[j] = u16::try_from(next).map_err(|_| Error::InvalidInput("too many instances".into()))?;
        }
    }
    let mut class = Raster::filled(w, h, VOID);
    let mut instance = Raster::filled(w, h, 0u16);
    for row in 0..h {
        for col in 0..w {
            let ch = *win.get(row, col);
            let (c, i) = if ch < ns {
                (pl.stuff_classes[ch], 0)
            } else if index[ch - ns] > 0 {
                (pl.instance_classes[ch - ns], index[ch - ns])
            } else {
                let s = argmax((0..ns).map(|k| l.get(k, row, col)));
                (pl.stuff_classes[s], 0)
            };
            class.set(row, col, c);
            instance.set(row, col, i);
        }
    }
    PanopticBevMap::from_parts(class, instance, pl.categories.clone())
}

/// Target channel per pixel; `None` for void and for ground-truth instances
/// left unmatched.
///
/// Ground-truth instances are matched one-to-one to instance channels of the
/// same class, maximizing total IoU between the ground-truth segment and the
/// channel's argmax segment; zero-IoU pairs are not matches.
pub fn build_target(pl: &PanopticLogits, gt: &PanopticBevMap) -> Result<Raster<Option<usize>>> {
    pl.validate()?;
    let (w, h) = (pl.logits.width(), pl.logits.height());
    if gt.width() != w || gt.height() != h {
        return Err(Error::ShapeMismatch("ground truth and logits differ in size".into()));
    }
    let ns = pl.num_stuff();
    let win = argmax_channels(pl);

    let mut gt_segments: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for (&c, &i) in gt.class.iter().zip(gt.instance.iter()) {
        if c != VOID && gt.categories.is_thing(c) {
            let n = gt_segments.len();
            gt_segments.entry((c, i)).or_insert(n);
        }
    }
    let keys: Vec<(u16, u16)> = gt_segments.keys().copied().collect();
    let slot: BTreeMap<(u16, u16), usize> = keys.iter().enumerate().map(|(k, key)| (*key, k)).collect();
    let ni = pl.num_instances();
    let mut inter = vec![vec![0usize; ni]; keys.len()];
    let mut gt_area = vec![0usize; keys.len()];
    let mut pred_area = vec![0usize; ni];
    for (p, &ch) in win.iter().enumerate() {
        if ch >= ns {
            pred_area[ch - ns] += 1;
        }
        let key = (gt.class.as_slice()[p], gt.instance.as_slice()[p]);
        if let Some(&g) = slot.get(&key) {
            gt_area[g] += 1;
            if ch >= ns {
                inter[g][ch - ns] += 1;
            }
        }
    }
    let iou: Vec<Vec<f64>> = (0..keys.len())
        .map(|g| {
            (0..ni)
                .map(|j| {
                    if pl.instance_classes[j] != keys[g].0 || inter[g][j] == 0 {
                        0.0
                    } else {
                        inter[g][j] as f64 / (gt_area[g] + pred_area[j] - inter[g][j]) as f64
                    }
                })
                .collect()
        })
        .collect();
    let assignment = max_weight_matching(&iou);

    let mut target = Raster::filled(w, h, None);
    for p in 0..w * h {
        let c = gt.class.as_slice()[p];
        if c == VOID {
            continue;
        }
        let t = if gt.categories.is_thing(c) {
            let g = slot[&(c, gt.instance.as_slice()[p])];
            assignment[g].filter(|&j| iou[g][j] > 0.0).map(|j| ns + j)
        } else {
            Some(pl.stuff_classes.iter().position(|&s| s == c).ok_or(Error::UnknownClass(c))?)
        };
        target.as_mut_slice()[p] = t;
    }
    Ok(target)
}

/// Weighted softmax cross-entropy averaged over pixels with a target, and
/// its gradient with respect to the logits.
pub fn cross_entropy(
    pl: &PanopticLogits,
    target: &Raster<Option<usize>>,
    weights: Option<&WeightMap>,
) -> Result<(f64, ChannelRaster)> {
    pl.validate()?;
    let l = &pl.logits;
    let (w, h, nc) = (l.width(), l.height(), l.channels());
    if target.width() != w || target.height() != h {
        return Err(Error::ShapeMismatch("target and logits differ in size".into()));
    }
    if let Some(wm) = weights {
        if wm.w.width() != w || wm.w.height() != h {
            return Err(Error::ShapeMismatch("weights and logits differ in size".into()));
        }
    }
    let valid = target.iter().filter(|t| t.is_some()).count();
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let n = valid as f64;
    let mut grad = ChannelRaster::zeros(w, h, nc);
    let mut total = 0.0;
    let mut z = vec![0.0; nc];
    for p in 0..w * h {
        let Some(t) = target.as_slice()[p] else { continue };
        if t >= nc {
            return Err(Error::InvalidInput(format!("target channel {t} out of range")));
        }
        let wp = weights.map_or(1.0, |wm| wm.w.as_slice()[p]);
        let mut m = f64::NEG_INFINITY;
        for (ch, zc) in z.iter_mut().enumerate() {
            *zc = l.plane(ch)[p];
            m = m.max(*zc);
        }
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += wp * (lse - z[t]);
        for (ch, zc) in z.iter().enumerate() {
            let prob = (zc - lse).exp();
            let d = if ch == t { prob - 1.0 } else { prob };
            grad.plane_mut(ch)[p] = wp * d / n;
        }
    }
    Ok((total / n, grad))
}

/// Loss of `pl` against the ground-truth map.
pub fn panoptic_cross_entropy(pl: &PanopticLogits, gt: &PanopticBevMap, weights: Option<&WeightMap>) -> Result<f64> {
    let target = build_target(pl, gt)?;
    Ok(cross_entropy(pl, &target, weights)?.0)
}

/// Maximum-weight one-to-one assignment of rows to columns (Hungarian
/// method on negated weights). Returns the column of each row.
pub fn max_weight_matching(weight: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weight.len();
    let cols = weight.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| weight[r][c]).collect()).collect();
        let by_col = max_weight_matching(&t);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // Potentials-based O(n^2 m) assignment, 1-indexed with a virtual column 0.
    let cost = |r: usize, c: usize| -weight[r - 1][c - 1];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut c0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[c0] = true;
            let r0 = owner[c0];
            let mut delta = f64::INFINITY;
            let mut c1 = 0;
            for c in 1..=cols {
                if !used[c] {
                    let cur = cost(r0, c) - u[r0] - v[c];
                    if cur < minv[c] {
                        minv[c] = cur;
                        way[c] = c0;
                    }
                    if minv[c] < delta {
                        delta = minv[c];
                        c1 = c;
                    }
                }
            }
            for c in 0..=cols {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            c0 = c1;
            if owner[c0] == 0 {
                break;
            }
        }
        loop {
            let c1 = way[c0];
            owner[c0] = owner[c1];
            c0 = c1;
            if c0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for c in 1..=cols {
        if owner[c] > 0 {
            out[owner[c] - 1] = Some(c - 1);
        }
    }
    out
}
