//! Panoptic quality, mean IoU and pixelwise comparison of two predictions.
//!
//! Pixels that are void in the ground truth are ignored everywhere. A void
//! prediction on a valid pixel belongs to no predicted segment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panoptic::{CategoryTable, PanopticBevMap, VOID};
use crate::raster::Raster;

/// `(class, instance)`; stuff segments have instance 0.
pub type SegmentId = (u16, u16);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassMatch {
    /// `(pred, gt, iou)`.
    pub tp: Vec<(SegmentId, SegmentId, f64)>,
    pub fp: Vec<SegmentId>,
    pub fn_: Vec<SegmentId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentMatch {
    pub per_class: BTreeMap<u16, ClassMatch>,
}

fn check_pair(a: &PanopticBevMap, b: &PanopticBevMap) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::GridMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if *a.categories != *b.categories {
        return Err(Error::GridMismatch("category tables differ".into()));
    }
    Ok(())
}

/// Matches segments of equal class with IoU strictly above 0.5.
pub fn match_segments(pred: &PanopticBevMap, gt: &PanopticBevMap) -> Result<SegmentMatch> {
    check_pair(pred, gt)?;
    let mut pred_area: BTreeMap<SegmentId, usize> = BTreeMap::new();
    let mut gt_area: BTreeMap<SegmentId, usize> = BTreeMap::new();
    let mut inter: BTreeMap<(SegmentId, SegmentId), usize> = BTreeMap::new();
    for i in 0..gt.class.len() {
        let g = (gt.class.as_slice()[i], gt.instance.as_slice()[i]);
        if g.0 == VOID {
            continue;
        }
        *gt_area.entry(g).or_default() += 1;
        let p = (pred.class.as_slice()[i], pred.instance.as_slice()[i]);
        if p.0 == VOID {
            continue;
        }
        *pred_area.entry(p).or_default() += 1;
        if p.0 == g.0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }

    let mut out = SegmentMatch::default();
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    for (&(p, g), &n) in &inter {
        let union = pred_area[&p] + gt_area[&g] - n;
        let iou = n as f64 / union as f64;
        // More than half of the union forces uniqueness.
        if 2 * n > union {
            out.per_class.entry(g.0).or_default().tp.push((p, g, iou));
            matched_pred.insert(p);
            matched_gt.insert(g);
        }
    }
    for p in pred_area.keys() {
        if !matched_pred.contains(p) {
            out.per_class.entry(p.0).or_default().fp.push(*p);
        }
    }
    for g in gt_area.keys() {
        if !matched_gt.contains(g) {
            out.per_class.entry(g.0).or_default().fn_.push(*g);
        }
    }
    Ok(out)
}

/// Mergeable per-class tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqCounts {
    pub fn merge(&mut self, other: &PqCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }

    /// Computed as `sq * rq` so the decomposition holds exactly.
    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityTriple {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub all: QualityTriple,
    pub things: QualityTriple,
    pub stuff: QualityTriple,
    pub num_classes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PanopticScores {
    pub per_class: BTreeMap<u16, QualityTriple>,
    pub counts: BTreeMap<u16, PqCounts>,
    pub aggregate: AggregateScores,
}

/// Running PQ tallies over any number of frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    pub counts: BTreeMap<u16, PqCounts>,
}

impl PqAccumulator {
    pub fn add(&mut self, m: &SegmentMatch) {
        for (&class, cm) in &m.per_class {
            let c = self.counts.entry(class).or_default();
            c.merge(&PqCounts {
                tp: cm.tp.len(),
                fp: cm.fp.len(),
                fn_: cm.fn_.len(),
                iou_sum: cm.tp.iter().map(|t| t.2).sum(),
            });
        }
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (&class, c) in &other.counts {
            self.counts.entry(class).or_default().merge(c);
        }
    }

    /// Aggregates are unweighted means over every class seen in either map.
    pub fn scores(&self, categories: &CategoryTable) -> PanopticScores {
        let mut per_class = BTreeMap::new();
        let (mut all, mut things, mut stuff) = (Vec::new(), Vec::new(), Vec::new());
        for (&class, c) in &self.counts {
            let t = QualityTriple {
                pq: c.pq(),
                sq: c.sq(),
                rq: c.rq(),
            };
            per_class.insert(class, t);
            all.push(t);
            if categories.is_thing(class) {
                things.push(t);
            } else {
                stuff.push(t);
            }
        }
        let mean = |v: &[QualityTriple]| {
            if v.is_empty() {
                return QualityTriple::default();
            }
            let n = v.len() as f64;
            QualityTriple {
                pq: v.iter().map(|t| t.pq).sum::<f64>() / n,
                sq: v.iter().map(|t| t.sq).sum::<f64>() / n,
                rq: v.iter().map(|t| t.rq).sum::<f64>() / n,
            }
        };
        PanopticScores {
            per_class,
            counts: self.counts.clone(),
            aggregate: AggregateScores {
                all: mean(&all),
                things: mean(&things),
                stuff: mean(&stuff),
                num_classes: all.len(),
            },
        }
    }
}

pub fn pq_sq_rq(m: &SegmentMatch, categories: &CategoryTable) -> PanopticScores {
    let mut acc = PqAccumulator::default();
    acc.add(m);
    acc.scores(categories)
}

/// Scores one prediction against one ground truth.
pub fn panoptic_quality(pred: &PanopticBevMap, gt: &PanopticBevMap) -> Result<PanopticScores> {
    Ok(pq_sq_rq(&match_segments(pred, gt)?, &gt.categories))
}

/// Pixel counts indexed `[gt][pred]` over `classes`; column `classes.len()`
/// counts void predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub classes: Vec<u16>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_rasters(pred: &Raster<u16>, gt: &Raster<u16>) -> Result<Self> {
        if !pred.same_shape(gt) {
            return Err(Error::GridMismatch("class rasters differ in size".into()));
        }
        let classes: Vec<u16> = gt
            .iter()
            .chain(pred.iter())
            .copied()
            .filter(|&c| c != VOID)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n = classes.len();
        let idx: BTreeMap<u16, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut counts = vec![vec![0u64; n + 1]; n];
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == VOID {
                continue;
            }
            let col = if p == VOID { n } else { idx[&p] };
            counts[idx[&g]][col] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        let mut classes: BTreeSet<u16> = self.classes.iter().copied().collect();
        classes.extend(other.classes.iter().copied());
        let classes: Vec<u16> = classes.into_iter().collect();
        let n = classes.len();
        let idx: BTreeMap<u16, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut counts = vec![vec![0u64; n + 1]; n];
        for m in [&*self, other] {
            let k = m.classes.len();
            for (gi, row) in m.counts.iter().enumerate() {
                for (pi, &v) in row.iter().enumerate() {
                    let col = if pi == k { n } else { idx[&m.classes[pi]] };
                    counts[idx[&m.classes[gi]]][col] += v;
                }
            }
        }
        *self = Self { classes, counts };
    }

    /// IoU per class present in the ground truth, and their mean.
    pub fn miou(&self) -> MiouScores {
        let n = self.classes.len();
        let mut per_class = BTreeMap::new();
        for (i, &c) in self.classes.iter().enumerate() {
            let gt_total: u64 = self.counts[i].iter().sum();
            if gt_total == 0 {
                continue;
            }
            let tp = self.counts[i][i];
            let pred_total: u64 = (0..n).map(|g| self.counts[g][i]).sum();
            let union = gt_total + pred_total - tp;
            per_class.insert(c, tp as f64 / union as f64);
        }
        let mean = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        MiouScores { per_class, mean }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiouScores {
    pub per_class: BTreeMap<u16, f64>,
    pub mean: f64,
}

pub fn miou(pred_classes: &Raster<u16>, gt_classes: &Raster<u16>) -> Result<MiouScores> {
    Ok(ConfusionMatrix::from_rasters(pred_classes, gt_classes)?.miou())
}

/// Per-pixel outcome of comparing prediction `a` and `b` at class level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    Ignored,
    BothRight,
    /// `a` right, `b` wrong.
    Improvement,
    /// `a` wrong, `b` right.
    Regression,
    BothWrong,
}

impl Comparison {
    /// Green, blue, red; black otherwise.
    pub fn color(self) -> [u8; 3] {
        match self {
            Comparison::Improvement => [0, 200, 0],
            Comparison::Regression => [0, 80, 255],
            Comparison::BothWrong => [220, 0, 0],
            Comparison::Ignored | Comparison::BothRight => [0, 0, 0],
        }
    }
}

pub fn improvement_error_map(
    pred_a: &PanopticBevMap,
    pred_b: &PanopticBevMap,
    gt: &PanopticBevMap,
) -> Result<Raster<Comparison>> {
    check_pair(pred_a, gt)?;
    check_pair(pred_b, gt)?;
    let data = gt
        .class
        .iter()
        .zip(pred_a.class.iter().zip(pred_b.class.iter()))
        .map(|(&g, (&a, &b))| match (g == VOID, a == g, b == g) {
            (true, _, _) => Comparison::Ignored,
            (false, true, true) => Comparison::BothRight,
            (false, true, false) => Comparison::Improvement,
            (false, false, true) => Comparison::Regression,
            (false, false, false) => Comparison::BothWrong,
        })
        .collect();
    Raster::from_vec(gt.width(), gt.height(), data)
}

/// Plain-text table of scores ×100, one row per class and the three
/// aggregates.
pub fn format_table(scores: &PanopticScores, miou: Option<&MiouScores>, categories: &CategoryTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>7} {:>7} {:>7} {:>7}", "class", "PQ", "SQ", "RQ", "IoU");
    for (&c, t) in &scores.per_class {
        let name = categories.get(c).map_or("?", |cat| cat.name.as_str());
        let iou = miou
            .and_then(|m| m.per_class.get(&c))
            .map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let _ = writeln!(
            s,
            "{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7}",
            name,
            100.0 * t.pq,
            100.0 * t.sq,
            100.0 * t.rq,
            iou
        );
    }
    let a = &scores.aggregate;
    for (label, t) in [("all", a.all), ("things", a.things), ("stuff", a.stuff)] {
        let _ = writeln!(
            s,
            "{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7}",
            label,
            100.0 * t.pq,
            100.0 * t.sq,
            100.0 * t.rq,
            if label == "all" {
                miou.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m.mean))
            } else {
                "-".to_string()
            }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn map(w: usize, h: usize) -> PanopticBevMap {
        PanopticBevMap::empty(w, h, Arc::new(CategoryTable::bev_default()))
    }

    fn fill(m: &mut PanopticBevMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, c: u16, i: u16) {
        for r in rows {
            for col in cols.clone() {
                m.set(r, col, c, i);
            }
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut gt = map(10, 10);
        fill(&mut gt, 0..10, 0..10, 1, 0);
        fill(&mut gt, 2..5, 2..5, 12, 1);
        fill(&mut gt, 6..9, 6..9, 12, 2);
        let s = panoptic_quality(&gt, &gt).unwrap();
        assert_eq!(s.aggregate.all, QualityTriple { pq: 1.0, sq: 1.0, rq: 1.0 });
        assert_eq!(s.aggregate.num_classes, 2);
    }

    #[test]
    fn disjoint_segment_is_fp_and_fn() {
        let mut gt = map(10, 10);
        fill(&mut gt, 0..3, 0..3, 12, 1);
        let mut pred = map(10, 10);
        fill(&mut pred, 5..8, 5..8, 12, 1);
        let m = match_segments(&pred, &gt).unwrap();
        let cm = &m.per_class[&12];
        assert!(cm.tp.is_empty());
        assert_eq!((cm.fp.len(), cm.fn_.len()), (0, 1));
        // The prediction lies on gt void, so it is ignored entirely.
        fill(&mut gt, 5..10, 5..10, 1, 0);
        let m = match_segments(&pred, &gt).unwrap();
        assert_eq!((m.per_class[&12].fp.len(), m.per_class[&12].fn_.len()), (1, 1));
    }

    #[test]
    fn iou_point_six_fixture() {
        // gt 10 px, pred covers 6 of them: IoU 0.6.
        let mut gt = map(10, 2);
        fill(&mut gt, 0..1, 0..10, 12, 1);
        fill(&mut gt, 1..2, 0..10, 1, 0);
        let mut pred = map(10, 2);
        fill(&mut pred, 0..1, 0..6, 12, 1);
        fill(&mut pred, 1..2, 0..10, 1, 0);
        let s = panoptic_quality(&pred, &gt).unwrap();
        let car = s.per_class[&12];
        assert!((car.pq - 0.6).abs() < 1e-15 && (car.sq - 0.6).abs() < 1e-15 && car.rq == 1.0);
        // Add a false positive: PQ 0.6 / 1.5.
        let mut gt = map(10, 3);
        fill(&mut gt, 0..1, 0..10, 12, 1);
        fill(&mut gt, 1..3, 0..10, 1, 0);
        let mut pred = gt.clone();
        fill(&mut pred, 0..1, 6..10, 0, 0);
        fill(&mut pred, 2..3, 0..10, 12, 2);
        let car = panoptic_quality(&pred, &gt).unwrap().per_class[&12];
        assert!((car.pq - 0.4).abs() < 1e-15);
        assert!((car.rq - 1.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn miou_half_and_half() {
        let gt = Raster::from_fn(4, 4, |_, c| if c < 2 { 1 } else { 2 });
        let pred = Raster::filled(4, 4, 1u16);
        let m = miou(&pred, &gt).unwrap();
        assert_eq!(m.per_class[&1], 0.5);
        assert_eq!(m.per_class[&2], 0.0);
        assert_eq!(m.mean, 0.25);
    }

    #[test]
    fn comparison_truth_table() {
        let mut gt = map(4, 1);
        fill(&mut gt, 0..1, 0..3, 1, 0);
        let mut a = gt.clone();
        let mut b = gt.clone();
        b.set(0, 0, 2, 0);
        a.set(0, 1, 2, 0);
        a.set(0, 2, 2, 0);
        b.set(0, 2, 2, 0);
        let m = improvement_error_map(&a, &b, &gt).unwrap();
        assert_eq!(
            m.as_slice(),
            &[
                Comparison::Improvement,
                Comparison::Regression,
                Comparison::BothWrong,
                Comparison::Ignored
            ]
        );
    }

    #[test]
    fn confusion_merge_adds_counts() {
        let a = ConfusionMatrix::from_rasters(&Raster::filled(2, 1, 1u16), &Raster::filled(2, 1, 1u16)).unwrap();
        let mut b = ConfusionMatrix::from_rasters(&Raster::filled(2, 1, 3u16), &Raster::filled(2, 1, 2u16)).unwrap();
        b.merge(&a);
        assert_eq!(b.total(), 4);
        assert_eq!(b.miou().per_class[&1], 1.0);
    }
}
