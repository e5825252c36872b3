//! Segmentation metrics: confusion-count scores, convex-hull masks and
//! IoU, and the detection-rate criterion.

use crate::error::{Error, Result};
use crate::events::{Event, EventLabel, SensorGeometry};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// Tally predictions against ground truth (nonzero = foreground).
    pub fn from_labels(pred: &[u8], gt: &[u8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p > 0, g > 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Recall, precision, and their harmonic mean; 0/0 ratios are 0.
pub fn scores(c: &ConfusionCounts) -> Scores {
    let recall = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores { recall, precision, f1 }
}

/// Where a mask's pixels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    ConvexHull,
    Labels,
}

/// A binary pixel mask over the sensor plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub width: u32,
    pub height: u32,
    pub source: MaskSource,
    bits: Vec<bool>,
}

impl SegMask {
    pub fn empty(geometry: SensorGeometry, source: MaskSource) -> Self {
        SegMask {
            width: geometry.width,
            height: geometry.height,
            source,
            bits: vec![false; geometry.pixel_count()],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &SegMask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew monotone chain over integer points; counter-clockwise order,
/// collinear points dropped. Degenerate inputs (< 3 distinct points or all
/// collinear) return the reduced chain.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts: Vec<(i64, i64)> = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() == 2 && lower[0] == lower[1] {
        lower.pop();
    }
    lower
}

/// Is `p` inside or on the hull? Exact integer arithmetic throughout.
pub fn point_in_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            // On the segment: collinear and within the bounding box.
            cross(hull[0], hull[1], p) == 0
                && p.0 >= hull[0].0.min(hull[1].0)
                && p.0 <= hull[0].0.max(hull[1].0)
                && p.1 >= hull[0].1.min(hull[1].1)
                && p.1 <= hull[0].1.max(hull[1].1)
        }
        n => {
            for i in 0..n {
                if cross(hull[i], hull[(i + 1) % n], p) < 0 {
                    return false;
                }
            }
            true
        }
    }
}

/// Fill the convex hull of foreground pixels: every pixel whose center
/// lies inside or on the hull is set. Zero points yield an empty mask.
pub fn hull_mask(points: &[(u32, u32)], geometry: SensorGeometry) -> SegMask {
    let mut mask = SegMask::empty(geometry, MaskSource::ConvexHull);
    if points.is_empty() {
        return mask;
    }
    let pts: Vec<(i64, i64)> = points.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
    let hull = convex_hull(&pts);
    let min_x = pts.iter().map(|p| p.0).min().unwrap().max(0) as u32;
    let max_x = (pts.iter().map(|p| p.0).max().unwrap() as u32).min(geometry.width - 1);
    let min_y = pts.iter().map(|p| p.1).min().unwrap().max(0) as u32;
    let max_y = (pts.iter().map(|p| p.1).max().unwrap() as u32).min(geometry.height - 1);
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            if point_in_hull(&hull, (x as i64, y as i64)) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Intersection over union of two masks. Both empty is defined as 1; one
/// empty as 0.
pub fn iou(a: &SegMask, b: &SegMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::GeometryMismatch(a.width, a.height, b.width, b.height));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Axis-aligned inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    /// 0 when the box carries no instance id.
    pub object: u16,
}

impl DetectionBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidConfig(format!(
                "degenerate box ({x_min},{y_min})-({x_max},{y_max})"
            )));
        }
        Ok(DetectionBox { x_min, y_min, x_max, y_max, object: 0 })
    }

    /// Bounding box of a non-empty pixel set.
    pub fn of_pixels(pixels: &[(u32, u32)]) -> Option<Self> {
        let first = pixels.first()?;
        let mut b = DetectionBox {
            x_min: first.0,
            y_min: first.1,
            x_max: first.0,
            y_max: first.1,
            object: 0,
        };
        for &(x, y) in pixels {
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }

    /// Pixel count, inclusive of both edges.
    pub fn area(&self) -> u64 {
        (self.x_max - self.x_min + 1) as u64 * (self.y_max - self.y_min + 1) as u64
    }

    pub fn intersection_area(&self, other: &DetectionBox) -> u64 {
        let x_min = self.x_min.max(other.x_min);
        let x_max = self.x_max.min(other.x_max);
        let y_min = self.y_min.max(other.y_min);
        let y_max = self.y_max.min(other.y_max);
        if x_min > x_max || y_min > y_max {
            0
        } else {
            (x_max - x_min + 1) as u64 * (y_max - y_min + 1) as u64
        }
    }
}

/// Success of one (prediction, ground truth) pair under the detection
/// criterion: the prediction must cover more than half of the truth and
/// overlap the truth more than the truth's complement.
pub fn detection_success(pred: &DetectionBox, gt: &DetectionBox) -> bool {
    let inter = pred.intersection_area(gt);
    let coverage = inter as f64 / gt.area() as f64;
    let outside = pred.area() - inter;
    coverage > 0.5 && inter > outside
}

#[derive(Debug, Clone, Default)]
pub struct DetectionOutcome {
    /// Per ground-truth box, in input order.
    pub successes: Vec<bool>,
    pub rate: f64,
}

/// Evaluate predictions against ground-truth boxes. Boxes are matched
/// greedily by descending coverage; each side is used at most once. The
/// rate is successes over ground-truth boxes.
pub fn detection_rate(pred: &[DetectionBox], gt: &[DetectionBox]) -> DetectionOutcome {
    let mut successes = vec![false; gt.len()];
    if gt.is_empty() {
        return DetectionOutcome { successes, rate: 0.0 };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let coverage = p.intersection_area(g) as f64 / g.area() as f64;
            if coverage > 0.0 {
                pairs.push((coverage, pi, gi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    for (_, pi, gi) in pairs {
        if pred_used[pi] || gt_used[gi] {
            continue;
        }
        pred_used[pi] = true;
        gt_used[gi] = true;
        successes[gi] = detection_success(&pred[pi], &gt[gi]);
    }
    let rate = successes.iter().filter(|&&s| s).count() as f64 / gt.len() as f64;
    DetectionOutcome { successes, rate }
}

/// Per-window scores of predictions against ground truth.
#[derive(Debug, Clone)]
pub struct WindowScore {
    /// Hull-filled IoU; `None` for an all-background window with no
    /// predictions (nothing to segment).
    pub iou: Option<f64>,
    pub dr_successes: usize,
    pub dr_total: usize,
    pub counts: ConfusionCounts,
}

/// Score one window of events: confusion counts over event labels,
/// convex-hull IoU (ground truth unions per-object hulls), and the
/// detection criterion with one predicted box against per-object
/// ground-truth boxes.
pub fn score_window(
    events: &[Event],
    pred: &[EventLabel],
    gt: &[EventLabel],
    geometry: SensorGeometry,
) -> WindowScore {
    let pred_cls: Vec<u8> = pred.iter().map(|l| l.foreground as u8).collect();
    let gt_cls: Vec<u8> = gt.iter().map(|l| l.foreground as u8).collect();
    let counts = ConfusionCounts::from_labels(&pred_cls, &gt_cls);

    let pred_pixels: Vec<(u32, u32)> = events
        .iter()
        .zip(pred)
        .filter(|(_, l)| l.foreground)
        .map(|(e, _)| (e.x as u32, e.y as u32))
        .collect();
    let mut gt_objects: std::collections::BTreeMap<u16, Vec<(u32, u32)>> =
        std::collections::BTreeMap::new();
    for (e, l) in events.iter().zip(gt) {
        if l.foreground {
            gt_objects
                .entry(l.object.max(1))
                .or_default()
                .push((e.x as u32, e.y as u32));
        }
    }

    let pred_mask = hull_mask(&pred_pixels, geometry);
    let mut gt_mask = SegMask::empty(geometry, MaskSource::ConvexHull);
    for pixels in gt_objects.values() {
        gt_mask.union_with(&hull_mask(pixels, geometry));
    }
    let iou_value = iou(&pred_mask, &gt_mask).expect("same geometry");
    let scored_iou = if gt_mask.is_empty() && pred_mask.is_empty() {
        None
    } else {
        Some(iou_value)
    };

    let gt_boxes: Vec<DetectionBox> = gt_objects
        .iter()
        .filter_map(|(&id, pixels)| {
            DetectionBox::of_pixels(pixels).map(|mut b| {
                b.object = id;
                b
            })
        })
        .collect();
    let pred_boxes: Vec<DetectionBox> = DetectionBox::of_pixels(&pred_pixels).into_iter().collect();
    let outcome = detection_rate(&pred_boxes, &gt_boxes);
    WindowScore {
        iou: scored_iou,
        dr_successes: outcome.successes.iter().filter(|&&s| s).count(),
        dr_total: gt_boxes.len(),
        counts,
    }
}
