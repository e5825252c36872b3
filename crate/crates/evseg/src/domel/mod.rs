//! Offline mask-aware event labeling.
//!
//! Four stages: (I) synchronize events with grayscale frames sharing a
//! clock, (II) rigid-fit the events of each frame interval onto the
//! frame's Canny edges, (III) rigid-fit the shifted events onto the
//! object-mask boundary, (IV) label every event by mask membership at its
//! doubly shifted position, carrying the mask's object id.

mod canny;

pub use canny::canny_edges;

use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{Event, EventLabel, SensorGeometry};
use crate::par;
use crate::pgm::{self, GrayImage};

/// Grayscale frame with its capture timestamp.
#[derive(Debug, Clone)]
pub struct ApsFrame {
    pub t: i64,
    pub image: GrayImage,
}

/// Object mask: nonzero pixels mark dynamic objects, the value is the
/// object id.
#[derive(Debug, Clone)]
pub struct ObjectMask {
    pub t: i64,
    pub image: GrayImage,
}

impl ObjectMask {
    /// Boundary pixels: nonzero with a zero 4-neighbor or on the border.
    pub fn boundary_pixels(&self) -> Vec<(u32, u32)> {
        let (w, h) = (self.image.width, self.image.height);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.image.get(x, y) == 0 {
                    continue;
                }
                let on_border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
                if on_border
                    || self.image.get(x - 1, y) == 0
                    || self.image.get(x + 1, y) == 0
                    || self.image.get(x, y - 1) == 0
                    || self.image.get(x, y + 1) == 0
                {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.image.pixels.iter().all(|&p| p == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform2D {
    /// Rotation in radians, normalized to (-pi, pi].
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform2D {
    pub fn identity() -> Self {
        RigidTransform2D { theta: 0.0, tx: 0.0, ty: 0.0 }
    }

    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        RigidTransform2D { theta: normalize_angle(theta), tx, ty }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * p[0] - s * p[1] + self.tx, s * p[0] + c * p[1] + self.ty]
    }

    /// self after `inner`: (self . inner)(p) = self(inner(p)).
    pub fn compose(&self, inner: &RigidTransform2D) -> RigidTransform2D {
        let (s, c) = self.theta.sin_cos();
        RigidTransform2D {
            theta: normalize_angle(self.theta + inner.theta),
            tx: c * inner.tx - s * inner.ty + self.tx,
            ty: s * inner.tx + c * inner.ty + self.ty,
        }
    }
}

fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta;
    while t > std::f64::consts::PI {
        t -= 2.0 * std::f64::consts::PI;
    }
    while t <= -std::f64::consts::PI {
        t += 2.0 * std::f64::consts::PI;
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop once the residual improves by less than this many pixels.
    pub tol: f64,
    /// Ignore correspondences farther than this (outlier gate).
    pub max_corr_dist: Option<f64>,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions { max_iters: 30, tol: 1e-4, max_corr_dist: None }
    }
}

/// Uniform-grid nearest-neighbor index over 2D points.
struct GridIndex {
    cell: f64,
    min: [f64; 2],
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
    points: Vec<[f64; 2]>,
}

impl GridIndex {
    fn build(points: &[[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        let extent = ((max[0] - min[0]).max(max[1] - min[1])).max(1.0);
        // Aim for a handful of points per cell.
        let target_cells = (points.len() as f64).sqrt().ceil().max(1.0);
        let cell = (extent / target_cells).max(1.0);
        let cols = ((max[0] - min[0]) / cell).floor() as usize + 1;
        let rows = ((max[1] - min[1]) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let cx = ((p[0] - min[0]) / cell).floor() as usize;
            let cy = ((p[1] - min[1]) / cell).floor() as usize;
            buckets[cy * cols + cx].push(i as u32);
        }
        GridIndex { cell, min, cols, rows, buckets, points: points.to_vec() }
    }

    fn nearest(&self, p: [f64; 2]) -> (u32, f64) {
        let cx = (((p[0] - self.min[0]) / self.cell).floor() as isize).clamp(0, self.cols as isize - 1);
        let cy = (((p[1] - self.min[1]) / self.cell).floor() as isize).clamp(0, self.rows as isize - 1);
        let mut best = (u32::MAX, f64::INFINITY);
        let max_ring = self.cols.max(self.rows) as isize;
        for ring in 0..=max_ring {
            // Once a match is in hand, stop when closer rings are exhausted.
            if best.1.is_finite() {
                let ring_min = (ring - 1).max(0) as f64 * self.cell;
                if ring_min * ring_min > best.1 {
                    break;
                }
            }
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue;
                    }
                    let (nx, ny) = (cx + dx, cy + dy);
                    if nx < 0 || ny < 0 || nx >= self.cols as isize || ny >= self.rows as isize {
                        continue;
                    }
                    for &i in &self.buckets[ny as usize * self.cols + nx as usize] {
                        let q = self.points[i as usize];
                        let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
                        if d2 < best.1 || (d2 == best.1 && i < best.0) {
                            best = (i, d2);
                        }
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Source-to-target rigid transform.
    pub transform: RigidTransform2D,
    /// Final RMS of nearest-neighbor distances.
    pub residual: f64,
    /// RMS residual before the first step and after each accepted one.
    pub trace: Vec<f64>,
}

impl IcpResult {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

/// Iterative closest point with a closed-form 2D rigid fit per iteration.
///
/// The residual never increases between iterations: each fit minimizes
/// the distance to fixed correspondences and re-matching can only shrink
/// per-point distances; a gated run that would regress keeps the best
/// transform seen.
pub fn icp_2d(source: &[[f64; 2]], target: &[[f64; 2]], opts: IcpOptions) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Size(format!(
            "icp needs non-empty point sets, got {} source / {} target",
            source.len(),
            target.len()
        )));
    }
    let index = GridIndex::build(target);
    let residual_of = |points: &[[f64; 2]]| -> f64 {
        let total: f64 = points.iter().map(|&p| index.nearest(p).1).sum();
        (total / points.len() as f64).sqrt()
    };

    let mut transform = RigidTransform2D::identity();
    let mut current: Vec<[f64; 2]> = source.to_vec();
    let mut residual = residual_of(&current);
    let mut trace = vec![residual];
    for _ in 0..opts.max_iters {
        // Correspondences under the current transform.
        let matches: Vec<(usize, u32, f64)> = current
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let (j, d2) = index.nearest(p);
                (i, j, d2)
            })
            .filter(|&(_, _, d2)| match opts.max_corr_dist {
                Some(gate) => d2 <= gate * gate,
                None => true,
            })
            .collect();
        if matches.len() < 2 {
            break;
        }
        let step = fit_rigid(
            &matches.iter().map(|&(i, _, _)| current[i]).collect::<Vec<_>>(),
            &matches.iter().map(|&(_, j, _)| index.points[j as usize]).collect::<Vec<_>>(),
        );
        let candidate: Vec<[f64; 2]> = current.iter().map(|&p| step.apply(p)).collect();
        let new_residual = residual_of(&candidate);
        if new_residual > residual {
            break;
        }
        current = candidate;
        transform = step.compose(&transform);
        let improvement = residual - new_residual;
        residual = new_residual;
        trace.push(residual);
        if improvement < opts.tol {
            break;
        }
    }
    Ok(IcpResult { transform, residual, trace })
}

/// Closed-form least-squares rigid fit (2D Kabsch) mapping `source` onto
/// `target`. A degenerate source (zero spread) falls back to the
/// centroid translation.
fn fit_rigid(source: &[[f64; 2]], target: &[[f64; 2]]) -> RigidTransform2D {
    let n = source.len() as f64;
    let mut ms = [0.0; 2];
    let mut mt = [0.0; 2];
    for (s, t) in source.iter().zip(target) {
        ms[0] += s[0];
        ms[1] += s[1];
        mt[0] += t[0];
        mt[1] += t[1];
    }
    for d in 0..2 {
        ms[d] /= n;
        mt[d] /= n;
    }
    let mut dot = 0.0;
    let mut crs = 0.0;
    for (s, t) in source.iter().zip(target) {
        let sx = s[0] - ms[0];
        let sy = s[1] - ms[1];
        let tx = t[0] - mt[0];
        let ty = t[1] - mt[1];
        dot += sx * tx + sy * ty;
        crs += sx * ty - sy * tx;
    }
    let theta = if dot == 0.0 && crs == 0.0 { 0.0 } else { crs.atan2(dot) };
    let (sin, cos) = theta.sin_cos();
    RigidTransform2D {
        theta,
        tx: mt[0] - (cos * ms[0] - sin * ms[1]),
        ty: mt[1] - (sin * ms[0] + cos * ms[1]),
    }
}

/// Stage I: attach every event to the frame whose interval `[f_i, f_{i+1})`
/// contains it; events before the first frame go to the first frame.
/// Returns per-frame groups of (original event index, event).
pub fn synchronize(events: &[Event], frame_times: &[i64]) -> Result<Vec<Vec<(usize, Event)>>> {
    if frame_times.is_empty() {
        return Err(Error::Sync("no frames to synchronize against".into()));
    }
    if frame_times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Sync("frame timestamps must be strictly increasing".into()));
    }
    let mut groups: Vec<Vec<(usize, Event)>> = vec![Vec::new(); frame_times.len()];
    for (i, &ev) in events.iter().enumerate() {
        // Largest frame index with f_i <= t; before-first clamps to 0.
        let idx = frame_times.partition_point(|&f| f <= ev.t).saturating_sub(1);
        groups[idx].push((i, ev));
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy)]
pub struct DomelConfig {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    /// Alignment rounds per ICP stage.
    pub outer_rounds: usize,
    pub icp: IcpOptions,
    /// Starting point for the stage-II edge fit. The pipeline seeds it
    /// with the cross-frame consensus so sparse frames cannot lock onto
    /// the wrong texture edge.
    pub stage2_init: RigidTransform2D,
    /// Correspondence gate for the stage-III mask-boundary fit. Stage III
    /// corrects sub-pixel residual drift, so only events already sitting
    /// on the boundary may vote; a wide gate would let unrelated nearby
    /// events drag the fit.
    pub mask_fit_gate: f64,
}

impl Default for DomelConfig {
    fn default() -> Self {
        DomelConfig {
            sigma: 1.4,
            low: 40.0,
            high: 100.0,
            outer_rounds: 3,
            icp: IcpOptions { max_iters: 30, tol: 1e-4, max_corr_dist: Some(8.0) },
            stage2_init: RigidTransform2D::identity(),
            mask_fit_gate: 1.5,
        }
    }
}

fn repeated_icp(
    points: &[[f64; 2]],
    target: &[(u32, u32)],
    rounds: usize,
    opts: IcpOptions,
) -> RigidTransform2D {
    if points.is_empty() || target.is_empty() {
        return RigidTransform2D::identity();
    }
    let target_pts: Vec<[f64; 2]> = target.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    let mut total = RigidTransform2D::identity();
    let mut current = points.to_vec();
    for _ in 0..rounds {
        let Ok(result) = icp_2d(&current, &target_pts, opts) else {
            break;
        };
        for p in &mut current {
            *p = result.transform.apply(*p);
        }
        total = result.transform.compose(&total);
    }
    total
}

/// Stages II-IV for one synchronized (events, mask, edge set) triple.
///
/// Events are treated as 2D points; the stage-II shift aligns them to the
/// frame's Canny edge set and the stage-III shift to the mask boundary.
/// The final label is 1 exactly when the doubly shifted event lands on a
/// nonzero mask pixel, carrying that pixel's object id.
pub fn label_with_masks(
    events: &[Event],
    mask: &ObjectMask,
    edges: &[(u32, u32)],
    config: &DomelConfig,
) -> Result<Vec<EventLabel>> {
    if mask.is_empty() {
        return Ok(vec![EventLabel::background(); events.len()]);
    }
    let mut points: Vec<[f64; 2]> = events
        .iter()
        .map(|e| config.stage2_init.apply([e.x as f64, e.y as f64]))
        .collect();

    let edge_shift = repeated_icp(&points, edges, config.outer_rounds, config.icp);
    for p in &mut points {
        *p = edge_shift.apply(*p);
    }

    let boundary = mask.boundary_pixels();
    let stage3 = IcpOptions { max_corr_dist: Some(config.mask_fit_gate), ..config.icp };
    let mask_shift = repeated_icp(&points, &boundary, config.outer_rounds, stage3);
    for p in &mut points {
        *p = mask_shift.apply(*p);
    }

    let (w, h) = (mask.image.width as i64, mask.image.height as i64);
    Ok(points
        .iter()
        .map(|p| {
            let x = p[0].round() as i64;
            let y = p[1].round() as i64;
            if x < 0 || y < 0 || x >= w || y >= h {
                return EventLabel::background();
            }
            let id = mask.image.get(x as u32, y as u32);
            if id == 0 {
                EventLabel::background()
            } else {
                EventLabel::foreground(id as u16)
            }
        })
        .collect())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// The full pipeline over frame and mask directories: synchronize, align,
/// and label every event. Frame-interval jobs run independently.
///
/// The stage-II edge fit runs twice: a first pass per frame, then a
/// second pass seeded with the median transform across frames. The skew
/// between the clocks is shared, so the consensus keeps sparsely
/// populated frames from locking onto a neighboring texture edge.
pub fn label_events(
    events: &[Event],
    frames: &[ApsFrame],
    masks: &[ObjectMask],
    config: &DomelConfig,
) -> Result<Vec<EventLabel>> {
    if frames.is_empty() {
        return Err(Error::Sync("no frames to synchronize against".into()));
    }
    for (f, m) in frames.iter().zip(masks) {
        if f.image.width != m.image.width || f.image.height != m.image.height {
            return Err(Error::GeometryMismatch(
                m.image.width,
                m.image.height,
                f.image.width,
                f.image.height,
            ));
        }
    }
    let frame_times: Vec<i64> = frames.iter().map(|f| f.t).collect();
    let groups = synchronize(events, &frame_times)?;

    // Pair each frame with the mask nearest in time.
    let mask_for_frame: Vec<Option<usize>> = frame_times
        .iter()
        .map(|&t| {
            masks
                .iter()
                .enumerate()
                .min_by_key(|(_, m)| (m.t - t).abs())
                .map(|(i, _)| i)
        })
        .collect();

    let jobs: Vec<usize> = (0..frames.len()).collect();
    let edge_sets: Vec<Vec<(u32, u32)>> = par::map_slice(&jobs, |&fi| {
        canny_edges(&frames[fi].image, config.sigma, config.low, config.high)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    // First pass: independent per-frame edge fits.
    let first_pass: Vec<Option<RigidTransform2D>> = par::map_slice(&jobs, |&fi| {
        let group = &groups[fi];
        if group.len() < 8 || edge_sets[fi].is_empty() {
            return None;
        }
        let points: Vec<[f64; 2]> = group.iter().map(|&(_, e)| [e.x as f64, e.y as f64]).collect();
        Some(repeated_icp(&points, &edge_sets[fi], config.outer_rounds, config.icp))
    });
    let consensus = {
        let mut thetas: Vec<f64> = first_pass.iter().flatten().map(|t| t.theta).collect();
        let mut txs: Vec<f64> = first_pass.iter().flatten().map(|t| t.tx).collect();
        let mut tys: Vec<f64> = first_pass.iter().flatten().map(|t| t.ty).collect();
        if thetas.is_empty() {
            RigidTransform2D::identity()
        } else {
            RigidTransform2D::new(median(&mut thetas), median(&mut txs), median(&mut tys))
        }
    };
    let seeded = DomelConfig { stage2_init: consensus, ..*config };

    let results: Vec<Result<Vec<(usize, EventLabel)>>> = par::map_slice(&jobs, |&fi| {
        let group = &groups[fi];
        if group.is_empty() {
            return Ok(Vec::new());
        }
        let evs: Vec<Event> = group.iter().map(|&(_, e)| e).collect();
        let labels = match mask_for_frame[fi] {
            Some(mi) => label_with_masks(&evs, &masks[mi], &edge_sets[fi], &seeded)?,
            None => vec![EventLabel::background(); evs.len()],
        };
        Ok(group.iter().map(|&(i, _)| i).zip(labels).collect())
    });

    let mut out = vec![EventLabel::background(); events.len()];
    for res in results {
        for (i, label) in res? {
            out[i] = label;
        }
    }
    Ok(out)
}

/// Load `<timestamp_us>.pgm` frames from a directory.
pub fn load_frames(dir: &Path, geometry: SensorGeometry) -> Result<Vec<ApsFrame>> {
    pgm::list_timestamped(dir)?
        .into_iter()
        .map(|(t, path)| {
            let image = pgm::read_pgm(&path)?;
            if image.width != geometry.width || image.height != geometry.height {
                return Err(Error::GeometryMismatch(
                    image.width,
                    image.height,
                    geometry.width,
                    geometry.height,
                ));
            }
            Ok(ApsFrame { t, image })
        })
        .collect()
}

pub fn load_masks(dir: &Path, geometry: SensorGeometry) -> Result<Vec<ObjectMask>> {
    pgm::list_timestamped(dir)?
        .into_iter()
        .map(|(t, path)| {
            let image = pgm::read_pgm(&path)?;
            if image.width != geometry.width || image.height != geometry.height {
                return Err(Error::GeometryMismatch(
                    image.width,
                    image.height,
                    geometry.width,
                    geometry.height,
                ));
            }
            Ok(ObjectMask { t, image })
        })
        .collect()
}
