//! Events-3D graph construction.
//!
//! Events become nodes at positions `(x, y, t_scaled)` where `t_scaled`
//! maps the window-relative timestamp into pixel units, so one distance
//! metric mixes the spatial and temporal axes. Every node connects to its
//! k nearest neighbors under that metric, and farthest point sampling
//! picks well-spread subsets for graph coarsening.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};
use crate::events::{EventWindow, SensorGeometry};
use crate::par;

/// Scale between the temporal and spatial axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    /// Pixels per microsecond applied to window-relative timestamps.
    pub time_scale: f64,
}

impl MetricConfig {
    pub fn new(time_scale: f64) -> Result<Self> {
        if !(time_scale > 0.0) || !time_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "time_scale must be a positive finite number, got {time_scale}"
            )));
        }
        Ok(Self { time_scale })
    }

    /// Default policy: one window duration spans `max(W, H)` pixels.
    pub fn auto(geometry: SensorGeometry, window_duration_us: i64) -> Self {
        let span = geometry.width.max(geometry.height) as f64;
        Self { time_scale: span / window_duration_us as f64 }
    }
}

/// An immutable kNN graph over one event window.
#[derive(Debug, Clone)]
pub struct EventGraph {
    /// Node positions `(x, y, t_scaled)`, one row per event.
    pub positions: Vec<[f64; 3]>,
    /// Node features; initially equal to the positions.
    pub features: Vec<[f64; 3]>,
    /// Flat N*k neighbor indices; row i holds the k nearest nodes to i,
    /// self excluded, ordered by (distance, index).
    pub neighbors: Vec<u32>,
    pub k: usize,
}

impl EventGraph {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn neighbor_row(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Debug dump as a text edge list, one `i j distance` line per edge.
    pub fn dump_edges<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.len() {
            for &j in self.neighbor_row(i) {
                let d = spatiotemporal_distance(self.positions[i], self.positions[j as usize]);
                writeln!(w, "{} {} {:.6}", i, j, d)?;
            }
        }
        Ok(())
    }
}

/// Euclidean distance between two already time-scaled positions.
pub fn spatiotemporal_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    (dx * dx + dy * dy + dt * dt).sqrt()
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    dx * dx + dy * dy + dt * dt
}

/// Ascending (distance, index) with index as the tie-break.
fn closer(a: (f64, u32), b: (f64, u32)) -> Ordering {
    a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1))
}

/// k nearest rows of `targets` for every row of `queries`, self excluded
/// when `skip` maps a query to a target index. Exact selection: every
/// candidate is examined; ties break toward the smaller target index.
fn knn_select(
    queries: &[[f64; 3]],
    targets: &[[f64; 3]],
    k: usize,
    skip: impl Fn(usize) -> Option<usize> + Sync,
) -> Vec<u32> {
    let rows = par::map_range(queries.len(), |qi| {
        let q = queries[qi];
        let banned = skip(qi);
        // Bounded insertion keeps the k best in sorted order; k is small.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        for (ti, &t) in targets.iter().enumerate() {
            if banned == Some(ti) {
                continue;
            }
            let cand = (dist_sq(q, t), ti as u32);
            if best.len() == k && closer(cand, *best.last().unwrap()) != Ordering::Less {
                continue;
            }
            let pos = best.partition_point(|&b| closer(b, cand) == Ordering::Less);
            best.insert(pos, cand);
            if best.len() > k {
                best.pop();
            }
        }
        best.into_iter().map(|(_, i)| i).collect::<Vec<u32>>()
    });
    rows.into_iter().flatten().collect()
}

/// k nearest `targets` rows per `queries` row with no exclusions.
pub fn knn_indices(queries: &[[f64; 3]], targets: &[[f64; 3]], k: usize) -> Result<Vec<u32>> {
    if targets.len() < k || k == 0 {
        return Err(Error::InsufficientNodes { n: targets.len(), k });
    }
    Ok(knn_select(queries, targets, k, |_| None))
}

/// kNN over a single point set, self-edges excluded. Requires `n > k`.
pub fn knn_graph_indices(positions: &[[f64; 3]], k: usize) -> Result<Vec<u32>> {
    if positions.len() <= k || k == 0 {
        return Err(Error::InsufficientNodes { n: positions.len(), k });
    }
    Ok(knn_select(positions, positions, k, Some))
}

/// Map a window's events to scaled positions.
pub fn window_positions(window: &EventWindow, metric: MetricConfig) -> Vec<[f64; 3]> {
    window
        .events
        .iter()
        .map(|ev| {
            [
                ev.x as f64,
                ev.y as f64,
                (ev.t - window.t_start) as f64 * metric.time_scale,
            ]
        })
        .collect()
}

/// Build the events-3D graph for one window.
pub fn build_knn_graph(
    window: &EventWindow,
    k: usize,
    metric: MetricConfig,
    geometry: SensorGeometry,
) -> Result<EventGraph> {
    for ev in &window.events {
        if !geometry.contains(ev.x as u32, ev.y as u32) {
            return Err(Error::Bounds {
                line: 0,
                x: ev.x as u32,
                y: ev.y as u32,
                width: geometry.width,
                height: geometry.height,
            });
        }
    }
    let positions = window_positions(window, metric);
    let neighbors = knn_graph_indices(&positions, k)?;
    Ok(EventGraph { features: positions.clone(), positions, neighbors, k })
}

/// Greedy farthest point sampling.
///
/// Seeds at the node with the smallest `t_scaled` (ties: smallest index),
/// then repeatedly picks the node maximizing the minimum distance to the
/// chosen set (ties: smallest index). Returns `m` distinct indices.
pub fn farthest_point_sampling(positions: &[[f64; 3]], m: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::Size(format!("cannot sample {m} of {n} nodes")));
    }
    let mut seed = 0usize;
    for i in 1..n {
        if positions[i][2] < positions[seed][2] {
            seed = i;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    chosen.push(seed);
    let mut min_d: Vec<f64> = positions.iter().map(|&p| dist_sq(p, positions[seed])).collect();
    while chosen.len() < m {
        let mut next = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best {
                best = d;
                next = i;
            }
        }
        chosen.push(next);
        let p = positions[next];
        for (i, d) in min_d.iter_mut().enumerate() {
            let cand = dist_sq(positions[i], p);
            if cand < *d {
                *d = cand;
            }
        }
    }
    Ok(chosen)
}
