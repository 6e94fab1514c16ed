//! Per-window query operators.
//!
//! Each continuous query has a grid variant and a naive variant with the
//! same output contract. Grid variants split window members by the layer of
//! their cell: guaranteed-cell points skip the distance check (range and
//! join), candidate-cell points are checked, and everything else is dropped
//! unseen. Every distance evaluation goes through a [`DistanceMeter`] so the
//! work saved by pruning can be counted.
//!
//! An object within distance `r` of `q`, boundary included, is an
//! r-neighbor of `q`.

use std::borrow::Borrow;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde_json::{json, Value};
use thiserror::Error;

use crate::grid::{CellKey, CellLayer, Grid, GridError, LayerParams, LayerSets};
use crate::stream::SpatialPoint;
use crate::window::WindowSpec;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("query radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query point ({x}, {y}) lies outside the grid")]
    QueryOutsideGrid { x: f64, y: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Distance function used by a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// Plain Euclidean distance in coordinate units.
    #[default]
    Euclidean,
    /// Great-circle distance in meters over (longitude, latitude) degrees.
    Haversine,
}

impl Metric {
    pub fn distance(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        match self {
            Metric::Euclidean => euclidean(a, b),
            Metric::Haversine => haversine_m(a, b),
        }
    }

    /// Ring depths for radius `r` on `grid`.
    ///
    /// Under the haversine metric `r` is in meters. It is converted to the
    /// largest degree offset a point within `r` can have on either axis
    /// anywhere in the grid's latitude band, and no ring is guaranteed.
    pub fn layer_params(&self, grid: &Grid, r: f64) -> Result<LayerParams, GridError> {
        match self {
            Metric::Euclidean => LayerParams::new(r, grid.cell_len()),
            Metric::Haversine => {
                let lat_max = grid.min_y().abs().max(grid.max_y().abs()).min(89.999_999);
                let half = r / (2.0 * EARTH_RADIUS_M);
                let dlon = if half >= std::f64::consts::FRAC_PI_2 {
                    std::f64::consts::PI
                } else {
                    let s = half.sin() / lat_max.to_radians().cos();
                    2.0 * s.min(1.0).asin()
                };
                let dlat = r / EARTH_RADIUS_M;
                let r_deg = dlon.max(dlat).to_degrees() * (1.0 + 1e-9);
                LayerParams::candidates_only(r_deg, grid.cell_len())
            }
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "haversine" => Ok(Metric::Haversine),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

pub fn euclidean(p: (f64, f64), q: (f64, f64)) -> f64 {
    let dx = p.0 - q.0;
    let dy = p.1 - q.1;
    (dx * dx + dy * dy).sqrt()
}

/// Great-circle distance in meters between two (lon, lat) points.
pub fn haversine_m(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (lon1, lat1) = (p.0.to_radians(), p.1.to_radians());
    let (lon2, lat2) = (q.0.to_radians(), q.1.to_radians());
    let a = ((lat2 - lat1) / 2.0).sin().powi(2)
        + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Evaluates distances and counts how many were computed.
#[derive(Debug, Clone, Default)]
pub struct DistanceMeter {
    metric: Metric,
    count: u64,
}

impl DistanceMeter {
    pub fn new(metric: Metric) -> Self {
        Self { metric, count: 0 }
    }

    pub fn distance(&mut self, p: &SpatialPoint, q: (f64, f64)) -> f64 {
        self.count += 1;
        self.metric.distance((p.x, p.y), q)
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeQuery {
    pub q: (f64, f64),
    pub r: f64,
    pub window: WindowSpec,
    pub metric: Metric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnQuery {
    pub q: (f64, f64),
    pub r: f64,
    pub k: usize,
    pub window: WindowSpec,
    pub metric: Metric,
}

/// Spatial join of an ordinary stream against a query stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoinQuery {
    pub r: f64,
    pub window: WindowSpec,
    pub metric: Metric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Query {
    Range(RangeQuery),
    Knn(KnnQuery),
    Join(JoinQuery),
}

impl Query {
    pub fn window(&self) -> WindowSpec {
        match self {
            Query::Range(q) => q.window,
            Query::Knn(q) => q.window,
            Query::Join(q) => q.window,
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            Query::Range(q) => q.r,
            Query::Knn(q) => q.r,
            Query::Join(q) => q.r,
        }
    }

    pub fn metric(&self) -> Metric {
        match self {
            Query::Range(q) => q.metric,
            Query::Knn(q) => q.metric,
            Query::Join(q) => q.metric,
        }
    }

    pub fn kind(&self) -> QueryKind {
        match self {
            Query::Range(_) => QueryKind::Range,
            Query::Knn(_) => QueryKind::Knn,
            Query::Join(_) => QueryKind::Join,
        }
    }

    pub fn query_point(&self) -> Option<(f64, f64)> {
        match self {
            Query::Range(q) => Some(q.q),
            Query::Knn(q) => Some(q.q),
            Query::Join(_) => None,
        }
    }

    /// Checks radius, k and the query point against `grid`.
    pub fn validate(&self, grid: &Grid) -> Result<(), QueryError> {
        let r = self.radius();
        if !(r > 0.0 && r.is_finite()) {
            return Err(QueryError::InvalidRadius(r));
        }
        if let Query::Knn(q) = self {
            if q.k == 0 {
                return Err(QueryError::ZeroK);
            }
        }
        if let Some((x, y)) = self.query_point() {
            if !grid.contains(x, y) {
                return Err(QueryError::QueryOutsideGrid { x, y });
            }
        }
        Ok(())
    }

    /// Layer sets around the query point's cell (range and kNN only).
    pub fn layer_sets(&self, grid: &Grid) -> Result<Option<LayerSets>, QueryError> {
        let Some((x, y)) = self.query_point() else {
            return Ok(None);
        };
        self.validate(grid)?;
        let cell = grid.cell_of(x, y)?;
        let params = self.metric().layer_params(grid, self.radius())?;
        Ok(Some(LayerSets::build(grid, cell, params)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    Range,
    Knn,
    Join,
}

impl QueryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryKind::Range => "range",
            QueryKind::Knn => "knn",
            QueryKind::Join => "join",
        }
    }
}

impl FromStr for QueryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "range" => Ok(QueryKind::Range),
            "knn" => Ok(QueryKind::Knn),
            "join" => Ok(QueryKind::Join),
            other => Err(format!("unknown query {other:?}")),
        }
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A point and its distance from the query point.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub point: SpatialPoint,
    pub distance: f64,
}

impl Neighbor {
    /// Distance first, then the point's canonical order (object id first).
    pub fn rank_cmp(&self, other: &Neighbor) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.point.canonical_cmp(&other.point))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// An ordinary-stream point within `r` of a query-stream point.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinPair {
    pub ordinary: SpatialPoint,
    pub query: SpatialPoint,
}

impl JoinPair {
    pub fn canonical_cmp(&self, other: &JoinPair) -> Ordering {
        self.ordinary
            .canonical_cmp(&other.ordinary)
            .then_with(|| self.query.canonical_cmp(&other.query))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResultPayload {
    Range(Vec<SpatialPoint>),
    Knn(Vec<Neighbor>),
    Join(Vec<JoinPair>),
}

impl ResultPayload {
    pub fn empty(kind: QueryKind) -> Self {
        match kind {
            QueryKind::Range => ResultPayload::Range(Vec::new()),
            QueryKind::Knn => ResultPayload::Knn(Vec::new()),
            QueryKind::Join => ResultPayload::Join(Vec::new()),
        }
    }

    pub fn kind(&self) -> QueryKind {
        match self {
            ResultPayload::Range(_) => QueryKind::Range,
            ResultPayload::Knn(_) => QueryKind::Knn,
            ResultPayload::Join(_) => QueryKind::Join,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ResultPayload::Range(v) => v.len(),
            ResultPayload::Knn(v) => v.len(),
            ResultPayload::Join(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorts set-valued payloads into canonical order.
    pub fn canonicalize(&mut self) {
        match self {
            ResultPayload::Range(v) => v.sort_by(SpatialPoint::canonical_cmp),
            ResultPayload::Knn(v) => v.sort(),
            ResultPayload::Join(v) => v.sort_by(JoinPair::canonical_cmp),
        }
    }
}

/// Output of one continuous query for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResultBatch {
    pub window_start: i64,
    pub window_end: i64,
    pub payload: ResultPayload,
}

fn point_json(p: &SpatialPoint) -> Value {
    json!({"id": &*p.object_id, "x": p.x, "y": p.y, "t": p.event_time})
}

impl QueryResultBatch {
    pub fn to_json(&self) -> Value {
        let payload: Vec<Value> = match &self.payload {
            ResultPayload::Range(points) => points.iter().map(point_json).collect(),
            ResultPayload::Knn(list) => list
                .iter()
                .map(|n| json!({"id": &*n.point.object_id, "distance": n.distance}))
                .collect(),
            ResultPayload::Join(pairs) => pairs
                .iter()
                .map(|p| json!([&*p.ordinary.object_id, &*p.query.object_id]))
                .collect(),
        };
        json!({
            "window_start": self.window_start,
            "window_end": self.window_end,
            "type": self.payload.kind().as_str(),
            "payload": payload,
        })
    }

    /// One JSON line, no trailing newline.
    pub fn to_json_line(&self) -> String {
        self.to_json().to_string()
    }
}

/// Window members split by the layer of their cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutput {
    pub guaranteed: Vec<SpatialPoint>,
    pub candidate: Vec<SpatialPoint>,
    pub pruned: u64,
}

/// Splits points by layer without computing any distance.
pub fn range_filter(
    points: impl IntoIterator<Item = SpatialPoint>,
    layers: &LayerSets,
) -> FilterOutput {
    let mut out = FilterOutput::default();
    for p in points {
        match layers.classify_key(p.cell) {
            CellLayer::Guaranteed => out.guaranteed.push(p),
            CellLayer::Candidate => out.candidate.push(p),
            CellLayer::Pruned => out.pruned += 1,
        }
    }
    out
}

/// Guaranteed points pass unchecked; candidates are distance-checked.
pub fn range_refine(
    guaranteed: Vec<SpatialPoint>,
    candidate: Vec<SpatialPoint>,
    q: (f64, f64),
    r: f64,
    meter: &mut DistanceMeter,
) -> Vec<SpatialPoint> {
    let mut out = guaranteed;
    out.extend(candidate.into_iter().filter(|p| meter.distance(p, q) <= r));
    out
}

/// Checks every point.
pub fn range_naive(
    points: impl IntoIterator<Item = SpatialPoint>,
    q: (f64, f64),
    r: f64,
    meter: &mut DistanceMeter,
) -> Vec<SpatialPoint> {
    points
        .into_iter()
        .filter(|p| meter.distance(p, q) <= r)
        .collect()
}

/// The `k` nearest r-neighbors among `points`, nearest first.
///
/// A max-heap of size `k` keeps the current best; its root is the k-th
/// nearest so far and is replaced when something closer shows up.
pub fn knn_local(
    points: impl IntoIterator<Item = SpatialPoint>,
    q: (f64, f64),
    r: f64,
    k: usize,
    meter: &mut DistanceMeter,
) -> Vec<Neighbor> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
    for point in points {
        let distance = meter.distance(&point, q);
        if distance > r {
            continue;
        }
        let cand = Neighbor { point, distance };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(mut root) = heap.peek_mut() {
            if cand < *root {
                *root = cand;
            }
        }
    }
    heap.into_sorted_vec()
}

/// Merges sorted partial kNN lists into the global `k` nearest.
pub fn knn_merge(partials: impl IntoIterator<Item = Vec<Neighbor>>, k: usize) -> Vec<Neighbor> {
    let mut iters: Vec<_> = partials.into_iter().map(Vec::into_iter).collect();
    let mut heads: BinaryHeap<Reverse<(Neighbor, usize)>> = iters
        .iter_mut()
        .enumerate()
        .filter_map(|(i, it)| it.next().map(|n| Reverse((n, i))))
        .collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let Some(Reverse((n, i))) = heads.pop() else {
            break;
        };
        if let Some(next) = iters[i].next() {
            heads.push(Reverse((next, i)));
        }
        out.push(n);
    }
    out
}

/// A copy of a query-stream point addressed to one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    pub key: CellKey,
    pub tag: CellLayer,
    pub query: SpatialPoint,
}

/// Copies `q` to every guaranteed and candidate cell around its own cell.
pub fn join_replicate(
    q: &SpatialPoint,
    grid: &Grid,
    r: f64,
    metric: Metric,
) -> Result<Vec<Replica>, GridError> {
    let cell = grid.decode_key(q.cell)?;
    let params = metric.layer_params(grid, r)?;
    let layers = LayerSets::build(grid, cell, params);
    let mut out = Vec::with_capacity(layers.retained_cells());
    for (cells, tag) in [
        (&layers.guaranteed, CellLayer::Guaranteed),
        (&layers.candidate, CellLayer::Candidate),
    ] {
        for c in cells {
            out.push(Replica {
                key: grid.encode_key(*c)?,
                tag,
                query: q.clone(),
            });
        }
    }
    Ok(out)
}

/// Joins one cell's ordinary points with the replicas addressed to it.
pub fn join_per_key<P: Borrow<SpatialPoint>>(
    ordinary: &[P],
    replicas: &[Replica],
    r: f64,
    meter: &mut DistanceMeter,
) -> Vec<JoinPair> {
    let mut out = Vec::new();
    for replica in replicas {
        let q = &replica.query;
        match replica.tag {
            CellLayer::Guaranteed => out.extend(ordinary.iter().map(|p| JoinPair {
                ordinary: p.borrow().clone(),
                query: q.clone(),
            })),
            CellLayer::Candidate => {
                for p in ordinary {
                    let p = p.borrow();
                    if meter.distance(p, (q.x, q.y)) <= r {
                        out.push(JoinPair {
                            ordinary: p.clone(),
                            query: q.clone(),
                        });
                    }
                }
            }
            CellLayer::Pruned => {}
        }
    }
    out
}

/// All-pairs join.
pub fn join_naive(
    ordinary: &[SpatialPoint],
    queries: &[SpatialPoint],
    r: f64,
    meter: &mut DistanceMeter,
) -> Vec<JoinPair> {
    let mut out = Vec::new();
    for q in queries {
        for p in ordinary {
            if meter.distance(p, (q.x, q.y)) <= r {
                out.push(JoinPair {
                    ordinary: p.clone(),
                    query: q.clone(),
                });
            }
        }
    }
    out
}
