//! Brute-force reference answers.
//!
//! Nothing here is shared with the operators in [`crate::query`]: distances
//! use `f64::hypot`, kNN sorts everything, joins scan the full Cartesian
//! product, and cell layers come from exact cell-to-cell distance bounds
//! rather than ring arithmetic. Inputs are window snapshots held in memory.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::grid::{CellCoord, Grid};
use crate::stream::SpatialPoint;

fn dist(a: &SpatialPoint, b: (f64, f64)) -> f64 {
    (a.x - b.0).hypot(a.y - b.1)
}

fn order(a: &SpatialPoint, b: &SpatialPoint) -> Ordering {
    (&*a.object_id, a.event_time)
        .cmp(&(&*b.object_id, b.event_time))
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

/// Every point within `r` of `q`, sorted by id, time, then coordinates.
pub fn oracle_range(points: &[SpatialPoint], q: (f64, f64), r: f64) -> Vec<SpatialPoint> {
    let mut out: Vec<SpatialPoint> = points.iter().filter(|p| dist(p, q) <= r).cloned().collect();
    out.sort_by(order);
    out
}

/// The `k` nearest points within `r`, with their distances.
///
/// # Panics
///
/// Panics if `k` is zero.
pub fn oracle_knn(
    points: &[SpatialPoint],
    q: (f64, f64),
    r: f64,
    k: usize,
) -> Vec<(SpatialPoint, f64)> {
    assert!(k > 0, "k must be positive");
    let mut all: Vec<(SpatialPoint, f64)> = points
        .iter()
        .map(|p| (p.clone(), dist(p, q)))
        .filter(|(_, d)| *d <= r)
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| order(&a.0, &b.0)));
    all.truncate(k);
    all
}

/// Every (ordinary, query) pair within `r`, sorted.
pub fn oracle_join(
    ordinary: &[SpatialPoint],
    queries: &[SpatialPoint],
    r: f64,
) -> Vec<(SpatialPoint, SpatialPoint)> {
    let mut out = Vec::new();
    for p in ordinary {
        for q in queries {
            if dist(p, (q.x, q.y)) <= r {
                out.push((p.clone(), q.clone()));
            }
        }
    }
    out.sort_by(|a, b| order(&a.0, &b.0).then_with(|| order(&a.1, &b.1)));
    out
}

/// Cell classification from exact distance bounds between two cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OracleLayers {
    /// Every pair of points across the two cells is within `r`.
    pub guaranteed: BTreeSet<CellCoord>,
    /// Some pair may be within `r` and some may not.
    pub candidate: BTreeSet<CellCoord>,
    /// No pair can be within `r`.
    pub pruned: BTreeSet<CellCoord>,
}

fn axis_gap(a: u32, b: u32, l: f64) -> (f64, f64) {
    let d = f64::from(a.abs_diff(b));
    // closed cells: nearest faces touch when adjacent, farthest are d+1 apart
    (((d - 1.0).max(0.0)) * l, (d + 1.0) * l)
}

/// Classifies every cell of `grid` against `query_cell` by the minimum and
/// maximum distance between points of the two (closed) cells. The query
/// cell itself is never guaranteed.
pub fn oracle_layers(grid: &Grid, query_cell: CellCoord, r: f64) -> OracleLayers {
    let l = grid.cell_len();
    let mut out = OracleLayers::default();
    for x in 0..grid.x_cells() {
        for y in 0..grid.y_cells() {
            let c = CellCoord::new(x, y);
            let (min_x, max_x) = axis_gap(x, query_cell.x, l);
            let (min_y, max_y) = axis_gap(y, query_cell.y, l);
            let min_d = min_x.hypot(min_y);
            let max_d = max_x.hypot(max_y);
            if c != query_cell && max_d <= r {
                out.guaranteed.insert(c);
            } else if min_d > r {
                out.pruned.insert(c);
            } else {
                out.candidate.insert(c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{assign_key, RawPoint};

    fn grid() -> Grid {
        Grid::new(0.0, 0.0, 90.0, 90.0, 9, 4).unwrap()
    }

    fn pt(id: &str, x: f64, y: f64) -> SpatialPoint {
        assign_key(&grid(), RawPoint::new(id, x, y, 0)).unwrap()
    }

    #[test]
    fn range_edges() {
        assert!(oracle_range(&[], (0.0, 0.0), 1.0).is_empty());
        let p = pt("a", 10.0, 10.0);
        assert_eq!(oracle_range(std::slice::from_ref(&p), (10.0, 10.0), 1e-9), vec![p]);
    }

    #[test]
    fn knn_returns_all_within_r_when_k_large() {
        let pts = vec![pt("a", 3.0, 0.0), pt("b", 1.0, 0.0), pt("c", 50.0, 0.0)];
        let out = oracle_knn(&pts, (0.0, 0.0), 10.0, 10);
        let ids: Vec<_> = out.iter().map(|(p, _)| &*p.object_id).collect();
        assert_eq!(ids, vec!["b", "a"]);
    }

    #[test]
    #[should_panic(expected = "k must be positive")]
    fn knn_rejects_zero_k() {
        oracle_knn(&[], (0.0, 0.0), 1.0, 0);
    }

    #[test]
    fn join_edges() {
        let p = pt("p", 5.0, 5.0);
        let q = pt("q", 5.0, 5.0);
        assert_eq!(oracle_join(&[p.clone()], &[q.clone()], 0.5).len(), 1);
        let far = pt("f", 85.0, 85.0);
        assert!(oracle_join(&[p], &[far], 10.0).is_empty());
    }

    #[test]
    fn layers_single_cell_grid() {
        let g = Grid::new(0.0, 0.0, 1.0, 1.0, 1, 1).unwrap();
        let layers = oracle_layers(&g, CellCoord::new(0, 0), 0.5);
        assert_eq!(layers.candidate, BTreeSet::from([CellCoord::new(0, 0)]));
        assert!(layers.guaranteed.is_empty() && layers.pruned.is_empty());
    }

    #[test]
    fn layers_huge_radius_prunes_nothing() {
        let g = grid();
        let layers = oracle_layers(&g, CellCoord::new(3, 3), 1000.0);
        assert!(layers.pruned.is_empty());
    }
}
