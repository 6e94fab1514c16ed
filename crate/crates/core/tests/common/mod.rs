#![allow(dead_code)]

use gridstream::oracle::{oracle_join, oracle_knn, oracle_range};
use gridstream::query::{JoinPair, Neighbor, ResultPayload};
use gridstream::runtime::collect_pipeline;
use gridstream::stream::{assign_key, RawPoint};
use gridstream::{
    Grid, MemorySource, PipelineConfig, Query, QueryResultBatch, RuntimeMetrics, Sources,
    SpatialPoint, Variant, WindowSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` points uniform over the grid extent, `per_sec` of them per second.
pub fn uniform_points(grid: &Grid, n: usize, per_sec: f64, seed: u64, prefix: &str) -> Vec<SpatialPoint> {
    let mut r = rng(seed);
    let b = grid.bbox();
    (0..n)
        .map(|i| {
            let x = r.random_range(b.min_x..b.max_x);
            let y = r.random_range(b.min_y..b.max_y);
            let t = (i as f64 * 1000.0 / per_sec) as i64;
            key(grid, &format!("{prefix}{}", i % 997), x, y, t)
        })
        .collect()
}

pub fn key(grid: &Grid, id: &str, x: f64, y: f64, t: i64) -> SpatialPoint {
    assign_key(grid, RawPoint::new(id, x, y, t)).expect("point inside grid")
}

/// Window starts and contents, from the first to the last window any point
/// falls in, computed straight from the window definition.
pub fn window_groups(points: &[SpatialPoint], spec: &WindowSpec) -> Vec<(i64, Vec<SpatialPoint>)> {
    let (size, slide) = (spec.size_ms(), spec.slide_ms());
    let mut first = i64::MAX;
    let mut last = i64::MIN;
    for p in points {
        let t = p.event_time;
        let lo = (t - size + 1).max(0);
        let s0 = (lo + slide - 1).div_euclid(slide) * slide;
        first = first.min(s0);
        last = last.max(t.div_euclid(slide) * slide);
    }
    let mut out = Vec::new();
    let mut s = first;
    while s <= last {
        let members = points
            .iter()
            .filter(|p| p.event_time >= s && p.event_time < s + size)
            .cloned()
            .collect();
        out.push((s, members));
        s += slide;
    }
    out
}

pub fn run(
    grid: &Grid,
    query: &Query,
    s1: Vec<SpatialPoint>,
    s2: Option<Vec<SpatialPoint>>,
    variant: Variant,
    p: usize,
) -> (Vec<QueryResultBatch>, RuntimeMetrics) {
    let sources = match s2 {
        Some(s2) => Sources::join(MemorySource::new(s1), MemorySource::new(s2)),
        None => Sources::single(MemorySource::new(s1)),
    };
    let config = PipelineConfig::new(query.kind(), variant, p);
    collect_pipeline(grid, query, sources, &config).expect("pipeline runs")
}

pub fn json_lines(batches: &[QueryResultBatch]) -> Vec<String> {
    batches.iter().map(QueryResultBatch::to_json_line).collect()
}

fn same_point(a: &SpatialPoint, b: &SpatialPoint) -> bool {
    a.object_id == b.object_id && a.event_time == b.event_time && a.x == b.x && a.y == b.y
}

/// Compares range batches against the oracle window by window.
pub fn check_range(
    batches: &[QueryResultBatch],
    points: &[SpatialPoint],
    spec: &WindowSpec,
    q: (f64, f64),
    r: f64,
) -> Result<usize, String> {
    let groups = window_groups(points, spec);
    if groups.len() != batches.len() {
        return Err(format!("{} windows, expected {}", batches.len(), groups.len()));
    }
    for ((start, members), batch) in groups.iter().zip(batches) {
        if batch.window_start != *start {
            return Err(format!("window {} where {} expected", batch.window_start, start));
        }
        let ResultPayload::Range(got) = &batch.payload else {
            return Err("not a range payload".into());
        };
        let want = oracle_range(members, q, r);
        if got.len() != want.len() || !got.iter().zip(&want).all(|(a, b)| same_point(a, b)) {
            return Err(format!("window {start}: {} results, oracle {}", got.len(), want.len()));
        }
    }
    Ok(groups.len())
}

pub fn check_knn(
    batches: &[QueryResultBatch],
    points: &[SpatialPoint],
    spec: &WindowSpec,
    q: (f64, f64),
    r: f64,
    k: usize,
) -> Result<usize, String> {
    let groups = window_groups(points, spec);
    if groups.len() != batches.len() {
        return Err(format!("{} windows, expected {}", batches.len(), groups.len()));
    }
    for ((start, members), batch) in groups.iter().zip(batches) {
        let ResultPayload::Knn(got) = &batch.payload else {
            return Err("not a kNN payload".into());
        };
        let want = oracle_knn(members, q, r, k);
        let ok = got.len() == want.len()
            && got.iter().zip(&want).all(|(n, (p, d)): (&Neighbor, _)| {
                same_point(&n.point, p) && (n.distance - d).abs() <= 1e-9 * d.max(1.0)
            });
        if !ok || batch.window_start != *start {
            return Err(format!("window {start}: {} neighbors, oracle {}", got.len(), want.len()));
        }
    }
    Ok(groups.len())
}

pub fn check_join(
    batches: &[QueryResultBatch],
    s1: &[SpatialPoint],
    s2: &[SpatialPoint],
    spec: &WindowSpec,
    r: f64,
) -> Result<usize, String> {
    let mut all: Vec<SpatialPoint> = s1.iter().chain(s2).cloned().collect();
    all.sort_by_key(|p| p.event_time);
    let groups = window_groups(&all, spec);
    if groups.len() != batches.len() {
        return Err(format!("{} windows, expected {}", batches.len(), groups.len()));
    }
    for ((start, _), batch) in groups.iter().zip(batches) {
        let in_window = |p: &&SpatialPoint| p.event_time >= *start && p.event_time < start + spec.size_ms();
        let w1: Vec<SpatialPoint> = s1.iter().filter(in_window).cloned().collect();
        let w2: Vec<SpatialPoint> = s2.iter().filter(in_window).cloned().collect();
        let ResultPayload::Join(got) = &batch.payload else {
            return Err("not a join payload".into());
        };
        let want = oracle_join(&w1, &w2, r);
        let ok = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(pair, (p, q)): (&JoinPair, _)| same_point(&pair.ordinary, p) && same_point(&pair.query, q));
        if !ok || batch.window_start != *start {
            return Err(format!("window {start}: {} pairs, oracle {}", got.len(), want.len()));
        }
    }
    Ok(groups.len())
}
