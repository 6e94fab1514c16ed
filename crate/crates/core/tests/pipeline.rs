mod common;

use std::collections::BTreeSet;
use std::thread;
use std::time::Duration;

use common::*;
use gridstream::query::{JoinQuery, KnnQuery, RangeQuery};
use gridstream::runtime::{expected_stages, route_keyed, run_pipeline, RuntimeError, StageKind};
use gridstream::stream::{PointSource, SourceStats};
use gridstream::{
    CellCoord, Grid, MemorySource, Metric, PipelineConfig, Query, QueryKind, Sources, SpatialPoint,
    Variant, WindowSpec,
};

fn beijing_like() -> Grid {
    Grid::new(0.0, 0.0, 100.0, 80.0, 50, 16).unwrap()
}

fn range(q: (f64, f64), r: f64, window: WindowSpec) -> Query {
    Query::Range(RangeQuery {
        q,
        r,
        window,
        metric: Metric::Euclidean,
    })
}

#[test]
fn range_matches_oracle_for_both_variants() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 1000, 0).unwrap();
    let pts = uniform_points(&grid, 5000, 1000.0, 1, "p");
    let q = (40.0, 40.0);
    for variant in [Variant::Grid, Variant::Naive] {
        let (batches, _) = run(&grid, &range(q, 9.0, window), pts.clone(), None, variant, 3);
        let windows = check_range(&batches, &pts, &window, q, 9.0).unwrap();
        assert!(windows >= 5);
        assert!(batches.iter().any(|b| !b.payload.is_empty()));
    }
}

#[test]
fn knn_matches_oracle() {
    let grid = beijing_like();
    let window = WindowSpec::new(3000, 1000, 0).unwrap();
    let pts = uniform_points(&grid, 4000, 1000.0, 2, "p");
    let q = (12.0, 70.0);
    for variant in [Variant::Grid, Variant::Naive] {
        let query = Query::Knn(KnnQuery {
            q,
            r: 15.0,
            k: 7,
            window,
            metric: Metric::Euclidean,
        });
        let (batches, _) = run(&grid, &query, pts.clone(), None, variant, 4);
        check_knn(&batches, &pts, &window, q, 15.0, 7).unwrap();
    }
}

#[test]
fn join_matches_oracle() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 1000, 0).unwrap();
    let s1 = uniform_points(&grid, 3000, 1000.0, 3, "p");
    let s2 = uniform_points(&grid, 60, 20.0, 4, "q");
    let query = Query::Join(JoinQuery {
        r: 4.0,
        window,
        metric: Metric::Euclidean,
    });
    for variant in [Variant::Grid, Variant::Naive] {
        let (batches, _) = run(&grid, &query, s1.clone(), Some(s2.clone()), variant, 3);
        check_join(&batches, &s1, &s2, &window, 4.0).unwrap();
    }
}

#[test]
fn results_do_not_depend_on_parallelism() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 500, 0).unwrap();
    let pts = uniform_points(&grid, 8000, 2000.0, 5, "p");
    let query = range((50.0, 40.0), 12.0, window);
    let (base, _) = run(&grid, &query, pts.clone(), None, Variant::Grid, 1);
    for p in [2, 4, 8] {
        let (other, _) = run(&grid, &query, pts.clone(), None, Variant::Grid, p);
        assert_eq!(json_lines(&base), json_lines(&other), "P={p}");
    }
    let (naive, _) = run(&grid, &query, pts, None, Variant::Naive, 2);
    assert_eq!(json_lines(&base), json_lines(&naive));
}

#[test]
fn tiny_queues_and_slow_consumer_give_identical_results() {
    let grid = beijing_like();
    let window = WindowSpec::new(1000, 500, 0).unwrap();
    let pts = uniform_points(&grid, 3000, 1000.0, 6, "p");
    let query = range((30.0, 30.0), 20.0, window);
    let (base, _) = run(&grid, &query, pts.clone(), None, Variant::Grid, 2);
    let config = PipelineConfig::new(QueryKind::Range, Variant::Grid, 2)
        .with_queue_capacity(1)
        .with_batch_size(1);
    let mut slow = Vec::new();
    run_pipeline(&grid, &query, Sources::single(MemorySource::new(pts)), &config, |b| {
        thread::sleep(Duration::from_millis(2));
        slow.push(b);
    })
    .unwrap();
    assert_eq!(json_lines(&base), json_lines(&slow));
}

#[test]
fn keyed_instances_own_disjoint_keys() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 1000, 0).unwrap();
    let pts = uniform_points(&grid, 5000, 1000.0, 7, "p");
    let config = PipelineConfig::new(QueryKind::Range, Variant::Grid, 4).with_recorded_keys();
    let (_, metrics) = gridstream::runtime::collect_pipeline(
        &grid,
        &range((50.0, 40.0), 5.0, window),
        Sources::single(MemorySource::new(pts)),
        &config,
    )
    .unwrap();
    let filters: Vec<_> = metrics.instances_of("filter").collect();
    assert_eq!(filters.len(), 4);
    let mut seen = BTreeSet::new();
    for f in &filters {
        for k in &f.keys {
            assert!(seen.insert(*k), "key {k} on two instances");
            assert_eq!(route_keyed(k, 4), f.index);
        }
    }
}

#[test]
fn routed_tuples_are_all_accounted_for() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 1000, 0).unwrap();
    let pts = uniform_points(&grid, 5000, 1000.0, 8, "p");
    let (_, metrics) = run(&grid, &range((50.0, 40.0), 5.0, window), pts, None, Variant::Grid, 3);
    let routed: u64 = metrics.sources.iter().map(|s| s.routed).sum();
    let filter_in: u64 = metrics.instances_of("filter").map(|i| i.tuples_in).sum();
    let filter_out: u64 = metrics.instances_of("filter").map(|i| i.tuples_out).sum();
    let refine_in: u64 = metrics.instances_of("refine").map(|i| i.tuples_in).sum();
    assert_eq!(routed, 5000);
    assert_eq!(filter_in, routed);
    assert_eq!(filter_out + metrics.pruned_tuples(), filter_in);
    assert_eq!(refine_in, filter_out);
    assert_eq!(metrics.tuples_consumed, 5000);
    assert_eq!(metrics.late_tuples(), 0);
}

#[test]
fn window_state_stays_bounded() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 500, 0).unwrap();
    let pts = uniform_points(&grid, 10_000, 1000.0, 9, "p");
    let (_, metrics) = run(&grid, &range((50.0, 40.0), 5.0, window), pts, None, Variant::Naive, 2);
    let per_window = 2000 / 1000 * 1000;
    let bound = window.windows_per_record() * per_window;
    for i in metrics.instances_of("refine") {
        assert!(i.peak_window_state <= bound, "{} > {bound}", i.peak_window_state);
        assert!(i.peak_window_state > 0);
    }
}

#[test]
fn late_records_are_dropped_and_counted() {
    let grid = beijing_like();
    let window = WindowSpec::new(1000, 1000, 100).unwrap();
    let mut pts = uniform_points(&grid, 3000, 1000.0, 10, "p");
    // far behind the watermark
    let mut late = pts[2500].clone();
    late.event_time = 10;
    pts.insert(2600, late);
    // within the lateness bound
    let mut tolerated = pts[2799].clone();
    tolerated.event_time -= 50;
    pts.insert(2800, tolerated);
    let (batches, metrics) = run(&grid, &range((50.0, 40.0), 30.0, window), pts, None, Variant::Grid, 2);
    assert_eq!(metrics.late_tuples(), 1);
    assert_eq!(batches.len(), 3);
}

#[test]
fn stage_mismatch_is_a_config_error() {
    let grid = beijing_like();
    let window = WindowSpec::new(1000, 1000, 0).unwrap();
    let query = range((50.0, 40.0), 5.0, window);
    let mut config = PipelineConfig::new(QueryKind::Range, Variant::Grid, 2);
    config.stages = vec![StageKind::Rebalance, StageKind::KeyedByCell];
    let err = run_pipeline(&grid, &query, Sources::single(MemorySource::new(vec![])), &config, |_| {})
        .unwrap_err();
    assert!(matches!(err, RuntimeError::StageMismatch { .. }));
    assert_eq!(
        expected_stages(QueryKind::Join, Variant::Grid),
        vec![StageKind::Replicate, StageKind::KeyedByCell]
    );
}

#[test]
fn bad_radius_and_missing_stream_are_rejected() {
    let grid = beijing_like();
    let window = WindowSpec::new(1000, 1000, 0).unwrap();
    let config = PipelineConfig::new(QueryKind::Range, Variant::Grid, 1);
    let err = run_pipeline(
        &grid,
        &range((50.0, 40.0), 0.0, window),
        Sources::single(MemorySource::new(vec![])),
        &config,
        |_| {},
    )
    .unwrap_err();
    assert!(matches!(err, RuntimeError::Query(_)));
    let join = Query::Join(JoinQuery {
        r: 1.0,
        window,
        metric: Metric::Euclidean,
    });
    let config = PipelineConfig::new(QueryKind::Join, Variant::Grid, 1);
    let err = run_pipeline(&grid, &join, Sources::single(MemorySource::new(vec![])), &config, |_| {})
        .unwrap_err();
    assert!(matches!(err, RuntimeError::Config(_)));
}

#[test]
fn empty_input_yields_no_windows() {
    let grid = beijing_like();
    let window = WindowSpec::new(1000, 500, 0).unwrap();
    let (batches, metrics) = run(&grid, &range((50.0, 40.0), 5.0, window), vec![], None, Variant::Grid, 2);
    assert!(batches.is_empty());
    assert_eq!(metrics.windows_emitted, 0);
}

struct Exploding {
    left: usize,
}

impl Iterator for Exploding {
    type Item = SpatialPoint;

    fn next(&mut self) -> Option<SpatialPoint> {
        if self.left == 0 {
            panic!("sensor feed exploded");
        }
        self.left -= 1;
        let grid = beijing_like();
        Some(key(&grid, "a", 1.0, 1.0, (100 - self.left) as i64 * 10))
    }
}

impl PointSource for Exploding {
    fn stats(&self) -> SourceStats {
        SourceStats::default()
    }
}

#[test]
fn a_panicking_stage_aborts_the_run() {
    let grid = beijing_like();
    let window = WindowSpec::new(100, 100, 0).unwrap();
    let config = PipelineConfig::new(QueryKind::Range, Variant::Grid, 2);
    let mut emitted = 0;
    let err = run_pipeline(
        &grid,
        &range((1.0, 1.0), 5.0, window),
        Sources::single(Exploding { left: 100 }),
        &config,
        |_| emitted += 1,
    )
    .unwrap_err();
    match err {
        RuntimeError::InstancePanicked { message, .. } => {
            assert!(message.contains("exploded"), "{message}")
        }
        other => panic!("unexpected {other:?}"),
    }
}

/// Three ordinary buckets near two query points, three far away. Only the
/// join instances owning the near buckets compare anything.
#[test]
fn join_touches_only_candidate_buckets() {
    let grid = Grid::new(0.0, 0.0, 90.0, 90.0, 9, 4).unwrap();
    let window = WindowSpec::tumbling(1000).unwrap();
    let r = 5.0;
    let center = |c: CellCoord| (c.x as f64 * 10.0 + 5.0, c.y as f64 * 10.0 + 5.0);
    let key_of = |c: CellCoord| grid.encode_key(c).unwrap();
    // q1 in (2,2), q2 in (4,2): their 3x3 candidate blocks overlap in column 3
    let (q1, q2) = (CellCoord::new(2, 2), CellCoord::new(4, 2));
    let mut found = None;
    'search: for c2y in 1..=3 {
        for c3y in 1..=3 {
            for c5y in 1..=3 {
                let (c2, c3, c5) = (CellCoord::new(1, c2y), CellCoord::new(3, c3y), CellCoord::new(5, c5y));
                let routes: BTreeSet<usize> =
                    [c2, c3, c5].iter().map(|c| route_keyed(&key_of(*c), 3)).collect();
                if routes.len() == 3 {
                    found = Some((c2, c3, c5));
                    break 'search;
                }
            }
        }
    }
    let (c2, c3, c5) = found.expect("a layout with three distinct instances");
    let buckets = [
        (CellCoord::new(7, 7), 3),
        (c2, 4),
        (c3, 2),
        (CellCoord::new(0, 8), 3),
        (c5, 3),
        (CellCoord::new(8, 0), 5),
    ];
    let mut s1 = Vec::new();
    for (cell, count) in buckets {
        let (x, y) = center(cell);
        for i in 0..count {
            s1.push(key(&grid, &format!("p{}", s1.len() + 1), x + i as f64 * 0.1, y, 10));
        }
    }
    assert_eq!(s1.len(), 20);
    let (x1, y1) = center(q1);
    let (x2, y2) = center(q2);
    let s2 = vec![key(&grid, "q1", x1, y1, 20), key(&grid, "q2", x2, y2, 20)];
    let query = Query::Join(JoinQuery {
        r,
        window,
        metric: Metric::Euclidean,
    });
    let (batches, metrics) = run(&grid, &query, s1.clone(), Some(s2.clone()), Variant::Grid, 3);
    check_join(&batches, &s1, &s2, &window, r).unwrap();
    // q1 x 4 in c2, q1 and q2 x 2 in c3, q2 x 3 in c5
    assert_eq!(metrics.distance_computations(), 4 + 4 + 3);
    let busy: BTreeSet<usize> = metrics
        .instances_of("join")
        .filter(|i| i.distance_computations > 0)
        .map(|i| i.index)
        .collect();
    assert_eq!(busy.len(), 3);
    let (_, naive) = run(&grid, &query, s1, Some(s2), Variant::Naive, 3);
    assert_eq!(naive.distance_computations(), 40);
}

#[test]
fn metrics_outputs() {
    let grid = beijing_like();
    let window = WindowSpec::new(2000, 1000, 0).unwrap();
    let pts = uniform_points(&grid, 5000, 1000.0, 11, "p");
    let (batches, metrics) = run(&grid, &range((50.0, 40.0), 5.0, window), pts, None, Variant::Grid, 2);
    let csv = metrics.to_csv();
    assert!(csv.starts_with("stage,instance,counter,value\n"));
    assert!(csv.contains("filter,1,pruned,"));
    assert!(csv.contains("refine,0,distance_computations,"));
    let json = metrics.summary_json();
    for key in ["throughput_tps", "distance_computations", "pruned_tuples", "windows_fired"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["windows_fired"], batches.len() as u64);
    assert!(metrics.throughput_tps > 0.0);
    assert_eq!(metrics.window_latency.len(), batches.len());
}
