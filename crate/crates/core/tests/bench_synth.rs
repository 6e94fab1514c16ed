use gridstream::bench::{
    run_sweep, sweep_plan, synth_points, write_bench_csv, write_plot_data, write_synth_csv,
    BenchParams, Distribution, SweepSpec, SynthConfig, BENCH_CSV_HEADER,
};
use gridstream::runtime::route_keyed;
use gridstream::stream::{key_points, parse_point};
use gridstream::{BBox, Format, Grid, QueryKind, Variant};

fn synth_csv(cfg: &SynthConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    write_synth_csv(cfg, &mut buf).unwrap();
    buf
}

#[test]
fn one_point_is_one_line() {
    let cfg = SynthConfig::new(1, Distribution::Uniform, BBox::BEIJING, 100.0, 1);
    let text = String::from_utf8(synth_csv(&cfg)).unwrap();
    assert_eq!(text.lines().count(), 1);
    parse_point(text.lines().next().unwrap(), Format::Csv).unwrap();
}

#[test]
fn fixed_seed_is_byte_identical() {
    for dist in [Distribution::Uniform, Distribution::GaussianClusters] {
        let cfg = SynthConfig::new(2000, dist, BBox::BEIJING, 100.0, 5);
        assert_eq!(synth_csv(&cfg), synth_csv(&cfg));
        let other = SynthConfig { seed: 6, ..cfg.clone() };
        assert_ne!(synth_csv(&cfg), synth_csv(&other));
    }
}

#[test]
fn synthetic_csv_parses_back_in_order() {
    let cfg = SynthConfig::new(500, Distribution::GaussianClusters, BBox::BEIJING, 50.0, 9);
    let text = String::from_utf8(synth_csv(&cfg)).unwrap();
    let parsed: Vec<_> = text.lines().map(|l| parse_point(l, Format::Csv).unwrap()).collect();
    assert_eq!(parsed.len(), 500);
    assert!(parsed.windows(2).all(|w| w[0].event_time <= w[1].event_time));
    assert_eq!(parsed[50].event_time - parsed[0].event_time, 1000);
}

#[test]
fn uniform_occupancy_is_even() {
    let bbox = BBox::new(0.0, 0.0, 1.0, 1.0);
    let grid = Grid::from_bbox(bbox, 50, 16).unwrap();
    let cfg = SynthConfig::new(100_000, Distribution::Uniform, bbox, 1000.0, 3);
    let mut counts = vec![0f64; grid.cell_count() as usize];
    for p in key_points(&grid, synth_points(&cfg)) {
        let c = grid.decode_key(p.cell).unwrap();
        counts[(c.x * grid.y_cells() + c.y) as usize] += 1.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    let cv = var.sqrt() / mean;
    assert!(cv < 0.2, "cv = {cv}");
}

#[test]
fn keyed_routing_balances_uniform_load() {
    let grid = Grid::from_bbox(BBox::BEIJING, 150, 16).unwrap();
    let cfg = SynthConfig::new(100_000, Distribution::Uniform, BBox::BEIJING, 1000.0, 4);
    let mut loads = [0u64; 8];
    for p in key_points(&grid, synth_points(&cfg)) {
        loads[route_keyed(&p.cell, 8)] += 1;
    }
    let max = *loads.iter().max().unwrap() as f64;
    let min = *loads.iter().min().unwrap() as f64;
    assert!(max / min <= 1.25, "loads {loads:?}");
}

#[test]
fn sweep_rows_carry_matching_hashes() {
    let base = BenchParams {
        window_size_ms: 2000,
        window_slide_ms: 1000,
        ..Default::default()
    };
    let cfg = SynthConfig::new(5000, Distribution::GaussianClusters, BBox::BEIJING, 1000.0, 8);
    let data = synth_points(&cfg);
    let spec: SweepSpec = "r:0.01,0.05".parse().unwrap();
    let plan = sweep_plan(&spec, &base, 2).unwrap();
    let mut runs = 0;
    let rows = run_sweep(&plan, &data, |_, _| runs += 1).unwrap();
    assert_eq!(runs, 8);
    assert_eq!(rows.len(), 4);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0].variant, Variant::Grid);
        assert_eq!(pair[1].variant, Variant::Naive);
        assert_eq!(pair[0].result_hash, pair[1].result_hash);
        assert!((0.0..=1.0).contains(&pair[0].pruning_ratio));
        assert!(pair[0].distance_computations < pair[1].distance_computations);
    }
    let mut csv = Vec::new();
    write_bench_csv(&rows, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().next(), Some(BENCH_CSV_HEADER));
    assert_eq!(csv.lines().count(), 5);
    let mut plot = Vec::new();
    write_plot_data(&rows, &mut plot).unwrap();
    assert_eq!(String::from_utf8(plot).unwrap().lines().count(), 3);
}

#[test]
fn join_sweep_over_query_rate() {
    let base = BenchParams {
        query: QueryKind::Join,
        window_size_ms: 2000,
        window_slide_ms: 1000,
        r: 0.02,
        ..Default::default()
    };
    let cfg = SynthConfig::new(3000, Distribution::Uniform, BBox::BEIJING, 1000.0, 8);
    let data = synth_points(&cfg);
    let plan = sweep_plan(&"rate:5,20".parse().unwrap(), &base, 1).unwrap();
    let rows = run_sweep(&plan, &data, |_, _| {}).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].result_hash, rows[1].result_hash);
    assert_eq!(rows[2].result_hash, rows[3].result_hash);
    assert!(rows[3].distance_computations > rows[1].distance_computations);
}
