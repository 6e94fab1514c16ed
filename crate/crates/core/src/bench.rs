//! Synthetic trajectory streams and grid-vs-naive parameter sweeps.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use thiserror::Error;

use crate::grid::{BBox, Grid, GridError, DEFAULT_N_BITS};
use crate::query::{JoinQuery, KnnQuery, Metric, Query, QueryKind, RangeQuery};
use crate::runtime::{run_pipeline, PipelineConfig, RuntimeError, Sources, Variant};
use crate::stream::{format_csv_line, key_points, MemorySource, RawPoint};
use crate::window::{WindowError, WindowSpec};

/// 2008-02-02 13:30:00 UTC, where the taxi traces begin.
pub const SYNTH_START_MS: i64 = 1_201_959_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    GaussianClusters,
}

impl FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "gaussian-clusters" | "gaussian" => Ok(Distribution::GaussianClusters),
            other => Err(format!("unknown distribution {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub distribution: Distribution,
    pub bbox: BBox,
    /// Records per second of event time.
    pub rate: f64,
    pub start_ms: i64,
    /// Distinct object ids, assigned round-robin.
    pub objects: usize,
    pub clusters: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, distribution: Distribution, bbox: BBox, rate: f64, seed: u64) -> Self {
        Self {
            n,
            distribution,
            bbox,
            rate,
            start_ms: SYNTH_START_MS,
            objects: 1000,
            clusters: 10,
            seed,
        }
    }
}

/// Generates `cfg.n` points with non-decreasing timestamps.
///
/// # Panics
///
/// Panics if the rate is not positive or `objects` is zero.
pub fn synth_points(cfg: &SynthConfig) -> Vec<RawPoint> {
    assert!(cfg.rate > 0.0 && cfg.rate.is_finite(), "rate must be positive");
    assert!(cfg.objects > 0, "objects must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.bbox;
    let ids: Vec<std::sync::Arc<str>> = (1..=cfg.objects.min(cfg.n.max(1)))
        .map(|i| i.to_string().into())
        .collect();
    let centers: Vec<(f64, f64)> = (0..cfg.clusters.max(1))
        .map(|_| {
            (
                rng.random_range(b.min_x..b.max_x),
                rng.random_range(b.min_y..b.max_y),
            )
        })
        .collect();
    let sigma = 0.05 * b.width().min(b.height());
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (x, y) = match cfg.distribution {
            Distribution::Uniform => (
                rng.random_range(b.min_x..b.max_x),
                rng.random_range(b.min_y..b.max_y),
            ),
            Distribution::GaussianClusters => {
                let (cx, cy) = centers[rng.random_range(0..centers.len())];
                let x = (cx + noise.sample(&mut rng)).clamp(b.min_x, b.max_x);
                let y = (cy + noise.sample(&mut rng)).clamp(b.min_y, b.max_y);
                (x, y)
            }
        };
        let t = cfg.start_ms + (i as f64 * 1000.0 / cfg.rate).floor() as i64;
        out.push(RawPoint {
            object_id: ids[i % ids.len()].clone(),
            x,
            y,
            event_time: t,
        });
    }
    out
}

/// Writes the synthetic stream as CSV lines `id,datetime,x,y`.
pub fn write_synth_csv(cfg: &SynthConfig, mut out: impl Write) -> io::Result<()> {
    for p in synth_points(cfg) {
        writeln!(out, "{}", format_csv_line(&p.object_id, p.event_time, p.x, p.y))?;
    }
    out.flush()
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("malformed sweep {0:?}, expected axis:v1,v2,...")]
    MalformedSweep(String),
    #[error("sweep one axis at a time, got {0:?}")]
    MultiAxis(String),
    #[error("unknown sweep axis {0:?}")]
    UnknownAxis(String),
    #[error("invalid value {value} for axis {axis}: {reason}")]
    InvalidValue {
        axis: SweepAxis,
        value: f64,
        reason: &'static str,
    },
    #[error("the {axis} axis needs a {needs} query")]
    AxisNeedsQuery { axis: SweepAxis, needs: QueryKind },
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Grid,
    Radius,
    WindowSize,
    WindowSlide,
    K,
    Rate,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Grid => "grid",
            SweepAxis::Radius => "r",
            SweepAxis::WindowSize => "window-size",
            SweepAxis::WindowSlide => "window-slide",
            SweepAxis::K => "k",
            SweepAxis::Rate => "rate",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "grid" | "m" => SweepAxis::Grid,
            "r" | "radius" => SweepAxis::Radius,
            "window-size" | "wn" => SweepAxis::WindowSize,
            "window-slide" | "ws" => SweepAxis::WindowSlide,
            "k" => SweepAxis::K,
            "rate" => SweepAxis::Rate,
            other => return Err(BenchError::UnknownAxis(other.to_owned())),
        })
    }
}

/// One axis and the values to try, e.g. `grid:50,100,150,200`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl FromStr for SweepSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.matches(':').count() > 1 || s.contains(';') {
            return Err(BenchError::MultiAxis(s.to_owned()));
        }
        let (axis, values) = s
            .split_once(':')
            .ok_or_else(|| BenchError::MalformedSweep(s.to_owned()))?;
        let axis: SweepAxis = axis.parse()?;
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| BenchError::MalformedSweep(s.to_owned()))?;
        if values.is_empty() {
            return Err(BenchError::MalformedSweep(s.to_owned()));
        }
        Ok(SweepSpec { axis, values })
    }
}

/// Parameters of one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchParams {
    pub query: QueryKind,
    pub bbox: BBox,
    pub m: u32,
    pub n_bits: u32,
    pub q: (f64, f64),
    pub r: f64,
    pub k: usize,
    pub window_size_ms: i64,
    pub window_slide_ms: i64,
    pub lateness_ms: i64,
    /// Query-stream records per second of event time (joins).
    pub s2_rate: f64,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            query: QueryKind::Range,
            bbox: BBox::BEIJING,
            m: 150,
            n_bits: DEFAULT_N_BITS,
            q: (116.4, 39.9),
            r: 0.004,
            k: 10,
            window_size_ms: 10_000,
            window_slide_ms: 5_000,
            lateness_ms: 0,
            s2_rate: 10.0,
            parallelism: 1,
            seed: 42,
        }
    }
}

impl BenchParams {
    fn with(&self, axis: SweepAxis, value: f64) -> Result<BenchParams, BenchError> {
        let bad = |reason| BenchError::InvalidValue {
            axis,
            value,
            reason,
        };
        let positive_int = |v: f64| v > 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64;
        let mut p = self.clone();
        match axis {
            SweepAxis::Grid => {
                if !positive_int(value) {
                    return Err(bad("grid size must be a positive integer"));
                }
                p.m = value as u32;
            }
            SweepAxis::Radius => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(bad("radius must be positive"));
                }
                p.r = value;
            }
            SweepAxis::WindowSize | SweepAxis::WindowSlide => {
                if !positive_int(value) {
                    return Err(bad("window lengths are positive milliseconds"));
                }
                if axis == SweepAxis::WindowSize {
                    p.window_size_ms = value as i64;
                } else {
                    p.window_slide_ms = value as i64;
                }
                if p.window_slide_ms > p.window_size_ms {
                    return Err(bad("window slide must not exceed window size"));
                }
            }
            SweepAxis::K => {
                if self.query != QueryKind::Knn {
                    return Err(BenchError::AxisNeedsQuery {
                        axis,
                        needs: QueryKind::Knn,
                    });
                }
                if !positive_int(value) {
                    return Err(bad("k must be a positive integer"));
                }
                p.k = value as usize;
            }
            SweepAxis::Rate => {
                if self.query != QueryKind::Join {
                    return Err(BenchError::AxisNeedsQuery {
                        axis,
                        needs: QueryKind::Join,
                    });
                }
                if !(value > 0.0 && value.is_finite()) {
                    return Err(bad("rate must be positive"));
                }
                p.s2_rate = value;
            }
        }
        p.window()?;
        Ok(p)
    }

    pub fn window(&self) -> Result<WindowSpec, WindowError> {
        WindowSpec::new(self.window_size_ms, self.window_slide_ms, self.lateness_ms)
    }

    pub fn grid(&self) -> Result<Grid, GridError> {
        Grid::from_bbox(self.bbox, self.m, self.n_bits)
    }

    pub fn query(&self) -> Result<Query, BenchError> {
        let window = self.window()?;
        let metric = Metric::Euclidean;
        Ok(match self.query {
            QueryKind::Range => Query::Range(RangeQuery {
                q: self.q,
                r: self.r,
                window,
                metric,
            }),
            QueryKind::Knn => Query::Knn(KnnQuery {
                q: self.q,
                r: self.r,
                k: self.k,
                window,
                metric,
            }),
            QueryKind::Join => Query::Join(JoinQuery {
                r: self.r,
                window,
                metric,
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub axis: SweepAxis,
    pub param: f64,
    pub variant: Variant,
    pub rep: usize,
    pub params: BenchParams,
}

/// Expands a sweep into runs ordered by value, then variant (grid first),
/// then repetition.
pub fn sweep_plan(
    spec: &SweepSpec,
    base: &BenchParams,
    reps: usize,
) -> Result<Vec<PlannedRun>, BenchError> {
    let mut runs = Vec::with_capacity(spec.values.len() * 2 * reps);
    for &value in &spec.values {
        let params = base.with(spec.axis, value)?;
        for variant in [Variant::Grid, Variant::Naive] {
            for rep in 0..reps {
                runs.push(PlannedRun {
                    axis: spec.axis,
                    param: value,
                    variant,
                    rep,
                    params: params.clone(),
                });
            }
        }
    }
    Ok(runs)
}

/// The averaged outcome of one (value, variant) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub axis: SweepAxis,
    pub param: f64,
    pub variant: Variant,
    pub throughput_tps: f64,
    pub distance_computations: u64,
    /// `1 - grid / naive` distance computations; 0 on naive rows.
    pub pruning_ratio: f64,
    /// FNV-1a over the JSON lines of every result batch.
    pub result_hash: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub throughput_tps: f64,
    pub distance_computations: u64,
    pub result_hash: u64,
    pub windows: u64,
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// The query stream of a join benchmark: uniform over the box at
/// `params.s2_rate`, spanning the same event times as `ordinary`.
pub fn query_stream_for(params: &BenchParams, ordinary: &[RawPoint]) -> Vec<RawPoint> {
    let (lo, hi) = ordinary
        .iter()
        .fold((i64::MAX, i64::MIN), |(lo, hi), p| {
            (lo.min(p.event_time), hi.max(p.event_time))
        });
    if lo > hi {
        return Vec::new();
    }
    let span_s = (hi - lo + 1) as f64 / 1000.0;
    let n = ((span_s * params.s2_rate).round() as usize).max(1);
    let mut cfg = SynthConfig::new(
        n,
        Distribution::Uniform,
        params.bbox,
        params.s2_rate,
        params.seed ^ 0x5eed_0002,
    );
    cfg.start_ms = lo;
    cfg.objects = n.min(1000);
    synth_points(&cfg)
        .into_iter()
        .map(|mut p| {
            p.object_id = format!("q{}", p.object_id).into();
            p
        })
        .collect()
}

/// Runs one variant once over an in-memory replay.
pub fn run_once(
    params: &BenchParams,
    variant: Variant,
    ordinary: &[RawPoint],
    queries: &[RawPoint],
) -> Result<RunOutcome, BenchError> {
    let grid = params.grid()?;
    let query = params.query()?;
    let s1 = MemorySource::new(key_points(&grid, ordinary.iter().cloned()));
    let sources = if params.query == QueryKind::Join {
        let s2 = MemorySource::new(key_points(&grid, queries.iter().cloned()));
        Sources::join(s1, s2)
    } else {
        Sources::single(s1)
    };
    let config = PipelineConfig::new(params.query, variant, params.parallelism);
    let mut hash = Fnv::new();
    let metrics = run_pipeline(&grid, &query, sources, &config, |batch| {
        hash.write(batch.to_json_line().as_bytes());
        hash.write(b"\n");
    })?;
    Ok(RunOutcome {
        throughput_tps: metrics.throughput_tps,
        distance_computations: metrics.distance_computations(),
        result_hash: hash.0,
        windows: metrics.windows_emitted,
    })
}

/// Runs every planned run and averages repetitions. `progress` sees each
/// finished run.
pub fn run_sweep(
    plan: &[PlannedRun],
    ordinary: &[RawPoint],
    mut progress: impl FnMut(&PlannedRun, &RunOutcome),
) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows: Vec<BenchRow> = Vec::new();
    let mut reps: Vec<u32> = Vec::new();
    let mut queries: Option<(f64, Vec<RawPoint>)> = None;
    for run in plan {
        let qs: &[RawPoint] = if run.params.query == QueryKind::Join {
            let stale = queries
                .as_ref()
                .is_none_or(|(rate, _)| *rate != run.params.s2_rate);
            if stale {
                queries = Some((
                    run.params.s2_rate,
                    query_stream_for(&run.params, ordinary),
                ));
            }
            &queries.as_ref().expect("just filled").1
        } else {
            &[]
        };
        let outcome = run_once(&run.params, run.variant, ordinary, qs)?;
        progress(run, &outcome);
        let slot = rows
            .iter()
            .position(|r| r.param == run.param && r.variant == run.variant);
        match slot {
            Some(i) => {
                let row = &mut rows[i];
                let n = f64::from(reps[i]);
                row.throughput_tps = (row.throughput_tps * n + outcome.throughput_tps) / (n + 1.0);
                reps[i] += 1;
            }
            None => {
                rows.push(BenchRow {
                    axis: run.axis,
                    param: run.param,
                    variant: run.variant,
                    throughput_tps: outcome.throughput_tps,
                    distance_computations: outcome.distance_computations,
                    pruning_ratio: 0.0,
                    result_hash: outcome.result_hash,
                });
                reps.push(1);
            }
        }
    }
    let naive: Vec<(f64, u64)> = rows
        .iter()
        .filter(|r| r.variant == Variant::Naive)
        .map(|r| (r.param, r.distance_computations))
        .collect();
    for row in rows.iter_mut().filter(|r| r.variant == Variant::Grid) {
        if let Some((_, n)) = naive.iter().find(|(p, _)| *p == row.param) {
            row.pruning_ratio = pruning_ratio(row.distance_computations, *n);
        }
    }
    Ok(rows)
}

/// `1 - grid / naive`, clamped to [0, 1]; 0 when naive did no work.
pub fn pruning_ratio(grid: u64, naive: u64) -> f64 {
    if naive == 0 {
        return 0.0;
    }
    (1.0 - grid as f64 / naive as f64).clamp(0.0, 1.0)
}

pub const BENCH_CSV_HEADER: &str =
    "axis,param,variant,throughput_tps,distance_computations,pruning_ratio,result_hash";

pub fn write_bench_csv(rows: &[BenchRow], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.3},{},{:.6},{:016x}",
            r.axis, r.param, r.variant, r.throughput_tps, r.distance_computations, r.pruning_ratio,
            r.result_hash
        )?;
    }
    out.flush()
}

/// Whitespace-separated `param grid_tps naive_tps pruning_ratio`, one line
/// per swept value, for plotting tools.
pub fn write_plot_data(rows: &[BenchRow], mut out: impl Write) -> io::Result<()> {
    let axis = rows.first().map_or("param", |r| r.axis.as_str());
    writeln!(out, "# {axis} grid_tps naive_tps pruning_ratio")?;
    let mut params: Vec<f64> = Vec::new();
    for r in rows {
        if !params.contains(&r.param) {
            params.push(r.param);
        }
    }
    for p in params {
        let find = |v| rows.iter().find(|r| r.param == p && r.variant == v);
        let tps = |v| find(v).map_or(f64::NAN, |r| r.throughput_tps);
        let ratio = find(Variant::Grid).map_or(f64::NAN, |r| r.pruning_ratio);
        writeln!(
            out,
            "{} {:.3} {:.3} {:.6}",
            p,
            tps(Variant::Grid),
            tps(Variant::Naive),
            ratio
        )?;
    }
    out.flush()
}
