use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridstream::bench::{
    run_sweep, sweep_plan, synth_points, write_bench_csv, write_plot_data, write_synth_csv,
    BenchParams, Distribution, SweepSpec, SynthConfig,
};
use gridstream::query::{JoinQuery, KnnQuery, RangeQuery};
use gridstream::stream::{open_source, parse_point, RawPoint, SourceKind};
use gridstream::{
    run_pipeline, BBox, Format, Grid, Metric, PipelineConfig, Query, QueryKind, RuntimeMetrics,
    SourceSpec, Sources, Variant, WindowSpec,
};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "gridstream", version, about = "Continuous spatial queries over point streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Points within r of a fixed query point, per window.
    Range(PointQueryArgs),
    /// The k nearest points within r of a fixed query point, per window.
    Knn(PointQueryArgs),
    /// Pairs of ordinary and query-stream points within r, per window.
    Join(JoinArgs),
    /// Compare grid and naive evaluation over a parameter sweep.
    Bench(BenchArgs),
    /// Write a synthetic trajectory stream as CSV.
    Synth(SynthArgs),
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected x,y, got {s:?}"))?;
    let x: f64 = x.trim().parse().map_err(|_| format!("bad x in {s:?}"))?;
    let y: f64 = y.trim().parse().map_err(|_| format!("bad y in {s:?}"))?;
    if !(x.is_finite() && y.is_finite()) {
        return Err(format!("non-finite coordinate in {s:?}"));
    }
    Ok((x, y))
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    s.parse().map_err(|e: gridstream::GridError| e.to_string())
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Bounding box minx,miny,maxx,maxy.
    #[arg(long, value_parser = parse_bbox, default_value = "115.5,39.6,117.6,41.1")]
    bbox: BBox,
    /// Cells along the x axis.
    #[arg(long = "grid", default_value_t = 150)]
    m: u32,
    /// Bits per axis index in a cell key.
    #[arg(long, default_value_t = gridstream::grid::DEFAULT_N_BITS)]
    nbits: u32,
}

impl GridArgs {
    fn grid(&self) -> Result<Grid> {
        Grid::from_bbox(self.bbox, self.m, self.nbits).context("invalid grid")
    }
}

#[derive(Args, Clone)]
struct WindowArgs {
    #[arg(long, default_value_t = 10_000)]
    window_size_ms: i64,
    #[arg(long, default_value_t = 5_000)]
    window_slide_ms: i64,
    /// Allowed out-of-orderness.
    #[arg(long, default_value_t = 0)]
    lateness_ms: i64,
}

impl WindowArgs {
    fn spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window_size_ms, self.window_slide_ms, self.lateness_ms)
            .context("invalid window")
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Input file of the (ordinary) stream.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Record format.
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Where records come from: file, stdin or tcp:<port>.
    #[arg(long, default_value = "file")]
    source: String,
    /// Event-time speed-up for replay; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    replay_speed: f64,
    /// Replay a file this many times, shifting time forward each pass.
    #[arg(long, default_value_t = 1)]
    loop_count: u32,
    /// Instances per parallel stage.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Evaluate without the grid (all-pairs).
    #[arg(long)]
    naive: bool,
    /// Treat r as meters and coordinates as lon/lat degrees.
    #[arg(long)]
    haversine: bool,
    /// JSON-lines results; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-instance counters as CSV.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// JSON summary of the run.
    #[arg(long)]
    summary_out: Option<PathBuf>,
}

#[derive(Args)]
struct PointQueryArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Query point x,y.
    #[arg(long, value_parser = parse_pair)]
    q: (f64, f64),
    /// Query radius in coordinate units (meters with --haversine).
    #[arg(long, default_value_t = 0.004, allow_negative_numbers = true)]
    r: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct JoinArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Input file of the query stream.
    #[arg(long)]
    query_input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.004, allow_negative_numbers = true)]
    r: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    window: WindowArgs,
    /// One axis and its values, e.g. grid:50,100,150,200.
    #[arg(long)]
    sweep: SweepSpec,
    /// Query to benchmark.
    #[arg(long, default_value = "range")]
    query: QueryKind,
    /// Replay this CSV/GeoJSON file instead of synthetic points.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Synthetic points when no input is given.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    /// Synthetic ordinary-stream records per second.
    #[arg(long, default_value_t = 1000.0)]
    rate: f64,
    /// Query-stream records per second (joins).
    #[arg(long, default_value_t = 10.0)]
    s2_rate: f64,
    #[arg(long, default_value = "uniform")]
    distribution: Distribution,
    #[arg(long, value_parser = parse_pair, default_value = "116.4,39.9")]
    q: (f64, f64),
    #[arg(long, default_value_t = 0.004, allow_negative_numbers = true)]
    r: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Bench table as CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Whitespace-separated data file for plotting.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value = "uniform")]
    distribution: Distribution,
    #[arg(long, value_parser = parse_bbox, default_value = "115.5,39.6,117.6,41.1")]
    bbox: BBox,
    /// Records per second of event time.
    #[arg(long, default_value_t = 1000.0)]
    rate: f64,
    /// Distinct object ids.
    #[arg(long, default_value_t = 1000)]
    objects: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn check_radius(r: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        bail!("radius must be positive and finite, got {r}");
    }
    Ok(())
}

fn source_spec(run: &RunArgs, input: Option<&Path>) -> Result<SourceSpec> {
    let kind = match run.source.as_str() {
        "file" => SourceKind::File(
            input
                .context("--input is required for file sources")?
                .to_path_buf(),
        ),
        other => other
            .parse::<SourceKind>()
            .map_err(|e| anyhow::anyhow!(e))?,
    };
    Ok(SourceSpec {
        kind,
        format: run.format,
        replay_speed: run.replay_speed,
        loop_count: run.loop_count,
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_query(grid: &Grid, query: Query, run: &RunArgs, sources: Sources) -> Result<()> {
    let variant = if run.naive { Variant::Naive } else { Variant::Grid };
    let config = PipelineConfig::new(query.kind(), variant, run.parallelism);
    let mut out = output(run.out.as_deref())?;
    let mut write_err = None;
    let metrics = run_pipeline(grid, &query, sources, &config, |batch| {
        if write_err.is_some() {
            return;
        }
        let res = writeln!(out, "{}", batch.to_json_line()).and_then(|_| out.flush());
        if let Err(e) = res {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("cannot write results");
    }
    report(&metrics, run)
}

fn report(metrics: &RuntimeMetrics, run: &RunArgs) -> Result<()> {
    for s in &metrics.sources {
        info!(
            "{} source: {} records, {} emitted, {} outside grid, {} malformed, {} late",
            s.name, s.stats.records, s.stats.emitted, s.stats.outside_grid, s.stats.malformed, s.late
        );
    }
    info!("{}", metrics.summary_json());
    if let Some(path) = &run.metrics_out {
        std::fs::write(path, metrics.to_csv())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &run.summary_out {
        std::fs::write(path, format!("{}\n", metrics.summary_json()))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    let io_errors: u64 = metrics.sources.iter().map(|s| s.stats.io_errors).sum();
    if io_errors > 0 {
        bail!("input stream failed mid-run; results up to the failure were written");
    }
    Ok(())
}

fn metric(run: &RunArgs) -> Metric {
    if run.haversine {
        Metric::Haversine
    } else {
        Metric::Euclidean
    }
}

fn point_query(args: &PointQueryArgs, kind: QueryKind) -> Result<()> {
    check_radius(args.r)?;
    if kind == QueryKind::Knn && args.k == 0 {
        bail!("k must be positive");
    }
    let grid = args.grid.grid()?;
    let window = args.window.spec()?;
    let (q, r, metric) = (args.q, args.r, metric(&args.run));
    let query = match kind {
        QueryKind::Range => Query::Range(RangeQuery { q, r, window, metric }),
        _ => Query::Knn(KnnQuery { q, r, k: args.k, window, metric }),
    };
    query.validate(&grid)?;
    let spec = source_spec(&args.run, args.run.input.as_deref())?;
    let source = open_source(&spec, &grid)?;
    run_query(&grid, query, &args.run, Sources::single(source))
}

fn join(args: &JoinArgs) -> Result<()> {
    check_radius(args.r)?;
    let grid = args.grid.grid()?;
    let window = args.window.spec()?;
    let query = Query::Join(JoinQuery {
        r: args.r,
        window,
        metric: metric(&args.run),
    });
    query.validate(&grid)?;
    let query_input = args
        .query_input
        .as_deref()
        .context("--query-input is required for joins")?;
    let s1 = open_source(&source_spec(&args.run, args.run.input.as_deref())?, &grid)?;
    let mut s2_spec = SourceSpec::file(query_input, args.run.format);
    s2_spec.replay_speed = args.run.replay_speed;
    s2_spec.loop_count = args.run.loop_count;
    let s2 = open_source(&s2_spec, &grid)?;
    run_query(&grid, query, &args.run, Sources::join(s1, s2))
}

fn read_points(path: &Path, format: Format) -> Result<Vec<RawPoint>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut points = Vec::new();
    let mut malformed = 0;
    for line in BufReader::new(file).lines() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_point(&line, format) {
            Ok(p) => points.push(p),
            Err(_) => malformed += 1,
        }
    }
    if malformed > 0 {
        warn!("skipped {malformed} malformed records in {}", path.display());
    }
    points.sort_by_key(|p| p.event_time);
    Ok(points)
}

fn bench(args: &BenchArgs) -> Result<()> {
    check_radius(args.r)?;
    let base = BenchParams {
        query: args.query,
        bbox: args.grid.bbox,
        m: args.grid.m,
        n_bits: args.grid.nbits,
        q: args.q,
        r: args.r,
        k: args.k,
        window_size_ms: args.window.window_size_ms,
        window_slide_ms: args.window.window_slide_ms,
        lateness_ms: args.window.lateness_ms,
        s2_rate: args.s2_rate,
        parallelism: args.parallelism,
        seed: args.seed,
    };
    base.window().context("invalid window")?;
    let plan = sweep_plan(&args.sweep, &base, args.reps.max(1))?;
    let data = match &args.input {
        Some(path) => read_points(path, args.format)?,
        None => {
            if args.n == 0 || !(args.rate > 0.0 && args.rate.is_finite()) {
                bail!("synthetic input needs n >= 1 and a positive rate");
            }
            let cfg = SynthConfig::new(args.n, args.distribution, args.grid.bbox, args.rate, args.seed);
            synth_points(&cfg)
        }
    };
    let rows = run_sweep(&plan, &data, |run, outcome| {
        info!(
            "{}={} {} rep {}: {:.0} tuples/s, {} distance computations",
            run.axis, run.param, run.variant, run.rep, outcome.throughput_tps, outcome.distance_computations
        );
    })?;
    for pair in rows.chunks(2) {
        if let [g, n] = pair {
            if g.result_hash != n.result_hash {
                bail!("grid and naive results differ at {}={}", g.axis, g.param);
            }
        }
    }
    write_bench_csv(&rows, output(args.out.as_deref())?).context("cannot write bench table")?;
    if let Some(path) = &args.plot_data {
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        write_plot_data(&rows, BufWriter::new(file)).context("cannot write plot data")?;
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    if args.n == 0 {
        bail!("n must be at least 1");
    }
    if !(args.rate > 0.0 && args.rate.is_finite()) || args.objects == 0 {
        bail!("rate and objects must be positive");
    }
    let mut cfg = SynthConfig::new(args.n, args.distribution, args.bbox, args.rate, args.seed);
    cfg.objects = args.objects;
    write_synth_csv(&cfg, output(args.out.as_deref())?).context("cannot write synthetic stream")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Range(args) => point_query(args, QueryKind::Range),
        Command::Knn(args) => point_query(args, QueryKind::Knn),
        Command::Join(args) => join(args),
        Command::Bench(args) => bench(args),
        Command::Synth(args) => synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
