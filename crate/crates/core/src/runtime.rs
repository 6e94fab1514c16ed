//! In-process keyed dataflow runtime.
//!
//! Every operator instance is a thread. Stages talk over bounded channels
//! (the capacity is the backpressure bound) carrying batches of items,
//! progress markers and an end marker. Items from one sender arrive in send
//! order. Progress is merged at every instance: the watermark is the minimum
//! over its inputs, and the first/last populated window starts are the
//! min/max over inputs. The final merge runs on the calling thread and emits
//! exactly one batch for every window between the first and last populated
//! windows of the input, so the result stream does not depend on the
//! parallelism, the queue capacity or the variant.
//!
//! Topologies:
//!
//! ```text
//! grid range  source -key-> filter[u] -rebalance-> refine[v] -> merge
//! grid knn    source -key-> filter[u] -rebalance-> refine[v] -> merge (top k)
//! grid join   S1 -key------------\
//!             S2 -replicate-key--+-> join[p] -> merge
//! naive range source -rebalance-> refine[p] -> merge
//! naive knn   source -rebalance-> refine[p] -> merge (top k)
//! naive join  S1 -rebalance-\
//!             S2 -broadcast-+-> join[p] -> merge
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{BuildHasherDefault, Hasher};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use serde_json::json;
use thiserror::Error;

use crate::grid::{CellKey, CellLayer, Grid, LayerSets};
use crate::query::{
    join_naive, join_per_key, join_replicate, knn_local, knn_merge, range_naive, range_refine,
    DistanceMeter, Metric, Query, QueryError, QueryKind, QueryResultBatch, Replica, ResultPayload,
};
use crate::stream::{PointSource, SourceStats, SpatialPoint};
use crate::window::{WatermarkTracker, WindowEngine, WindowInstance, WindowSpec};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("stage list {found:?} does not match the {query} {variant} plan {expected:?}")]
    StageMismatch {
        query: QueryKind,
        variant: Variant,
        expected: Vec<StageKind>,
        found: Vec<StageKind>,
    },
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("operator {stage}[{index}] panicked: {message}")]
    InstancePanicked {
        stage: &'static str,
        index: usize,
        message: String,
    },
    #[error("pipeline aborted: a stage disconnected before finishing")]
    Aborted,
}

/// Grid-accelerated or all-pairs evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Grid,
    Naive,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Grid => "grid",
            Variant::Naive => "naive",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grid" => Ok(Variant::Grid),
            "naive" => Ok(Variant::Naive),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

/// How a stage distributes its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    /// Partition by cell key.
    KeyedByCell,
    /// Round-robin per sender.
    Rebalance,
    /// Gather partial results on one instance.
    MergeToOne,
    /// Copy each query point to the cells around it.
    Replicate,
    /// Send each query point to every instance.
    Broadcast,
}

/// The stage list each query and variant runs.
pub fn expected_stages(kind: QueryKind, variant: Variant) -> Vec<StageKind> {
    use StageKind::*;
    match (kind, variant) {
        (QueryKind::Range, Variant::Grid) => vec![KeyedByCell, Rebalance],
        (QueryKind::Knn, Variant::Grid) => vec![KeyedByCell, Rebalance, MergeToOne],
        (QueryKind::Join, Variant::Grid) => vec![Replicate, KeyedByCell],
        (QueryKind::Range, Variant::Naive) => vec![Rebalance],
        (QueryKind::Knn, Variant::Naive) => vec![Rebalance, MergeToOne],
        (QueryKind::Join, Variant::Naive) => vec![Rebalance, Broadcast],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub stages: Vec<StageKind>,
    /// Default instance count per stage.
    pub parallelism: usize,
    /// Filter-stage instances (grid range/kNN); defaults to `parallelism`.
    pub filter_parallelism: Option<usize>,
    /// Refine/join-stage instances; defaults to `parallelism`.
    pub refine_parallelism: Option<usize>,
    /// Messages buffered per channel before senders block.
    pub queue_capacity: usize,
    /// Items per data message.
    pub batch_size: usize,
    /// Record the cell keys each keyed instance sees.
    pub record_keys: bool,
}

impl PipelineConfig {
    pub fn new(kind: QueryKind, variant: Variant, parallelism: usize) -> Self {
        Self {
            variant,
            stages: expected_stages(kind, variant),
            parallelism,
            filter_parallelism: None,
            refine_parallelism: None,
            queue_capacity: 64,
            batch_size: 256,
            record_keys: false,
        }
    }

    pub fn with_queue_capacity(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_recorded_keys(mut self) -> Self {
        self.record_keys = true;
        self
    }

    fn filter_instances(&self) -> usize {
        self.filter_parallelism.unwrap_or(self.parallelism)
    }

    fn refine_instances(&self) -> usize {
        self.refine_parallelism.unwrap_or(self.parallelism)
    }

    fn validate(&self, kind: QueryKind) -> Result<(), RuntimeError> {
        if self.parallelism == 0 || self.filter_instances() == 0 || self.refine_instances() == 0 {
            return Err(RuntimeError::Config("parallelism must be at least 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(RuntimeError::Config("queue capacity must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(RuntimeError::Config("batch size must be at least 1".into()));
        }
        let expected = expected_stages(kind, self.variant);
        if self.stages != expected {
            return Err(RuntimeError::StageMismatch {
                query: kind,
                variant: self.variant,
                expected,
                found: self.stages.clone(),
            });
        }
        Ok(())
    }
}

/// Multiplicative hasher for cell keys, which are already well spread.
#[derive(Default)]
struct KeyHasher(u64);

impl Hasher for KeyHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.write_u64(u64::from(*b));
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
}

type KeyMap<V> = HashMap<CellKey, V, BuildHasherDefault<KeyHasher>>;

/// Instance for a key: FNV-1a of the key's bit string modulo `p`.
pub fn route_keyed(key: &CellKey, p: usize) -> usize {
    (key.stable_hash() % p as u64) as usize
}

/// Per-sender round-robin.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    next: usize,
}

impl RoundRobin {
    pub fn route(&mut self, p: usize) -> usize {
        let dest = self.next % p;
        self.next = (dest + 1) % p;
        dest
    }
}

/// Input streams of a pipeline. Joins need both.
pub struct Sources {
    pub ordinary: Box<dyn PointSource>,
    pub query: Option<Box<dyn PointSource>>,
}

impl Sources {
    pub fn single(source: impl PointSource + 'static) -> Self {
        Self {
            ordinary: Box::new(source),
            query: None,
        }
    }

    pub fn join(ordinary: impl PointSource + 'static, query: impl PointSource + 'static) -> Self {
        Self {
            ordinary: Box::new(ordinary),
            query: Some(Box::new(query)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceMetrics {
    pub stage: &'static str,
    pub index: usize,
    pub tuples_in: u64,
    pub tuples_out: u64,
    pub distance_computations: u64,
    pub pruned: u64,
    pub late: u64,
    pub windows_fired: u64,
    /// Largest number of records held in window state at once.
    pub peak_window_state: usize,
    /// Cell keys seen by a keyed instance, when recording is on.
    pub keys: BTreeSet<CellKey>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceReport {
    pub name: &'static str,
    pub stats: SourceStats,
    /// Records behind the watermark, dropped.
    pub late: u64,
    /// Items handed to the first stage (replicas count individually).
    pub routed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuntimeMetrics {
    pub sources: Vec<SourceReport>,
    pub instances: Vec<InstanceMetrics>,
    pub windows_emitted: u64,
    pub tuples_consumed: u64,
    /// Wall time from a window's end passing the source watermark to its
    /// result being emitted, per window start.
    pub window_latency: Vec<(i64, Duration)>,
    pub elapsed: Duration,
    /// Tuples consumed per second, steady state (first and last window
    /// excluded) when there are at least three windows.
    pub throughput_tps: f64,
}

impl RuntimeMetrics {
    pub fn distance_computations(&self) -> u64 {
        self.instances.iter().map(|i| i.distance_computations).sum()
    }

    pub fn pruned_tuples(&self) -> u64 {
        self.instances.iter().map(|i| i.pruned).sum()
    }

    pub fn late_tuples(&self) -> u64 {
        self.sources.iter().map(|s| s.late).sum::<u64>()
            + self.instances.iter().map(|i| i.late).sum::<u64>()
    }

    pub fn instances_of(&self, stage: &str) -> impl Iterator<Item = &InstanceMetrics> {
        let stage = stage.to_owned();
        self.instances.iter().filter(move |i| i.stage == stage)
    }

    /// `stage,instance,counter,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,instance,counter,value\n");
        for s in &self.sources {
            let rows = [
                ("records", s.stats.records),
                ("emitted", s.stats.emitted),
                ("outside_grid", s.stats.outside_grid),
                ("malformed", s.stats.malformed),
                ("io_errors", s.stats.io_errors),
                ("late", s.late),
                ("routed", s.routed),
            ];
            for (name, v) in rows {
                out.push_str(&format!("source:{},0,{},{}\n", s.name, name, v));
            }
        }
        for i in &self.instances {
            let rows = [
                ("tuples_in", i.tuples_in),
                ("tuples_out", i.tuples_out),
                ("distance_computations", i.distance_computations),
                ("pruned", i.pruned),
                ("late", i.late),
                ("windows_fired", i.windows_fired),
                ("peak_window_state", i.peak_window_state as u64),
            ];
            for (name, v) in rows {
                out.push_str(&format!("{},{},{},{}\n", i.stage, i.index, name, v));
            }
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        json!({
            "throughput_tps": self.throughput_tps,
            "distance_computations": self.distance_computations(),
            "pruned_tuples": self.pruned_tuples(),
            "windows_fired": self.windows_emitted,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Progress {
    watermark: i64,
    first: Option<i64>,
    last: Option<i64>,
}

impl Progress {
    const START: Progress = Progress {
        watermark: i64::MIN,
        first: None,
        last: None,
    };
}

enum Msg<T> {
    Data(Vec<T>),
    Progress(Progress),
    End,
}

struct Envelope<T> {
    from: usize,
    msg: Msg<T>,
}

/// Receiver side hung up or an upstream vanished without finishing.
#[derive(Debug)]
struct Broken;

fn channels<T>(n: usize, capacity: usize) -> (Vec<Sender<Envelope<T>>>, Vec<Receiver<Envelope<T>>>) {
    (0..n).map(|_| bounded(capacity)).unzip()
}

struct Outlet<T> {
    from: usize,
    senders: Vec<Sender<Envelope<T>>>,
    buffers: Vec<Vec<T>>,
    batch: usize,
    rr: RoundRobin,
    routes: KeyMap<usize>,
    last: Progress,
    items: u64,
}

impl<T> Outlet<T> {
    fn new(from: usize, senders: Vec<Sender<Envelope<T>>>, batch: usize) -> Self {
        let buffers = senders.iter().map(|_| Vec::with_capacity(batch)).collect();
        Self {
            from,
            senders,
            buffers,
            batch,
            rr: RoundRobin::default(),
            routes: KeyMap::default(),
            last: Progress::START,
            items: 0,
        }
    }

    fn width(&self) -> usize {
        self.senders.len()
    }

    fn send(&self, dest: usize, msg: Msg<T>) -> Result<(), Broken> {
        self.senders[dest]
            .send(Envelope {
                from: self.from,
                msg,
            })
            .map_err(|_| Broken)
    }

    fn push_to(&mut self, dest: usize, item: T) -> Result<(), Broken> {
        self.items += 1;
        self.buffers[dest].push(item);
        if self.buffers[dest].len() >= self.batch {
            self.flush(dest)?;
        }
        Ok(())
    }

    fn flush(&mut self, dest: usize) -> Result<(), Broken> {
        if self.buffers[dest].is_empty() {
            return Ok(());
        }
        let batch = std::mem::replace(&mut self.buffers[dest], Vec::with_capacity(self.batch));
        self.send(dest, Msg::Data(batch))
    }

    fn keyed(&mut self, key: &CellKey, item: T) -> Result<(), Broken> {
        let width = self.width();
        let dest = *self
            .routes
            .entry(*key)
            .or_insert_with(|| route_keyed(key, width));
        self.push_to(dest, item)
    }

    fn rebalance(&mut self, item: T) -> Result<(), Broken> {
        let dest = self.rr.route(self.width());
        self.push_to(dest, item)
    }

    fn broadcast(&mut self, item: T) -> Result<(), Broken>
    where
        T: Clone,
    {
        for dest in 1..self.width() {
            self.push_to(dest, item.clone())?;
        }
        self.push_to(0, item)
    }

    fn progress(&mut self, p: Progress) -> Result<(), Broken> {
        if p == self.last {
            return Ok(());
        }
        self.last = p;
        for dest in 0..self.width() {
            self.flush(dest)?;
            self.send(dest, Msg::Progress(p))?;
        }
        Ok(())
    }

    fn end(&mut self) -> Result<(), Broken> {
        for dest in 0..self.width() {
            self.flush(dest)?;
            self.send(dest, Msg::End)?;
        }
        Ok(())
    }
}

enum Event<T> {
    Data(Vec<T>),
    Progress(Progress),
    End,
}

struct Inlet<T> {
    rx: Receiver<Envelope<T>>,
    inputs: Vec<Progress>,
    ended: Vec<bool>,
    open: usize,
    merged: Progress,
}

impl<T> Inlet<T> {
    fn new(rx: Receiver<Envelope<T>>, inputs: usize) -> Self {
        Self {
            rx,
            inputs: vec![Progress::START; inputs],
            ended: vec![false; inputs],
            open: inputs,
            merged: Progress::START,
        }
    }

    fn merge(&self) -> Progress {
        let watermark = self
            .inputs
            .iter()
            .zip(&self.ended)
            .map(|(p, ended)| if *ended { i64::MAX } else { p.watermark })
            .min()
            .unwrap_or(i64::MAX);
        Progress {
            watermark,
            first: self.inputs.iter().filter_map(|p| p.first).min(),
            last: self.inputs.iter().filter_map(|p| p.last).max(),
        }
    }

    fn next(&mut self) -> Result<Event<T>, Broken> {
        loop {
            if self.open == 0 {
                return Ok(Event::End);
            }
            let env = self.rx.recv().map_err(|_| Broken)?;
            match env.msg {
                Msg::Data(items) => return Ok(Event::Data(items)),
                Msg::Progress(p) => self.inputs[env.from] = p,
                Msg::End => {
                    if !self.ended[env.from] {
                        self.ended[env.from] = true;
                        self.open -= 1;
                    }
                    if self.open == 0 {
                        self.merged = self.merge();
                        return Ok(Event::End);
                    }
                }
            }
            let merged = self.merge();
            if merged != self.merged {
                self.merged = merged;
                return Ok(Event::Progress(merged));
            }
        }
    }

    fn progress(&self) -> Progress {
        self.merged
    }
}

/// Window close times observed at the sources, keyed by window end.
type CloseTimes = Arc<Mutex<BTreeMap<i64, Instant>>>;

struct SourceCtx<'a> {
    name: &'static str,
    window: WindowSpec,
    consumed: &'a AtomicU64,
    closes: CloseTimes,
}

fn run_source<T>(
    ctx: SourceCtx<'_>,
    mut source: Box<dyn PointSource>,
    mut outlet: Outlet<T>,
    mut route: impl FnMut(SpatialPoint, &mut Outlet<T>) -> Result<(), Broken>,
) -> Result<SourceReport, Broken> {
    let window = ctx.window;
    let mut tracker = WatermarkTracker::new(window.lateness_ms());
    let mut progress = Progress::START;
    let mut late = 0;
    let mut bucket = i64::MIN;
    // window ends are start + size with start a multiple of slide
    let end_bucket = |wm: i64| wm.saturating_sub(window.size_ms()).div_euclid(window.slide_ms());
    for point in source.by_ref() {
        ctx.consumed.fetch_add(1, Ordering::Relaxed);
        let t = point.event_time;
        if tracker.is_late(t) {
            late += 1;
            continue;
        }
        let wm = tracker.observe(t);
        let first = window.first_window_start(t);
        let last = window.last_window_start(t);
        progress.first = Some(progress.first.map_or(first, |f| f.min(first)));
        progress.last = Some(progress.last.map_or(last, |l| l.max(last)));
        route(point, &mut outlet)?;
        let b = end_bucket(wm);
        if b != bucket || outlet.last.first != progress.first || outlet.last.last != progress.last {
            if b != bucket {
                let end = b
                    .saturating_mul(window.slide_ms())
                    .saturating_add(window.size_ms());
                let mut closes = ctx.closes.lock().expect("close-time map poisoned");
                closes.insert(end, Instant::now());
            }
            bucket = b;
            progress.watermark = wm;
            outlet.progress(progress)?;
        }
    }
    progress.watermark = i64::MAX;
    outlet.progress(progress)?;
    outlet.end()?;
    Ok(SourceReport {
        name: ctx.name,
        stats: source.stats(),
        late,
        routed: outlet.items,
    })
}

/// An item after the filter phase, tagged with its cell layer.
#[derive(Debug, Clone)]
struct Tagged {
    point: SpatialPoint,
    layer: CellLayer,
}

fn filter_worker(
    index: usize,
    mut inlet: Inlet<SpatialPoint>,
    mut outlet: Outlet<Tagged>,
    layers: &LayerSets,
    record_keys: bool,
) -> Result<InstanceMetrics, Broken> {
    let mut m = InstanceMetrics {
        stage: "filter",
        index,
        ..Default::default()
    };
    loop {
        match inlet.next()? {
            Event::Data(batch) => {
                for point in batch {
                    m.tuples_in += 1;
                    if record_keys {
                        m.keys.insert(point.cell);
                    }
                    match layers.classify_key(point.cell) {
                        CellLayer::Pruned => m.pruned += 1,
                        layer => outlet.rebalance(Tagged { point, layer })?,
                    }
                }
            }
            Event::Progress(p) => outlet.progress(p)?,
            Event::End => break,
        }
    }
    outlet.progress(inlet.progress())?;
    outlet.end()?;
    m.tuples_out = outlet.items;
    Ok(m)
}

/// A per-window partial result from one instance.
struct Partial {
    start: i64,
    payload: ResultPayload,
}

fn windowed_worker<T: Clone>(
    stage: &'static str,
    index: usize,
    mut inlet: Inlet<T>,
    mut outlet: Outlet<Partial>,
    window: WindowSpec,
    event_time: impl Fn(&T) -> i64,
    mut compute: impl FnMut(Vec<T>, &mut DistanceMeter) -> ResultPayload,
    metric: Metric,
    mut on_item: impl FnMut(&T, &mut InstanceMetrics),
) -> Result<InstanceMetrics, Broken> {
    let mut m = InstanceMetrics {
        stage,
        index,
        ..Default::default()
    };
    let mut engine: WindowEngine<T> = WindowEngine::new(window);
    let mut meter = DistanceMeter::new(metric);
    let mut emit = |fired: Vec<WindowInstance<T>>,
                    outlet: &mut Outlet<Partial>,
                    meter: &mut DistanceMeter|
     -> Result<(), Broken> {
        for w in fired {
            if w.members.is_empty() {
                continue;
            }
            let payload = compute(w.members, meter);
            if !payload.is_empty() {
                outlet.push_to(
                    0,
                    Partial {
                        start: w.start,
                        payload,
                    },
                )?;
            }
        }
        Ok(())
    };
    loop {
        match inlet.next()? {
            Event::Data(batch) => {
                for item in batch {
                    m.tuples_in += 1;
                    on_item(&item, &mut m);
                    let t = event_time(&item);
                    engine.insert(t, item);
                }
            }
            Event::Progress(p) => {
                let fired = engine.fire_ready(p.watermark);
                emit(fired, &mut outlet, &mut meter)?;
                outlet.progress(p)?;
            }
            Event::End => break,
        }
    }
    let fired = engine.flush();
    emit(fired, &mut outlet, &mut meter)?;
    outlet.progress(inlet.progress())?;
    outlet.end()?;
    m.tuples_out = outlet.items;
    m.distance_computations = meter.count();
    m.late = engine.late_count();
    m.windows_fired = engine.fired();
    m.peak_window_state = engine.peak_stored();
    Ok(m)
}

#[derive(Debug, Clone)]
enum JoinItem {
    Ordinary(SpatialPoint),
    Replica(Replica),
    Query(SpatialPoint),
}

impl JoinItem {
    fn event_time(&self) -> i64 {
        match self {
            JoinItem::Ordinary(p) | JoinItem::Query(p) => p.event_time,
            JoinItem::Replica(r) => r.query.event_time,
        }
    }

    fn key(&self) -> CellKey {
        match self {
            JoinItem::Ordinary(p) | JoinItem::Query(p) => p.cell,
            JoinItem::Replica(r) => r.key,
        }
    }
}

fn grid_join_window(members: Vec<JoinItem>, r: f64, meter: &mut DistanceMeter) -> ResultPayload {
    let mut replicas: KeyMap<Vec<Replica>> = KeyMap::default();
    let mut ordinary = Vec::new();
    for item in members {
        match item {
            JoinItem::Ordinary(p) => ordinary.push(p),
            JoinItem::Replica(rep) => replicas.entry(rep.key).or_default().push(rep),
            JoinItem::Query(_) => unreachable!("grid join receives replicas only"),
        }
    }
    // only cells some query point was replicated to can produce pairs
    let mut buckets: KeyMap<Vec<&SpatialPoint>> = KeyMap::default();
    for p in &ordinary {
        if replicas.contains_key(&p.cell) {
            buckets.entry(p.cell).or_default().push(p);
        }
    }
    let mut pairs = Vec::new();
    for (key, points) in &buckets {
        pairs.extend(join_per_key(points, &replicas[key], r, meter));
    }
    ResultPayload::Join(pairs)
}

fn naive_join_window(members: Vec<JoinItem>, r: f64, meter: &mut DistanceMeter) -> ResultPayload {
    let mut ordinary = Vec::new();
    let mut queries = Vec::new();
    for item in members {
        match item {
            JoinItem::Ordinary(p) => ordinary.push(p),
            JoinItem::Query(q) => queries.push(q),
            JoinItem::Replica(_) => unreachable!("naive join receives raw query points"),
        }
    }
    ResultPayload::Join(join_naive(&ordinary, &queries, r, meter))
}

struct SinkReport {
    windows: u64,
    latency: Vec<(i64, Duration)>,
    samples: Vec<(Instant, u64)>,
}

struct Merger<'a, F> {
    kind: QueryKind,
    k: usize,
    window: WindowSpec,
    pending: BTreeMap<i64, Vec<ResultPayload>>,
    next: Option<i64>,
    on_batch: F,
    consumed: &'a AtomicU64,
    closes: CloseTimes,
    report: SinkReport,
}

impl<F: FnMut(QueryResultBatch)> Merger<'_, F> {
    fn emit_until(&mut self, progress: Progress, finished: bool) {
        let (Some(first), Some(last)) = (progress.first, progress.last) else {
            return;
        };
        let mut start = self.next.unwrap_or(first).max(first);
        while start <= last {
            let end = start + self.window.size_ms();
            if !finished && end > progress.watermark {
                break;
            }
            let parts = self.pending.remove(&start).unwrap_or_default();
            let payload = self.merge(parts);
            let now = Instant::now();
            let closed = self
                .closes
                .lock()
                .expect("close-time map poisoned")
                .get(&end)
                .copied();
            self.report
                .latency
                .push((start, closed.map_or(Duration::ZERO, |c| now.saturating_duration_since(c))));
            self.report
                .samples
                .push((now, self.consumed.load(Ordering::Relaxed)));
            (self.on_batch)(QueryResultBatch {
                window_start: start,
                window_end: end,
                payload,
            });
            self.report.windows += 1;
            start += self.window.slide_ms();
            self.next = Some(start);
        }
    }

    fn merge(&self, parts: Vec<ResultPayload>) -> ResultPayload {
        let mut payload = match self.kind {
            QueryKind::Knn => {
                let lists = parts.into_iter().map(|p| match p {
                    ResultPayload::Knn(v) => v,
                    _ => unreachable!("kNN partials only"),
                });
                ResultPayload::Knn(knn_merge(lists, self.k))
            }
            kind => {
                let mut merged = ResultPayload::empty(kind);
                for part in parts {
                    match (&mut merged, part) {
                        (ResultPayload::Range(a), ResultPayload::Range(b)) => a.extend(b),
                        (ResultPayload::Join(a), ResultPayload::Join(b)) => a.extend(b),
                        _ => unreachable!("partials match the query kind"),
                    }
                }
                merged
            }
        };
        payload.canonicalize();
        payload
    }

    fn run(&mut self, mut inlet: Inlet<Partial>) -> Result<(), Broken> {
        loop {
            match inlet.next()? {
                Event::Data(parts) => {
                    for part in parts {
                        self.pending.entry(part.start).or_default().push(part.payload);
                    }
                }
                Event::Progress(p) => self.emit_until(p, false),
                Event::End => {
                    self.emit_until(inlet.progress(), true);
                    return Ok(());
                }
            }
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_owned()
    }
}

type Handle<'s, T> = (&'static str, usize, thread::ScopedJoinHandle<'s, Result<T, Broken>>);

fn join_all<T>(handles: Vec<Handle<'_, T>>) -> Result<Vec<T>, RuntimeError> {
    let mut out = Vec::with_capacity(handles.len());
    let mut first_err = None;
    for (stage, index, h) in handles {
        match h.join() {
            Ok(Ok(v)) => out.push(v),
            Ok(Err(Broken)) => {
                first_err.get_or_insert(RuntimeError::Aborted);
            }
            Err(payload) => {
                let err = RuntimeError::InstancePanicked {
                    stage,
                    index,
                    message: panic_message(payload),
                };
                // a panic explains any downstream abort
                if !matches!(first_err, Some(RuntimeError::InstancePanicked { .. })) {
                    first_err = Some(err);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Runs one continuous query to the end of its sources, handing each
/// window's result to `on_batch` in window order.
pub fn run_pipeline<F>(
    grid: &Grid,
    query: &Query,
    sources: Sources,
    config: &PipelineConfig,
    on_batch: F,
) -> Result<RuntimeMetrics, RuntimeError>
where
    F: FnMut(QueryResultBatch),
{
    let kind = query.kind();
    config.validate(kind)?;
    query.validate(grid)?;
    match (kind, &sources.query) {
        (QueryKind::Join, None) => {
            return Err(RuntimeError::Config("a join needs a query stream".into()))
        }
        (QueryKind::Range | QueryKind::Knn, Some(_)) => {
            return Err(RuntimeError::Config(format!("a {kind} query takes one stream")))
        }
        _ => {}
    }
    let started = Instant::now();
    let consumed = AtomicU64::new(0);
    let closes: CloseTimes = Arc::default();
    let window = query.window();
    let metric = query.metric();
    let r = query.radius();
    let k = match query {
        Query::Knn(q) => q.k,
        _ => 0,
    };
    let cap = config.queue_capacity;
    let record_keys = config.record_keys;
    let batch = config.batch_size;
    let layers = query.layer_sets(grid)?;

    let mut merger = Merger {
        kind,
        k,
        window,
        pending: BTreeMap::new(),
        next: None,
        on_batch,
        consumed: &consumed,
        closes: closes.clone(),
        report: SinkReport {
            windows: 0,
            latency: Vec::new(),
            samples: Vec::new(),
        },
    };

    let (source_reports, instances, merge_result) = thread::scope(|s| {
        let mut source_handles: Vec<Handle<'_, SourceReport>> = Vec::new();
        let mut worker_handles: Vec<Handle<'_, InstanceMetrics>> = Vec::new();
        let ctx = |name| SourceCtx {
            name,
            window,
            consumed: &consumed,
            closes: closes.clone(),
        };
        let (sink_tx, sink_rx) = bounded::<Envelope<Partial>>(cap);
        let workers;

        match (kind, config.variant) {
            (QueryKind::Range | QueryKind::Knn, variant) => {
                let v = match variant {
                    Variant::Grid => config.refine_instances(),
                    Variant::Naive => config.parallelism,
                };
                workers = v;
                let (refine_tx, refine_rx) = channels::<Tagged>(v, cap);
                let refine_inputs = if variant == Variant::Grid {
                    let u = config.filter_instances();
                    let (filter_tx, filter_rx) = channels::<SpatialPoint>(u, cap);
                    let layers = layers.as_ref().expect("range and kNN have layer sets");
                    for (i, rx) in filter_rx.into_iter().enumerate() {
                        let inlet = Inlet::new(rx, 1);
                        let outlet = Outlet::new(i, refine_tx.clone(), batch);
                        worker_handles.push((
                            "filter",
                            i,
                            s.spawn(move || filter_worker(i, inlet, outlet, layers, record_keys)),
                        ));
                    }
                    let outlet = Outlet::new(0, filter_tx, batch);
                    let src = sources.ordinary;
                    source_handles.push((
                        "source",
                        0,
                        s.spawn(move || {
                            run_source(ctx("ordinary"), src, outlet, |p, out| {
                                let key = p.cell;
                                out.keyed(&key, p)
                            })
                        }),
                    ));
                    u
                } else {
                    let outlet = Outlet::new(0, refine_tx.clone(), batch);
                    let src = sources.ordinary;
                    source_handles.push((
                        "source",
                        0,
                        s.spawn(move || {
                            run_source(ctx("ordinary"), src, outlet, |point, out| {
                                out.rebalance(Tagged {
                                    point,
                                    layer: CellLayer::Candidate,
                                })
                            })
                        }),
                    ));
                    1
                };
                drop(refine_tx);
                for (i, rx) in refine_rx.into_iter().enumerate() {
                    let inlet = Inlet::new(rx, refine_inputs);
                    let outlet = Outlet::new(i, vec![sink_tx.clone()], batch.min(16));
                    let q = query.query_point().expect("range and kNN have a query point");
                    let compute = move |members: Vec<Tagged>, meter: &mut DistanceMeter| {
                        match (kind, variant) {
                            (QueryKind::Range, Variant::Grid) => {
                                let (g, c): (Vec<_>, Vec<_>) = members
                                    .into_iter()
                                    .partition(|t| t.layer == CellLayer::Guaranteed);
                                ResultPayload::Range(range_refine(
                                    g.into_iter().map(|t| t.point).collect(),
                                    c.into_iter().map(|t| t.point).collect(),
                                    q,
                                    r,
                                    meter,
                                ))
                            }
                            (QueryKind::Range, Variant::Naive) => ResultPayload::Range(
                                range_naive(members.into_iter().map(|t| t.point), q, r, meter),
                            ),
                            _ => ResultPayload::Knn(knn_local(
                                members.into_iter().map(|t| t.point),
                                q,
                                r,
                                k,
                                meter,
                            )),
                        }
                    };
                    worker_handles.push((
                        "refine",
                        i,
                        s.spawn(move || {
                            windowed_worker(
                                "refine",
                                i,
                                inlet,
                                outlet,
                                window,
                                |t: &Tagged| t.point.event_time,
                                compute,
                                metric,
                                |_, _| {},
                            )
                        }),
                    ));
                }
            }
            (QueryKind::Join, variant) => {
                let p = config.refine_instances();
                workers = p;
                let (join_tx, join_rx) = channels::<JoinItem>(p, cap);
                let s1_outlet = Outlet::new(0, join_tx.clone(), batch);
                let s2_outlet = Outlet::new(1, join_tx, batch);
                let s1 = sources.ordinary;
                let s2 = sources.query.expect("checked above");
                let grid = grid.clone();
                source_handles.push((
                    "source",
                    0,
                    s.spawn(move || {
                        run_source(ctx("ordinary"), s1, s1_outlet, |p, out| match variant {
                            Variant::Grid => {
                                let key = p.cell;
                                out.keyed(&key, JoinItem::Ordinary(p))
                            }
                            Variant::Naive => out.rebalance(JoinItem::Ordinary(p)),
                        })
                    }),
                ));
                source_handles.push((
                    "source",
                    1,
                    s.spawn(move || {
                        run_source(ctx("query"), s2, s2_outlet, |q, out| match variant {
                            Variant::Grid => {
                                let replicas = join_replicate(&q, &grid, r, metric)
                                    .expect("keyed points decode on their own grid");
                                for rep in replicas {
                                    let key = rep.key;
                                    out.keyed(&key, JoinItem::Replica(rep))?;
                                }
                                Ok(())
                            }
                            Variant::Naive => out.broadcast(JoinItem::Query(q)),
                        })
                    }),
                ));
                for (i, rx) in join_rx.into_iter().enumerate() {
                    let inlet = Inlet::new(rx, 2);
                    let outlet = Outlet::new(i, vec![sink_tx.clone()], batch.min(16));
                    let compute = move |members: Vec<JoinItem>, meter: &mut DistanceMeter| {
                        match variant {
                            Variant::Grid => grid_join_window(members, r, meter),
                            Variant::Naive => naive_join_window(members, r, meter),
                        }
                    };
                    worker_handles.push((
                        "join",
                        i,
                        s.spawn(move || {
                            windowed_worker(
                                "join",
                                i,
                                inlet,
                                outlet,
                                window,
                                JoinItem::event_time,
                                compute,
                                metric,
                                move |item, m| {
                                    if record_keys && variant == Variant::Grid {
                                        m.keys.insert(item.key());
                                    }
                                },
                            )
                        }),
                    ));
                }
            }
        }
        drop(sink_tx);

        let merge_result = merger.run(Inlet::new(sink_rx, workers));
        let instances = join_all(worker_handles);
        let sources = join_all(source_handles);
        (sources, instances, merge_result)
    });

    // a panic anywhere explains every abort it caused
    let (instances, source_reports) = match (instances, source_reports) {
        (Ok(i), Ok(s)) => (i, s),
        (Err(e @ RuntimeError::InstancePanicked { .. }), _)
        | (_, Err(e @ RuntimeError::InstancePanicked { .. }))
        | (Err(e), _)
        | (_, Err(e)) => return Err(e),
    };
    merge_result.map_err(|_| RuntimeError::Aborted)?;

    let elapsed = started.elapsed();
    let tuples_consumed = consumed.load(Ordering::Relaxed);
    let report = merger.report;
    let throughput_tps = steady_throughput(&report.samples, tuples_consumed, elapsed);
    Ok(RuntimeMetrics {
        sources: source_reports,
        instances,
        windows_emitted: report.windows,
        tuples_consumed,
        window_latency: report.latency,
        elapsed,
        throughput_tps,
    })
}

fn steady_throughput(samples: &[(Instant, u64)], total: u64, elapsed: Duration) -> f64 {
    if samples.len() >= 3 {
        let (t0, c0) = samples[0];
        let (t1, c1) = samples[samples.len() - 2];
        let dt = t1.saturating_duration_since(t0).as_secs_f64();
        if dt > 0.0 && c1 > c0 {
            return (c1 - c0) as f64 / dt;
        }
    }
    let secs = elapsed.as_secs_f64();
    if secs > 0.0 {
        total as f64 / secs
    } else {
        0.0
    }
}

/// Runs a pipeline and collects every batch.
pub fn collect_pipeline(
    grid: &Grid,
    query: &Query,
    sources: Sources,
    config: &PipelineConfig,
) -> Result<(Vec<QueryResultBatch>, RuntimeMetrics), RuntimeError> {
    let mut batches = Vec::new();
    let metrics = run_pipeline(grid, query, sources, config, |b| batches.push(b))?;
    Ok((batches, metrics))
}
