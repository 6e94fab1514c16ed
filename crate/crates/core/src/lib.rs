//! Continuous spatial queries over windowed point streams.
//!
//! Points are keyed to the cells of a uniform grid. A range, kNN or join
//! query classifies the cells around a query cell into guaranteed,
//! candidate and pruned layers, so only candidate points need a distance
//! computation. Queries run on a small keyed dataflow runtime with
//! event-time sliding windows; every grid query also has an all-pairs
//! variant that produces the same results.

pub mod bench;
pub mod grid;
pub mod oracle;
pub mod query;
pub mod runtime;
pub mod stream;
pub mod window;

pub use grid::{BBox, CellCoord, CellKey, CellLayer, Grid, GridError, LayerParams, LayerSets};
pub use query::{
    JoinQuery, KnnQuery, Metric, Query, QueryError, QueryKind, QueryResultBatch, RangeQuery,
    ResultPayload,
};
pub use runtime::{
    collect_pipeline, run_pipeline, PipelineConfig, RuntimeError, RuntimeMetrics, Sources,
    StageKind, Variant,
};
pub use stream::{
    open_source, Format, LineSource, MemorySource, PointSource, RawPoint, SourceSpec, SpatialPoint,
};
pub use window::{WindowEngine, WindowSpec};
