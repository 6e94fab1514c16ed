//! Logical uniform grid over a rectangular extent.
//!
//! The grid holds no per-cell state. It maps coordinates to square cells,
//! encodes a cell as a fixed-width key (x index in the high bits, y index in
//! the low bits) and answers neighborhood questions in terms of Chebyshev
//! rings around a cell:
//!
//! ```text
//!   3 3 3 3 3 3 3
//!   3 2 2 2 2 2 3
//!   3 2 1 1 1 2 3
//!   3 2 1 Q 1 2 3      ring n = cells at Chebyshev distance n from Q
//!   3 2 1 1 1 2 3
//!   3 2 2 2 2 2 3
//!   3 3 3 3 3 3 3
//! ```
//!
//! For a query radius `r` and cell length `l`, rings `1..=g` with
//! `g = floor(r / (l * sqrt 2)) - 1` only hold points within `r` of any
//! point of the query cell, rings up to `c = ceil(r / l)` may hold
//! neighbors, and everything farther out can be pruned.

use std::collections::BTreeSet;
use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bit width per axis index.
pub const DEFAULT_N_BITS: u32 = 16;

/// Largest supported bit width per axis (keys are stored in a `u64`).
pub const MAX_N_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid extent must be positive, got ({min_x}, {min_y}) - ({max_x}, {max_y})")]
    InvalidExtent {
        min_x: f64,
        min_y: f64,
        max_x: f64,
        max_y: f64,
    },
    #[error("grid size must be at least one cell")]
    ZeroCells,
    #[error("{n_bits} bits per index cannot address {cells} cells")]
    InsufficientBits { n_bits: u32, cells: u64 },
    #[error("point ({x}, {y}) lies outside the grid")]
    OutsideGrid { x: f64, y: f64 },
    #[error("cell ({x}, {y}) is outside the grid index range")]
    CellOutOfRange { x: u64, y: u64 },
    #[error("key width {found} does not match grid width {expected}")]
    KeyWidthMismatch { expected: u32, found: u32 },
    #[error("malformed cell key {0:?}")]
    MalformedKey(String),
    #[error("bounding box must be minx,miny,maxx,maxy, got {0:?}")]
    MalformedBBox(String),
    #[error("radius and cell length must be positive and finite, got r={r}, l={l}")]
    InvalidRadius { r: f64, l: f64 },
}

/// Index pair of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellCoord {
    pub x: u32,
    pub y: u32,
}

impl CellCoord {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    /// Chebyshev (ring) distance between two cells.
    pub fn ring_distance(&self, other: &CellCoord) -> u32 {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

impl fmt::Display for CellCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Concatenated `x ⊙ y` index bits of a cell; `n_bits` per index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    bits: u64,
    n_bits: u8,
}

impl CellKey {
    pub fn bits(&self) -> u64 {
        self.bits
    }

    /// Bit width of one index half.
    pub fn n_bits(&self) -> u32 {
        u32::from(self.n_bits)
    }

    /// Splits the key into its raw (x, y) halves without range checking.
    pub fn halves(&self) -> (u64, u64) {
        let n = self.n_bits();
        let mask = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        (self.bits >> n, self.bits & mask)
    }

    /// Parses a binary rendering such as `"00100100"`. The string length
    /// must be even; each half is one index.
    pub fn from_bit_string(s: &str) -> Result<CellKey, GridError> {
        let len = s.len();
        if len == 0 || len % 2 != 0 || len > 2 * MAX_N_BITS as usize {
            return Err(GridError::MalformedKey(s.to_owned()));
        }
        if !s.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(GridError::MalformedKey(s.to_owned()));
        }
        let bits = u64::from_str_radix(s, 2).map_err(|_| GridError::MalformedKey(s.to_owned()))?;
        Ok(CellKey {
            bits,
            n_bits: (len / 2) as u8,
        })
    }

    /// 64-bit FNV-1a over the key's bit string; stable across runs and
    /// platforms, used for keyed routing.
    pub fn stable_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let width = 2 * self.n_bits();
        let mut hash = OFFSET;
        for i in (0..width).rev() {
            let ch = if (self.bits >> i) & 1 == 1 { b'1' } else { b'0' };
            hash ^= u64::from(ch);
            hash = hash.wrapping_mul(PRIME);
        }
        hash
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = 2 * self.n_bits as usize;
        write!(f, "{:0width$b}", self.bits, width = width)
    }
}

impl Serialize for CellKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CellKey::from_bit_string(&s).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned extent `min_x,min_y,max_x,max_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    /// The Beijing box used for taxi traces.
    pub const BEIJING: BBox = BBox {
        min_x: 115.5,
        min_y: 39.6,
        max_x: 117.6,
        max_y: 41.1,
    };

    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.min_x + self.width() / 2.0,
            self.min_y + self.height() / 2.0,
        )
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.min_x, self.min_y, self.max_x, self.max_y)
    }
}

impl FromStr for BBox {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || GridError::MalformedBBox(s.to_owned());
        if parts.len() != 4 {
            return Err(bad());
        }
        let mut v = [0.0; 4];
        for (slot, part) in v.iter_mut().zip(&parts) {
            *slot = part.parse::<f64>().map_err(|_| bad())?;
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]);
        let ok = v.iter().all(|c| c.is_finite()) && b.max_x > b.min_x && b.max_y > b.min_y;
        if !ok {
            return Err(GridError::InvalidExtent {
                min_x: b.min_x,
                min_y: b.min_y,
                max_x: b.max_x,
                max_y: b.max_y,
            });
        }
        Ok(b)
    }
}

/// Rectangular extent split into square cells of side `cell_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    min_x: f64,
    min_y: f64,
    max_x: f64,
    max_y: f64,
    m: u32,
    cell_len: f64,
    n_bits: u32,
    x_cells: u32,
    y_cells: u32,
}

impl Grid {
    pub fn from_bbox(bbox: BBox, m: u32, n_bits: u32) -> Result<Grid, GridError> {
        Grid::new(bbox.min_x, bbox.min_y, bbox.max_x, bbox.max_y, m, n_bits)
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.min_x, self.min_y, self.max_x, self.max_y)
    }

    /// Builds a grid with `m` cells along x. The y axis gets as many cells
    /// of the same side length as are needed to cover the extent.
    pub fn new(
        min_x: f64,
        min_y: f64,
        max_x: f64,
        max_y: f64,
        m: u32,
        n_bits: u32,
    ) -> Result<Grid, GridError> {
        let extent_ok = [min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite())
            && max_x > min_x
            && max_y > min_y;
        if !extent_ok {
            return Err(GridError::InvalidExtent {
                min_x,
                min_y,
                max_x,
                max_y,
            });
        }
        if m == 0 {
            return Err(GridError::ZeroCells);
        }
        let cell_len = (max_x - min_x) / f64::from(m);
        if !(cell_len > 0.0) {
            return Err(GridError::InvalidExtent {
                min_x,
                min_y,
                max_x,
                max_y,
            });
        }
        let y_span = ((max_y - min_y) / cell_len).ceil();
        if !(y_span >= 1.0 && y_span <= f64::from(u32::MAX)) {
            return Err(GridError::InsufficientBits {
                n_bits,
                cells: y_span as u64,
            });
        }
        let y_cells = y_span as u32;
        let needed = u64::from(m.max(y_cells));
        if n_bits == 0 || n_bits > MAX_N_BITS || (1u64 << n_bits) < needed {
            return Err(GridError::InsufficientBits {
                n_bits,
                cells: needed,
            });
        }
        Ok(Grid {
            min_x,
            min_y,
            max_x,
            max_y,
            m,
            cell_len,
            n_bits,
            x_cells: m,
            y_cells,
        })
    }

    /// Grid with the default key width.
    pub fn with_default_bits(
        min_x: f64,
        min_y: f64,
        max_x: f64,
        max_y: f64,
        m: u32,
    ) -> Result<Grid, GridError> {
        Grid::new(min_x, min_y, max_x, max_y, m, DEFAULT_N_BITS)
    }

    pub fn min_x(&self) -> f64 {
        self.min_x
    }
    pub fn min_y(&self) -> f64 {
        self.min_y
    }
    pub fn max_x(&self) -> f64 {
        self.max_x
    }
    pub fn max_y(&self) -> f64 {
        self.max_y
    }
    /// Cells along x as configured.
    pub fn m(&self) -> u32 {
        self.m
    }
    pub fn cell_len(&self) -> f64 {
        self.cell_len
    }
    pub fn n_bits(&self) -> u32 {
        self.n_bits
    }
    pub fn x_cells(&self) -> u32 {
        self.x_cells
    }
    pub fn y_cells(&self) -> u32 {
        self.y_cells
    }
    pub fn cell_count(&self) -> u64 {
        u64::from(self.x_cells) * u64::from(self.y_cells)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn in_range(&self, coord: CellCoord) -> bool {
        coord.x < self.x_cells && coord.y < self.y_cells
    }

    /// Cell containing `(x, y)`. Points on the upper boundary belong to the
    /// last cell of that axis.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<CellCoord, GridError> {
        if !self.contains(x, y) {
            return Err(GridError::OutsideGrid { x, y });
        }
        let xi = ((x - self.min_x) / self.cell_len).floor() as u64;
        let yi = ((y - self.min_y) / self.cell_len).floor() as u64;
        Ok(CellCoord {
            x: xi.min(u64::from(self.x_cells - 1)) as u32,
            y: yi.min(u64::from(self.y_cells - 1)) as u32,
        })
    }

    pub fn encode_key(&self, coord: CellCoord) -> Result<CellKey, GridError> {
        if !self.in_range(coord) {
            return Err(GridError::CellOutOfRange {
                x: u64::from(coord.x),
                y: u64::from(coord.y),
            });
        }
        Ok(CellKey {
            bits: (u64::from(coord.x) << self.n_bits) | u64::from(coord.y),
            n_bits: self.n_bits as u8,
        })
    }

    pub fn decode_key(&self, key: CellKey) -> Result<CellCoord, GridError> {
        if key.n_bits() != self.n_bits {
            return Err(GridError::KeyWidthMismatch {
                expected: self.n_bits,
                found: key.n_bits(),
            });
        }
        let (x, y) = key.halves();
        if x >= u64::from(self.x_cells) || y >= u64::from(self.y_cells) {
            return Err(GridError::CellOutOfRange { x, y });
        }
        Ok(CellCoord::new(x as u32, y as u32))
    }

    /// Key of the cell containing `(x, y)`.
    pub fn key_of(&self, x: f64, y: f64) -> Result<CellKey, GridError> {
        self.encode_key(self.cell_of(x, y)?)
    }

    /// Lower-left corner of a cell.
    pub fn cell_origin(&self, coord: CellCoord) -> (f64, f64) {
        (
            self.min_x + f64::from(coord.x) * self.cell_len,
            self.min_y + f64::from(coord.y) * self.cell_len,
        )
    }

    /// In-range cells at Chebyshev distance exactly `n` from `center`.
    /// `n = 0` yields the center itself.
    pub fn neighbor_ring(&self, center: CellCoord, n: u32) -> Vec<CellCoord> {
        let (cx, cy, n) = (i64::from(center.x), i64::from(center.y), i64::from(n));
        let (xc, yc) = (i64::from(self.x_cells), i64::from(self.y_cells));
        if n == 0 {
            return if self.in_range(center) { vec![center] } else { Vec::new() };
        }
        let mut out = Vec::new();
        let x_lo = (cx - n).max(0);
        let x_hi = (cx + n).min(xc - 1);
        // bottom and top rows span the full ring width
        for y in [cy - n, cy + n] {
            if (0..yc).contains(&y) {
                out.extend((x_lo..=x_hi).map(|x| CellCoord::new(x as u32, y as u32)));
            }
        }
        let y_lo = (cy - n + 1).max(0);
        let y_hi = (cy + n - 1).min(yc - 1);
        for x in [cx - n, cx + n] {
            if (0..xc).contains(&x) {
                out.extend((y_lo..=y_hi).map(|y| CellCoord::new(x as u32, y as u32)));
            }
        }
        out
    }

    /// Largest ring index that can contain any in-range cell.
    pub fn max_ring(&self) -> u32 {
        self.x_cells.max(self.y_cells)
    }

    /// Guaranteed and candidate cells around `query_cell` for radius `r`.
    pub fn layer_sets(&self, query_cell: CellCoord, r: f64) -> Result<LayerSets, GridError> {
        let params = LayerParams::new(r, self.cell_len)?;
        Ok(LayerSets::build(self, query_cell, params))
    }
}

/// Ring depths for a radius: rings `1..=guaranteed` need no distance check
/// and rings up to `candidate` might hold neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    /// `g`; zero or negative means there is no guaranteed ring.
    pub guaranteed: i64,
    /// `c`; always at least one and greater than `g`.
    pub candidate: i64,
}

impl LayerParams {
    pub fn new(r: f64, cell_len: f64) -> Result<LayerParams, GridError> {
        if !(r > 0.0 && r.is_finite() && cell_len > 0.0 && cell_len.is_finite()) {
            return Err(GridError::InvalidRadius { r, l: cell_len });
        }
        let guaranteed = (r / (cell_len * SQRT_2)).floor() as i64 - 1;
        let candidate = (r / cell_len).ceil() as i64;
        Ok(LayerParams {
            guaranteed,
            candidate,
        })
    }

    /// Layer parameters with no guaranteed ring, used when the distance
    /// metric does not allow a guarantee in grid units.
    pub fn candidates_only(r: f64, cell_len: f64) -> Result<LayerParams, GridError> {
        let mut params = LayerParams::new(r, cell_len)?;
        params.guaranteed = -1;
        Ok(params)
    }

    /// Deepest guaranteed ring, clamped at zero.
    pub fn guaranteed_depth(&self) -> u32 {
        self.guaranteed.clamp(0, i64::from(u32::MAX)) as u32
    }

    pub fn candidate_depth(&self) -> u32 {
        self.candidate.clamp(0, i64::from(u32::MAX)) as u32
    }

    /// Layer of a cell at ring distance `ring` from the query cell.
    pub fn classify_ring(&self, ring: u32) -> CellLayer {
        if ring == 0 {
            CellLayer::Candidate
        } else if ring <= self.guaranteed_depth() {
            CellLayer::Guaranteed
        } else if ring <= self.candidate_depth() {
            CellLayer::Candidate
        } else {
            CellLayer::Pruned
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellLayer {
    Guaranteed,
    Candidate,
    Pruned,
}

/// Guaranteed and candidate cells around one query cell. The query cell
/// itself is always a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSets {
    pub query_cell: CellCoord,
    pub params: LayerParams,
    pub guaranteed: BTreeSet<CellCoord>,
    pub candidate: BTreeSet<CellCoord>,
    n_bits: u32,
}

impl LayerSets {
    pub fn build(grid: &Grid, query_cell: CellCoord, params: LayerParams) -> LayerSets {
        let g = params.guaranteed_depth();
        let c = params.candidate_depth().min(grid.max_ring());
        let mut guaranteed = BTreeSet::new();
        let mut candidate = BTreeSet::new();
        candidate.extend(grid.neighbor_ring(query_cell, 0));
        for ring in 1..=g.min(c) {
            guaranteed.extend(grid.neighbor_ring(query_cell, ring));
        }
        for ring in (g + 1)..=c {
            candidate.extend(grid.neighbor_ring(query_cell, ring));
        }
        LayerSets {
            query_cell,
            params,
            guaranteed,
            candidate,
            n_bits: grid.n_bits(),
        }
    }

    /// g
    pub fn g(&self) -> i64 {
        self.params.guaranteed
    }

    /// c
    pub fn c(&self) -> i64 {
        self.params.candidate
    }

    pub fn classify(&self, coord: CellCoord) -> CellLayer {
        self.params.classify_ring(self.query_cell.ring_distance(&coord))
    }

    /// Layer of the cell a key names. Keys of a different width are pruned.
    pub fn classify_key(&self, key: CellKey) -> CellLayer {
        if key.n_bits() != self.n_bits {
            return CellLayer::Pruned;
        }
        let (x, y) = key.halves();
        let ring = (x.abs_diff(u64::from(self.query_cell.x)))
            .max(y.abs_diff(u64::from(self.query_cell.y)));
        self.params.classify_ring(ring.min(u64::from(u32::MAX)) as u32)
    }

    /// Number of cells that are not pruned.
    pub fn retained_cells(&self) -> usize {
        self.guaranteed.len() + self.candidate.len()
    }
}
