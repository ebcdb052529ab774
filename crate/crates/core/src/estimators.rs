//! Empirical Palm distributions, PGF estimates and transient functionals.
//!
//! The kernel feeds three accumulators while it runs:
//!  * an embedded sample log — per-epoch (state, mark) observations at
//!    arrival and departure epochs, stored as per-block histograms;
//!  * a time-average integrator — time-weighted `z^X` sums on the grid;
//!  * transient accumulators — full-path sums of a test function over the
//!    epoch sequence, the exact ingredients of the pathwise identity.
//!
//! Embedded series are autocorrelated, so confidence intervals come from
//! non-overlapping batch (block) means rather than i.i.d. formulas.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::JumpLog;
use crate::testfns::TestFunction;

/// Default number of non-overlapping batches per replication.
pub const DEFAULT_BLOCKS: usize = 32;

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Equal-width partition of the post-warm-up window into batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl BlockPlan {
    pub fn width(&self) -> f64 {
        (self.end - self.start) / self.count as f64
    }

    /// Block index of an epoch time, or `None` before the window opens.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        if t < self.start || self.end <= self.start {
            return None;
        }
        let frac = (t - self.start) / (self.end - self.start);
        Some(((frac * self.count as f64) as usize).min(self.count - 1))
    }
}

/// Frequency table over integer-vector cells, frozen in sorted key order so
/// that every float reduction over it is reproducible.
#[derive(Clone, Debug, Default)]
pub struct Hist {
    pub cells: Vec<(Box<[u32]>, u64)>,
    pub n: u64,
}

#[derive(Clone, Debug, Default)]
struct HistBuilder {
    map: HashMap<Box<[u32]>, u64>,
    n: u64,
}

impl HistBuilder {
    fn insert(&mut self, key: &[u32]) {
        if let Some(c) = self.map.get_mut(key) {
            *c += 1;
        } else {
            self.map.insert(key.to_vec().into_boxed_slice(), 1);
        }
        self.n += 1;
    }

    fn freeze(self) -> Hist {
        let mut cells: Vec<(Box<[u32]>, u64)> = self.map.into_iter().collect();
        cells.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        Hist {
            cells,
            n: self.n,
        }
    }
}

/// Per-block histograms plus their pooled total.
#[derive(Clone, Debug)]
pub struct BlockedHist {
    pub key_len: usize,
    pub blocks: Vec<Hist>,
    pub total: Hist,
}

#[derive(Clone, Debug)]
struct BlockedHistBuilder {
    key_len: usize,
    blocks: Vec<HistBuilder>,
}

impl BlockedHistBuilder {
    fn new(key_len: usize, blocks: usize) -> Self {
        Self {
            key_len,
            blocks: vec![HistBuilder::default(); blocks],
        }
    }

    fn insert(&mut self, block: usize, key: &[u32]) {
        debug_assert_eq!(key.len(), self.key_len);
        self.blocks[block].insert(key);
    }

    fn freeze(self) -> BlockedHist {
        let key_len = self.key_len;
        let mut union: HashMap<Box<[u32]>, u64> = HashMap::new();
        let blocks: Vec<Hist> = self.blocks.into_iter().map(HistBuilder::freeze).collect();
        let mut n = 0;
        for b in &blocks {
            n += b.n;
            for (k, c) in &b.cells {
                *union.entry(k.clone()).or_insert(0) += c;
            }
        }
        let mut cells: Vec<(Box<[u32]>, u64)> = union.into_iter().collect();
        cells.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        BlockedHist {
            key_len,
            blocks,
            total: Hist { cells, n },
        }
    }
}

/// Epoch categories tagged by polling-style models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TagKind {
    VisitBegin,
    VisitComplete,
    ServiceBegin,
}

/// Streaming builder for the embedded sample log. Samples before the
/// warm-up boundary are discarded; each retained sample lands in the block
/// its epoch time falls into.
pub struct EmbeddedLogBuilder {
    m: usize,
    plan: BlockPlan,
    arrivals: BlockedHistBuilder,
    departures: BlockedHistBuilder,
    tags: BTreeMap<(TagKind, usize), BlockedHistBuilder>,
    scratch: Vec<u32>,
}

impl EmbeddedLogBuilder {
    pub fn new(m: usize, plan: BlockPlan) -> Self {
        Self {
            m,
            plan,
            arrivals: BlockedHistBuilder::new(2 * m, plan.count),
            departures: BlockedHistBuilder::new(3 * m, plan.count),
            tags: BTreeMap::new(),
            scratch: Vec::with_capacity(3 * m),
        }
    }

    /// Record (state just before the epoch, arriving batch).
    pub fn record_arrival(&mut self, t: f64, x_pre: &[u32], batch: &[u32]) {
        if let Some(block) = self.plan.index_of(t) {
            self.scratch.clear();
            self.scratch.extend_from_slice(x_pre);
            self.scratch.extend_from_slice(batch);
            self.arrivals.insert(block, &self.scratch);
        }
    }

    /// Record (intermediate state, departed batch, transferred batch).
    pub fn record_departure(&mut self, t: f64, x_mid: &[u32], dep: &[u32], xfer: &[u32]) {
        if let Some(block) = self.plan.index_of(t) {
            self.scratch.clear();
            self.scratch.extend_from_slice(x_mid);
            self.scratch.extend_from_slice(dep);
            self.scratch.extend_from_slice(xfer);
            self.departures.insert(block, &self.scratch);
        }
    }

    pub fn record_tag(&mut self, kind: TagKind, queue: usize, t: f64, state: &[u32]) {
        if let Some(block) = self.plan.index_of(t) {
            let m = self.m;
            let plan_blocks = self.plan.count;
            self.tags
                .entry((kind, queue))
                .or_insert_with(|| BlockedHistBuilder::new(m, plan_blocks))
                .insert(block, state);
        }
    }

    pub fn freeze(self) -> EmbeddedSampleLog {
        EmbeddedSampleLog {
            m: self.m,
            plan: self.plan,
            arrivals: self.arrivals.freeze(),
            departures: self.departures.freeze(),
            tags: self
                .tags
                .into_iter()
                .map(|(k, b)| (k, b.freeze()))
                .collect(),
        }
    }
}

/// Frozen embedded observations: arrival samples keyed `[x | y]`, departure
/// samples keyed `[x | y | z]`, tag samples keyed `[x]`.
#[derive(Clone, Debug)]
pub struct EmbeddedSampleLog {
    pub m: usize,
    pub plan: BlockPlan,
    pub arrivals: BlockedHist,
    pub departures: BlockedHist,
    pub tags: BTreeMap<(TagKind, usize), BlockedHist>,
}

impl EmbeddedSampleLog {
    pub fn tag_hist(&self, kind: TagKind, queue: usize) -> Result<&BlockedHist> {
        self.tags
            .get(&(kind, queue))
            .ok_or_else(|| Error::MissingEstimate(format!("tag {kind:?} for queue {queue}")))
    }
}

/// How a departure sample's subset relates to a queue set.
pub fn departure_support(key: &[u32], m: usize) -> u32 {
    let mut mask = 0;
    for q in 0..m {
        if key[m + q] > 0 {
            mask |= 1 << q;
        }
    }
    mask
}

/// Split modes for building Palm families out of the pooled logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PalmSplit {
    /// Arrival samples whose batch is supported on a single class.
    ByArrivalClass,
    /// Departure samples keyed by the departing queue (singleton support).
    ByDepartureQueue,
    /// Departure samples keyed by the full support subset.
    ByDepartureSubset,
    /// Departure samples keyed by (queue, routed-to queue or exit).
    ByRoutePair,
}

/// One member of a Palm family: its key, empirical weight (epochs per unit
/// time) and sample histogram.
#[derive(Clone, Debug)]
pub struct PalmComponent {
    /// Component key: class/queue indices, subset mask, or (i, j) pair with
    /// `j == m` meaning exit.
    pub key: (usize, usize),
    pub weight: f64,
    pub hist: Hist,
}

/// Partition the pooled samples of `log` according to `mode`.
///
/// `window` is the observation time backing the weights. Components are
/// returned in ascending key order; their weights sum to the parent rate.
type CellCounts = (HashMap<Box<[u32]>, u64>, u64);

pub fn palm_split(log: &EmbeddedSampleLog, mode: PalmSplit, window: f64) -> Result<Vec<PalmComponent>> {
    let m = log.m;
    let mut groups: BTreeMap<(usize, usize), CellCounts> = BTreeMap::new();
    let mut add = |key: (usize, usize), cell: &[u32], count: u64| {
        let entry = groups.entry(key).or_default();
        *entry.0.entry(cell.to_vec().into_boxed_slice()).or_insert(0) += count;
        entry.1 += count;
    };
    match mode {
        PalmSplit::ByArrivalClass => {
            if log.arrivals.total.n == 0 {
                return Err(Error::EmptyLog("no arrival samples"));
            }
            for (key, count) in &log.arrivals.total.cells {
                let batch = &key[m..2 * m];
                let support: Vec<usize> = (0..m).filter(|&q| batch[q] > 0).collect();
                if support.len() == 1 {
                    add((support[0], 0), key, *count);
                }
            }
        }
        PalmSplit::ByDepartureQueue | PalmSplit::ByDepartureSubset | PalmSplit::ByRoutePair => {
            if log.departures.total.n == 0 {
                return Err(Error::EmptyLog("no departure samples"));
            }
            for (key, count) in &log.departures.total.cells {
                let mask = departure_support(key, m) as usize;
                match mode {
                    PalmSplit::ByDepartureSubset => add((mask, 0), key, *count),
                    PalmSplit::ByDepartureQueue => {
                        if mask.count_ones() == 1 {
                            add((mask.trailing_zeros() as usize, 0), key, *count);
                        }
                    }
                    PalmSplit::ByRoutePair => {
                        if mask.count_ones() == 1 {
                            let i = mask.trailing_zeros() as usize;
                            let xfer = &key[2 * m..3 * m];
                            let to: Vec<usize> = (0..m).filter(|&q| xfer[q] > 0).collect();
                            let j = match to.len() {
                                0 => m, // exit
                                1 => to[0],
                                _ => continue,
                            };
                            add((i, j), key, *count);
                        }
                    }
                    PalmSplit::ByArrivalClass => unreachable!(),
                }
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(key, (map, n))| {
            let mut cells: Vec<(Box<[u32]>, u64)> = map.into_iter().collect();
            cells.sort_unstable_by(|a, b| a.0.cmp(&b.0));
            PalmComponent {
                key,
                weight: n as f64 / window,
                hist: Hist { cells, n },
            }
        })
        .collect())
}

/// Monte Carlo estimate of a generating function on a grid of `z` points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PgfEstimate {
    pub grid: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: u64,
}

/// Mean of `z^x` per grid point over a histogram whose keys start with the
/// state vector. The standard error uses block means when block views are
/// supplied (embedded series are correlated), i.i.d. otherwise.
pub fn empirical_pgf(hist: &BlockedHist, m: usize, grid: &[Vec<f64>]) -> Result<PgfEstimate> {
    if hist.total.n == 0 {
        return Err(Error::EmptyLog("empirical_pgf over empty histogram"));
    }
    let tables = PowTables::new(grid, m, &hist.total);
    let mut values = Vec::with_capacity(grid.len());
    let mut stderr = Vec::with_capacity(grid.len());
    for (gi, _) in grid.iter().enumerate() {
        let total_sum: f64 = hist
            .total
            .cells
            .iter()
            .map(|(key, c)| *c as f64 * tables.eval(gi, &key[..m]))
            .sum();
        let mean = total_sum / hist.total.n as f64;
        let mut block_means = Vec::new();
        for b in &hist.blocks {
            if b.n == 0 {
                continue;
            }
            let s: f64 = b
                .cells
                .iter()
                .map(|(key, c)| *c as f64 * tables.eval(gi, &key[..m]))
                .sum();
            block_means.push(s / b.n as f64);
        }
        let se = if block_means.len() >= 2 {
            let bm = block_means.iter().sum::<f64>() / block_means.len() as f64;
            let var = block_means.iter().map(|v| (v - bm).powi(2)).sum::<f64>()
                / (block_means.len() - 1) as f64;
            (var / block_means.len() as f64).sqrt()
        } else {
            0.0
        };
        values.push(mean);
        stderr.push(se);
    }
    Ok(PgfEstimate {
        grid: grid.to_vec(),
        values,
        stderr,
        n: hist.total.n,
    })
}

/// Per-queue power tables for fast `z^x` evaluation over histogram cells.
///
/// Grid axes repeat few distinct values, so `z^x` factorizes into table
/// lookups: one row per (queue, distinct axis value), indexed by count.
pub struct PowTables {
    m: usize,
    /// For each grid point and queue, the row index into `rows`.
    point_rows: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl PowTables {
    pub fn new(grid: &[Vec<f64>], m: usize, hist: &Hist) -> Self {
        let mut max_count = vec![0u32; m];
        for (key, _) in &hist.cells {
            for q in 0..m {
                // Keys may pack several vectors; take the max over all parts.
                for part in key.chunks(m) {
                    max_count[q] = max_count[q].max(part[q]);
                }
            }
        }
        Self::with_max_counts(grid, m, &max_count)
    }

    pub fn with_max_counts(grid: &[Vec<f64>], m: usize, max_count: &[u32]) -> Self {
        let mut distinct: Vec<Vec<f64>> = vec![Vec::new(); m];
        let mut point_rows = Vec::with_capacity(grid.len() * m);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut row_index: HashMap<(usize, u64), usize> = HashMap::new();
        for z in grid {
            for q in 0..m {
                let bits = z[q].to_bits();
                let idx = *row_index.entry((q, bits)).or_insert_with(|| {
                    let cap = max_count[q] as usize + 2;
                    let mut row = Vec::with_capacity(cap);
                    let mut v = 1.0;
                    for _ in 0..cap {
                        row.push(v);
                        v *= z[q];
                    }
                    rows.push(row);
                    distinct[q].push(z[q]);
                    rows.len() - 1
                });
                point_rows.push(idx);
            }
        }
        Self {
            m,
            point_rows,
            rows,
        }
    }

    /// `z_grid[point]^x` for a state slice `x`.
    #[inline]
    pub fn eval(&self, point: usize, x: &[u32]) -> f64 {
        let mut v = 1.0;
        for q in 0..self.m {
            let row = &self.rows[self.point_rows[point * self.m + q]];
            v *= row[x[q] as usize];
        }
        v
    }
}

/// Time-weighted accumulation of `z^X` on the grid plus per-queue occupancy,
/// split into blocks. Uses compensated summation so horizons of 1e8 time
/// units do not drift.
pub struct TimeAverageBuilder {
    plan: BlockPlan,
    grid: Vec<Vec<f64>>,
    m: usize,
    zs: Vec<f64>,
    cur_x: Vec<u32>,
    pow_pos: Vec<f64>,
    zero_active: Vec<u32>,
    block_grid: Vec<Kahan>,
    block_coord: Vec<Kahan>,
    block_time: Vec<Kahan>,
    last_t: f64,
}

impl TimeAverageBuilder {
    pub fn new(m: usize, plan: BlockPlan, grid: Vec<Vec<f64>>, x0: &[u32]) -> Self {
        let g = grid.len();
        let zs: Vec<f64> = grid.iter().flat_map(|z| z.iter().copied()).collect();
        let mut s = Self {
            plan,
            grid,
            m,
            zs,
            cur_x: x0.to_vec(),
            pow_pos: vec![1.0; g],
            zero_active: vec![0; g],
            block_grid: vec![Kahan::default(); g * plan.count],
            block_coord: vec![Kahan::default(); m * plan.count],
            block_time: vec![Kahan::default(); plan.count],
            last_t: 0.0,
        };
        for gi in 0..g {
            s.recompute_cell(gi);
        }
        s
    }

    fn recompute_cell(&mut self, gi: usize) {
        let mut pos = 1.0;
        let mut zeros = 0;
        for q in 0..self.m {
            let z = self.zs[gi * self.m + q];
            let x = self.cur_x[q];
            if z == 0.0 {
                if x > 0 {
                    zeros += 1;
                }
            } else {
                pos *= z.powi(x as i32);
            }
        }
        self.pow_pos[gi] = pos;
        self.zero_active[gi] = zeros;
    }

    /// Integrate the current state over `[last_t, t)`.
    pub fn advance_to(&mut self, t: f64) {
        let lo = self.last_t.max(self.plan.start);
        let hi = t.min(self.plan.end);
        if hi > lo && self.plan.count > 0 {
            let mut cursor = lo;
            while cursor < hi {
                let b = self.plan.index_of(cursor).unwrap();
                let block_end = self.plan.start + self.plan.width() * (b + 1) as f64;
                let seg_end = hi.min(block_end);
                let dt = seg_end - cursor;
                if dt > 0.0 {
                    self.block_time[b].add(dt);
                    for gi in 0..self.grid.len() {
                        let v = if self.zero_active[gi] > 0 {
                            0.0
                        } else {
                            self.pow_pos[gi]
                        };
                        self.block_grid[b * self.grid.len() + gi].add(dt * v);
                    }
                    for q in 0..self.m {
                        self.block_coord[b * self.m + q].add(dt * f64::from(self.cur_x[q]));
                    }
                }
                if seg_end >= hi {
                    break;
                }
                cursor = seg_end;
            }
        }
        self.last_t = t;
    }

    /// Apply a net change to queue `q` after `advance_to` for the epoch.
    pub fn apply_delta(&mut self, q: usize, delta: i32) {
        if delta == 0 {
            return;
        }
        let old = self.cur_x[q];
        let new = (i64::from(old) + i64::from(delta)) as u32;
        self.cur_x[q] = new;
        for gi in 0..self.grid.len() {
            let z = self.zs[gi * self.m + q];
            if z == 0.0 {
                if old == 0 && new > 0 {
                    self.zero_active[gi] += 1;
                } else if old > 0 && new == 0 {
                    self.zero_active[gi] -= 1;
                }
            } else if z != 1.0 {
                self.pow_pos[gi] *= z.powi(delta);
                if self.pow_pos[gi] == 0.0 || !self.pow_pos[gi].is_normal() {
                    self.recompute_cell(gi);
                }
            }
        }
    }

    pub fn freeze(self) -> TimeAverage {
        let g = self.grid.len();
        let b = self.plan.count;
        let block_grid: Vec<f64> = self.block_grid.iter().map(Kahan::value).collect();
        let block_coord: Vec<f64> = self.block_coord.iter().map(Kahan::value).collect();
        let block_time: Vec<f64> = self.block_time.iter().map(Kahan::value).collect();
        let mut total_grid = vec![0.0; g];
        let mut total_coord = vec![0.0; self.m];
        let mut total_time = 0.0;
        for bi in 0..b {
            total_time += block_time[bi];
            for gi in 0..g {
                total_grid[gi] += block_grid[bi * g + gi];
            }
            for q in 0..self.m {
                total_coord[q] += block_coord[bi * self.m + q];
            }
        }
        TimeAverage {
            m: self.m,
            plan: self.plan,
            grid: self.grid,
            block_grid,
            block_coord,
            block_time,
            total_grid,
            total_coord,
            total_time,
        }
    }
}

/// Frozen time-average sums. `block_grid[b * g + gi]` is the integral of
/// `z_gi^X` over block `b`.
#[derive(Clone, Debug)]
pub struct TimeAverage {
    pub m: usize,
    pub plan: BlockPlan,
    pub grid: Vec<Vec<f64>>,
    pub block_grid: Vec<f64>,
    pub block_coord: Vec<f64>,
    pub block_time: Vec<f64>,
    pub total_grid: Vec<f64>,
    pub total_coord: Vec<f64>,
    pub total_time: f64,
}

impl TimeAverage {
    /// Time-average PGF estimate with block-means standard errors.
    pub fn pgf_estimate(&self) -> PgfEstimate {
        let g = self.grid.len();
        let b = self.plan.count;
        let mut values = Vec::with_capacity(g);
        let mut stderr = Vec::with_capacity(g);
        for gi in 0..g {
            values.push(self.total_grid[gi] / self.total_time);
            let mut means = Vec::with_capacity(b);
            for bi in 0..b {
                if self.block_time[bi] > 0.0 {
                    means.push(self.block_grid[bi * g + gi] / self.block_time[bi]);
                }
            }
            let se = if means.len() >= 2 {
                let mm = means.iter().sum::<f64>() / means.len() as f64;
                let var = means.iter().map(|v| (v - mm).powi(2)).sum::<f64>()
                    / (means.len() - 1) as f64;
                (var / means.len() as f64).sqrt()
            } else {
                0.0
            };
            stderr.push(se);
        }
        PgfEstimate {
            grid: self.grid.clone(),
            values,
            stderr,
            n: 0,
        }
    }

    pub fn mean_queue(&self, q: usize) -> f64 {
        self.total_coord[q] / self.total_time
    }
}

/// Full-path sums of one test function over the epoch sequence: the raw
/// material of the transient relation. No warm-up is applied.
#[derive(Clone, Debug)]
pub struct TransientAccumulator {
    pub f: TestFunction,
    pub arrival_epochs: u64,
    pub departure_epochs: u64,
    /// Sums over arrival epochs of f(X-) and f(X- + Y).
    pub sum_arr: Kahan,
    pub sum_arr_plus: Kahan,
    /// Sums over departure epochs of f(X^d), f(X^d + Y), f(X^d + Z).
    pub sum_dep: Kahan,
    pub sum_dep_minus: Kahan,
    pub sum_dep_plus: Kahan,
}

impl TransientAccumulator {
    pub fn new(f: TestFunction) -> Self {
        Self {
            f,
            arrival_epochs: 0,
            departure_epochs: 0,
            sum_arr: Kahan::default(),
            sum_arr_plus: Kahan::default(),
            sum_dep: Kahan::default(),
            sum_dep_minus: Kahan::default(),
            sum_dep_plus: Kahan::default(),
        }
    }

    #[inline]
    pub fn record_arrival(&mut self, x_pre: &[u32], batch: &[u32]) {
        self.arrival_epochs += 1;
        self.sum_arr.add(self.f.eval(x_pre));
        self.sum_arr_plus.add(self.f.eval_sum(x_pre, Some(batch), None));
    }

    #[inline]
    pub fn record_departure(&mut self, x_mid: &[u32], dep: &[u32], xfer: &[u32]) {
        self.departure_epochs += 1;
        self.sum_dep.add(self.f.eval(x_mid));
        self.sum_dep_minus.add(self.f.eval_sum(x_mid, Some(dep), None));
        self.sum_dep_plus.add(self.f.eval_sum(x_mid, Some(xfer), None));
    }

    /// The expected-relative-frequency functionals at time `t`, with the
    /// convention that an empty epoch set contributes zero.
    pub fn functionals(&self, t: f64) -> TransientFunctionals {
        let avg = |sum: &Kahan, n: u64| if n == 0 { 0.0 } else { sum.value() / n as f64 };
        TransientFunctionals {
            r_arr: avg(&self.sum_arr, self.arrival_epochs),
            r_arr_plus: avg(&self.sum_arr_plus, self.arrival_epochs),
            r_dep: avg(&self.sum_dep, self.departure_epochs),
            r_dep_minus: avg(&self.sum_dep_minus, self.departure_epochs),
            r_dep_plus: avg(&self.sum_dep_plus, self.departure_epochs),
            arrival_rate: self.arrival_epochs as f64 / t,
            departure_rate: self.departure_epochs as f64 / t,
        }
    }

    /// Residual of the pathwise identity at time `t` for a path from `x0`
    /// to `x_end`. Zero up to floating-point rounding, for every path.
    pub fn telescoping_residual(&self, t: f64, x0: &[u32], x_end: &[u32]) -> f64 {
        let lhs = (self.sum_arr_plus.value() - self.sum_arr.value())
            + (self.sum_dep_plus.value() - self.sum_dep_minus.value());
        let rhs = self.f.eval(x_end) - self.f.eval(x0);
        (lhs - rhs) / t
    }

    /// Bitwise equality of all accumulated sums, for replay cross-checks.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.arrival_epochs == other.arrival_epochs
            && self.departure_epochs == other.departure_epochs
            && self.sum_arr.value().to_bits() == other.sum_arr.value().to_bits()
            && self.sum_arr_plus.value().to_bits() == other.sum_arr_plus.value().to_bits()
            && self.sum_dep.value().to_bits() == other.sum_dep.value().to_bits()
            && self.sum_dep_minus.value().to_bits() == other.sum_dep_minus.value().to_bits()
            && self.sum_dep_plus.value().to_bits() == other.sum_dep_plus.value().to_bits()
    }
}

/// The five relative-frequency functionals and the two epoch rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientFunctionals {
    pub r_arr: f64,
    pub r_arr_plus: f64,
    pub r_dep: f64,
    pub r_dep_minus: f64,
    pub r_dep_plus: f64,
    pub arrival_rate: f64,
    pub departure_rate: f64,
}

/// Rebuild transient accumulators from a jump log: the independent oracle
/// for the live path. Applies the same record calls in the same order, so
/// the results are bit-identical to a live run over the same path.
pub fn replay_transients(
    log: &JumpLog,
    x0: &[u32],
    fns: &[TestFunction],
) -> Result<Vec<TransientAccumulator>> {
    let m = log.m;
    let mut accs: Vec<TransientAccumulator> = fns
        .iter()
        .cloned()
        .map(TransientAccumulator::new)
        .collect();
    let mut x = x0.to_vec();
    for i in 0..log.len() {
        let (_, arr, dep, xfer) = log.record(i);
        let arr_total: u32 = arr.iter().sum();
        let dep_total: u32 = dep.iter().sum();
        if arr_total > 0 && dep_total > 0 {
            return Err(Error::InapplicableAssumption(
                "logged epoch mixes arrival and departure".to_string(),
            ));
        }
        if arr_total > 0 {
            for acc in &mut accs {
                acc.record_arrival(&x, arr);
            }
            for q in 0..m {
                x[q] += arr[q];
            }
        } else if dep_total > 0 {
            for q in 0..m {
                let have = x[q];
                if dep[q] > have {
                    return Err(Error::NegativeState {
                        queue: q,
                        have,
                        remove: dep[q],
                    });
                }
                x[q] = have - dep[q];
            }
            for acc in &mut accs {
                acc.record_departure(&x, dep, xfer);
            }
            for q in 0..m {
                x[q] += xfer[q];
            }
        } else {
            // Transfer-only epoch: state moves outside the framework's
            // arrival/departure epoch set; nothing to record.
            for q in 0..m {
                x[q] += xfer[q];
            }
        }
    }
    Ok(accs)
}

/// Final state after replaying a jump log from `x0`.
pub fn replay_final_state(log: &JumpLog, x0: &[u32]) -> Result<Vec<u32>> {
    let m = log.m;
    let mut x = x0.to_vec();
    for i in 0..log.len() {
        let (_, arr, dep, xfer) = log.record(i);
        for q in 0..m {
            let v = i64::from(x[q]) + i64::from(arr[q]) - i64::from(dep[q]) + i64::from(xfer[q]);
            if v < 0 {
                return Err(Error::NegativeState {
                    queue: q,
                    have: x[q],
                    remove: dep[q],
                });
            }
            x[q] = v as u32;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::JumpMark;
    use crate::testfns::library;

    #[test]
    fn block_plan_indexing() {
        let plan = BlockPlan {
            start: 10.0,
            end: 110.0,
            count: 10,
        };
        assert_eq!(plan.index_of(5.0), None);
        assert_eq!(plan.index_of(10.0), Some(0));
        assert_eq!(plan.index_of(19.999), Some(0));
        assert_eq!(plan.index_of(20.0), Some(1));
        assert_eq!(plan.index_of(110.0), Some(9));
    }

    #[test]
    fn empirical_pgf_small_example() {
        // Samples {(1,0),(0,2),(1,0)} at z=(0.5,0.5): (0.5+0.25+0.5)/3 = 5/12.
        let plan = BlockPlan {
            start: 0.0,
            end: 3.0,
            count: 1,
        };
        let mut b = EmbeddedLogBuilder::new(2, plan);
        b.record_arrival(0.5, &[1, 0], &[1, 0]);
        b.record_arrival(1.5, &[0, 2], &[1, 0]);
        b.record_arrival(2.5, &[1, 0], &[0, 1]);
        let log = b.freeze();
        let grid = vec![vec![0.5, 0.5], vec![1.0, 1.0]];
        let est = empirical_pgf(&log.arrivals, 2, &grid).unwrap();
        assert!((est.values[0] - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(est.values[1], 1.0);
        assert_eq!(est.stderr[1], 0.0);
        assert_eq!(est.n, 3);
    }

    #[test]
    fn empirical_pgf_rejects_empty() {
        let plan = BlockPlan {
            start: 0.0,
            end: 1.0,
            count: 1,
        };
        let log = EmbeddedLogBuilder::new(1, plan).freeze();
        assert!(matches!(
            empirical_pgf(&log.arrivals, 1, &[vec![0.5]]),
            Err(Error::EmptyLog(_))
        ));
    }

    #[test]
    fn time_average_integrates_piecewise_constant_path() {
        let plan = BlockPlan {
            start: 0.0,
            end: 10.0,
            count: 2,
        };
        let grid = vec![vec![0.5], vec![0.0], vec![1.0]];
        let mut tb = TimeAverageBuilder::new(1, plan, grid, &[0]);
        // X = 0 on [0,4), X = 2 on [4,10).
        tb.advance_to(4.0);
        tb.apply_delta(0, 2);
        tb.advance_to(10.0);
        let ta = tb.freeze();
        // integral of 0.5^X = 4*1 + 6*0.25 = 5.5
        assert!((ta.total_grid[0] - 5.5).abs() < 1e-12);
        // z = 0: 0^0 = 1 on [0,4), 0 after
        assert!((ta.total_grid[1] - 4.0).abs() < 1e-12);
        assert!((ta.total_grid[2] - 10.0).abs() < 1e-12);
        assert!((ta.total_coord[0] - 12.0).abs() < 1e-12);
        assert!((ta.total_time - 10.0).abs() < 1e-12);
        // Block weights must sum to the elapsed window.
        assert!((ta.block_time.iter().sum::<f64>() - 10.0).abs() < 1e-9 * 10.0);
        assert!((ta.mean_queue(0) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn time_average_underflow_recovers() {
        let plan = BlockPlan {
            start: 0.0,
            end: 10.0,
            count: 1,
        };
        let grid = vec![vec![0.25]];
        let mut tb = TimeAverageBuilder::new(1, plan, grid, &[0]);
        tb.advance_to(1.0);
        tb.apply_delta(0, 600); // 0.25^600 underflows to zero
        tb.advance_to(2.0);
        tb.apply_delta(0, -599); // back to x = 1
        tb.advance_to(10.0);
        let ta = tb.freeze();
        // 1*1 + 1*0 + 8*0.25 = 3.0
        assert!((ta.total_grid[0] - 3.0).abs() < 1e-9, "{}", ta.total_grid[0]);
    }

    #[test]
    fn transient_residual_is_zero_for_constant_f() {
        let mut acc = TransientAccumulator::new(TestFunction::TotalAtMost { cap: 1_000_000 });
        acc.record_arrival(&[0], &[1]);
        acc.record_departure(&[0], &[1], &[0]);
        let r = acc.telescoping_residual(10.0, &[0], &[0]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn zero_events_gives_zero_functionals() {
        let acc = TransientAccumulator::new(TestFunction::Monomial { z: 0.5 });
        let f = acc.functionals(5.0);
        assert_eq!(f.r_arr, 0.0);
        assert_eq!(f.r_dep_plus, 0.0);
        assert_eq!(f.arrival_rate, 0.0);
    }

    #[test]
    fn replay_matches_direct_accumulation_bitwise() {
        let m = 2;
        let mut log = JumpLog::new(m);
        let mut live: Vec<TransientAccumulator> = library(m)
            .into_iter()
            .map(TransientAccumulator::new)
            .collect();
        let mut x = vec![0u32, 0];
        let mut mark = JumpMark::zeros(m);
        let seq: Vec<(&[u32], &[u32], &[u32])> = vec![
            (&[1, 0], &[0, 0], &[0, 0]),
            (&[0, 2], &[0, 0], &[0, 0]),
            (&[0, 0], &[1, 0], &[0, 1]),
            (&[1, 0], &[0, 0], &[0, 0]),
            (&[0, 0], &[0, 2], &[0, 0]),
            (&[0, 0], &[1, 0], &[0, 0]),
        ];
        for (i, (a, d, r)) in seq.iter().enumerate() {
            mark.arrivals.copy_from_slice(a);
            mark.departures.copy_from_slice(d);
            mark.transfers.copy_from_slice(r);
            log.push(i as f64 + 0.5, &mark);
            if mark.arrival_total() > 0 {
                for acc in &mut live {
                    acc.record_arrival(&x, a);
                }
                for q in 0..m {
                    x[q] += a[q];
                }
            } else {
                for q in 0..m {
                    x[q] -= d[q];
                }
                for acc in &mut live {
                    acc.record_departure(&x, d, r);
                }
                for q in 0..m {
                    x[q] += r[q];
                }
            }
        }
        let replayed = replay_transients(&log, &[0, 0], &library(m)).unwrap();
        for (a, b) in live.iter().zip(&replayed) {
            assert!(a.bit_identical(b), "{}", a.f.name());
        }
        // The telescoping residual vanishes for every library function.
        let x_end = replay_final_state(&log, &[0, 0]).unwrap();
        for acc in &replayed {
            let r = acc.telescoping_residual(6.0, &[0, 0], &x_end);
            assert!(r.abs() <= 1e-12, "{}: {r}", acc.f.name());
        }
    }

    #[test]
    fn palm_split_partitions_departures() {
        let plan = BlockPlan {
            start: 0.0,
            end: 10.0,
            count: 1,
        };
        let mut b = EmbeddedLogBuilder::new(2, plan);
        b.record_departure(1.0, &[1, 0], &[1, 0], &[0, 1]);
        b.record_departure(2.0, &[0, 0], &[0, 1], &[0, 0]);
        b.record_departure(3.0, &[2, 0], &[1, 0], &[0, 0]);
        b.record_departure(4.0, &[0, 0], &[1, 1], &[0, 0]);
        let log = b.freeze();
        let by_queue = palm_split(&log, PalmSplit::ByDepartureQueue, 10.0).unwrap();
        let total_singleton: f64 = by_queue.iter().map(|c| c.weight).sum();
        assert!((total_singleton - 0.3).abs() < 1e-12);
        let by_subset = palm_split(&log, PalmSplit::ByDepartureSubset, 10.0).unwrap();
        let total: f64 = by_subset.iter().map(|c| c.weight).sum();
        assert!((total - 0.4).abs() < 1e-12);
        let pairs = palm_split(&log, PalmSplit::ByRoutePair, 10.0).unwrap();
        // Queue 1 (index 0) routes: one to queue 2, one exit.
        let w_route: f64 = pairs
            .iter()
            .filter(|c| c.key.0 == 0)
            .map(|c| c.weight)
            .sum();
        assert!((w_route - 0.2).abs() < 1e-12);
    }
}
