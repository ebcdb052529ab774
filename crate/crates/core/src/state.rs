//! System state, counting ledgers and the departure-first transition algebra.
//!
//! The state is the vector of queue lengths (customers in service included).
//! Three cumulative counting processes drive it: external arrivals,
//! departures and internal transfers (customers re-queued after a service
//! completion). At a departure epoch the departed customers are removed
//! first, giving the intermediate state, and any transferred customers are
//! re-queued within the same epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mapping from queues to the stations serving them. Queues sharing a
/// station are distinguished by customer class (a multiclass facility);
/// queues at distinct stations are separate service places visited by a
/// roving server.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueLayout {
    station_of: Vec<u32>,
}

impl QueueLayout {
    /// All queues share one station.
    pub fn single_station(m: usize) -> Self {
        Self {
            station_of: vec![0; m],
        }
    }

    /// Each queue is its own station.
    pub fn one_station_each(m: usize) -> Self {
        Self {
            station_of: (0..m as u32).collect(),
        }
    }

    pub fn queue_count(&self) -> usize {
        self.station_of.len()
    }

    pub fn station_of(&self, queue: usize) -> u32 {
        self.station_of[queue]
    }

    pub fn station_count(&self) -> usize {
        self.station_of
            .iter()
            .copied()
            .max()
            .map_or(0, |s| s as usize + 1)
    }
}

/// Queue lengths. Entries are nonnegative by construction; additions are
/// checked so that queue explosion aborts instead of wrapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateVector {
    counts: Vec<u32>,
}

impl StateVector {
    pub fn zeros(m: usize) -> Self {
        Self {
            counts: vec![0; m],
        }
    }

    pub fn from_counts(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, queue: usize) -> u32 {
        self.counts[queue]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// The per-epoch increments of the three counting processes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JumpMark {
    /// External arrivals per queue at this epoch.
    pub arrivals: Vec<u32>,
    /// Departures per queue at this epoch.
    pub departures: Vec<u32>,
    /// Internal transfers (re-queued customers) per queue at this epoch.
    pub transfers: Vec<u32>,
}

impl JumpMark {
    pub fn zeros(m: usize) -> Self {
        Self {
            arrivals: vec![0; m],
            departures: vec![0; m],
            transfers: vec![0; m],
        }
    }

    pub fn clear(&mut self) {
        self.arrivals.fill(0);
        self.departures.fill(0);
        self.transfers.fill(0);
    }

    pub fn arrival_total(&self) -> u32 {
        self.arrivals.iter().sum()
    }

    pub fn departure_total(&self) -> u32 {
        self.departures.iter().sum()
    }

    pub fn transfer_total(&self) -> u32 {
        self.transfers.iter().sum()
    }

    /// External arrivals and service completions must not share an epoch.
    pub fn is_exclusive(&self) -> bool {
        self.arrival_total() == 0 || self.departure_total() == 0
    }
}

/// State after departures are removed but before transferred customers are
/// re-queued. Distinct from the post-jump state only at departure epochs
/// with routing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntermediateState {
    pub counts: Vec<u32>,
}

/// Apply one epoch's mark to a state using the departure-first convention.
///
/// Returns the intermediate state (arrivals added, departures removed) and
/// the post-jump state (transfers re-queued). Fails with `NegativeState` if
/// the mark removes more customers than present, which indicates a model
/// bug.
pub fn apply_jump(x_pre: &StateVector, mark: &JumpMark) -> Result<(IntermediateState, StateVector)> {
    debug_assert!(mark.is_exclusive(), "arrival and departure share an epoch");
    let m = x_pre.len();
    let mut mid = Vec::with_capacity(m);
    for q in 0..m {
        let have = x_pre.counts[q]
            .checked_add(mark.arrivals[q])
            .expect("queue length overflow: system is unstable");
        let remove = mark.departures[q];
        if remove > have {
            return Err(Error::NegativeState {
                queue: q,
                have: x_pre.counts[q],
                remove,
            });
        }
        mid.push(have - remove);
    }
    let post: Vec<u32> = mid
        .iter()
        .zip(&mark.transfers)
        .map(|(&x, &r)| x.checked_add(r).expect("queue length overflow"))
        .collect();
    Ok((
        IntermediateState { counts: mid },
        StateVector::from_counts(post),
    ))
}

/// Bitmask of the queues a departure mark draws from, or `None` when the
/// mark carries no departures. Queue `i` maps to bit `i`.
pub fn classify_departure_subset(mark: &JumpMark) -> Option<u32> {
    let mut mask = 0u32;
    for (q, &d) in mark.departures.iter().enumerate() {
        if d > 0 {
            mask |= 1 << q;
        }
    }
    if mask == 0 {
        None
    } else {
        Some(mask)
    }
}

/// Queue indices inside a subset mask, ascending.
pub fn subset_members(mask: u32) -> Vec<usize> {
    (0..32).filter(|&q| mask & (1 << q) != 0).collect()
}

/// Retention policy for the per-epoch jump log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JumpLogMode {
    /// Keep nothing.
    Off,
    /// Keep the most recent `cap` epochs.
    Ring(usize),
    /// Keep the whole path in memory.
    Full,
    /// Stream every epoch to a file; nothing is retained in memory, so
    /// arbitrarily long runs stay bounded.
    Stream(std::path::PathBuf),
}

/// Flat record of logged epochs: times plus `3m` deltas per epoch in the
/// order (arrivals, departures, transfers).
#[derive(Clone, Debug, Default)]
pub struct JumpLog {
    pub m: usize,
    pub times: Vec<f64>,
    pub deltas: Vec<u32>,
    /// Number of epochs discarded from the front (ring mode).
    pub dropped: u64,
}

impl JumpLog {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            times: Vec::new(),
            deltas: Vec::new(),
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, time: f64, mark: &JumpMark) {
        self.times.push(time);
        self.deltas.extend_from_slice(&mark.arrivals);
        self.deltas.extend_from_slice(&mark.departures);
        self.deltas.extend_from_slice(&mark.transfers);
    }

    fn drop_front(&mut self, n: usize) {
        self.times.drain(..n);
        self.deltas.drain(..n * 3 * self.m);
        self.dropped += n as u64;
    }

    /// Deltas of epoch `i` as (arrivals, departures, transfers) slices.
    pub fn record(&self, i: usize) -> (f64, &[u32], &[u32], &[u32]) {
        let m = self.m;
        let base = i * 3 * m;
        (
            self.times[i],
            &self.deltas[base..base + m],
            &self.deltas[base + m..base + 2 * m],
            &self.deltas[base + 2 * m..base + 3 * m],
        )
    }
}

/// Cumulative counts, simple (epoch) counts and the jump log.
#[derive(Debug)]
pub struct CountingLedger {
    m: usize,
    /// Cumulative customers per queue for each counting process.
    pub cum_arrivals: Vec<u64>,
    pub cum_departures: Vec<u64>,
    pub cum_transfers: Vec<u64>,
    /// Simple point-process counts: epochs at which queue `i` saw at least
    /// one arrival / departure.
    pub arrival_epochs: Vec<u64>,
    pub departure_epochs: Vec<u64>,
    /// Epochs with any arrival / any departure.
    pub total_arrival_epochs: u64,
    pub total_departure_epochs: u64,
    /// Departure epochs keyed by the subset of queues departing together.
    pub departure_subset_epochs: BTreeMap<u32, u64>,
    mode: JumpLogMode,
    log: JumpLog,
    stream: Option<std::io::BufWriter<std::fs::File>>,
}

impl CountingLedger {
    pub fn new(m: usize, mode: JumpLogMode) -> Result<Self> {
        let stream = match &mode {
            JumpLogMode::Stream(path) => Some(std::io::BufWriter::new(
                std::fs::File::create(path)?,
            )),
            _ => None,
        };
        Ok(Self {
            m,
            cum_arrivals: vec![0; m],
            cum_departures: vec![0; m],
            cum_transfers: vec![0; m],
            arrival_epochs: vec![0; m],
            departure_epochs: vec![0; m],
            total_arrival_epochs: 0,
            total_departure_epochs: 0,
            departure_subset_epochs: BTreeMap::new(),
            mode,
            log: JumpLog::new(m),
            stream,
        })
    }

    /// Write the stream header (queue count and initial state). Must run
    /// before the first record in stream mode.
    pub fn stream_header(&mut self, x0: &[u32]) -> Result<()> {
        if let Some(w) = self.stream.as_mut() {
            writeln!(w, "# qbalance jumplog v1")?;
            let x0s: Vec<String> = x0.iter().map(|c| c.to_string()).collect();
            writeln!(w, "# m={} x0={}", self.m, x0s.join(","))?;
        }
        Ok(())
    }

    /// Append the end time and flush the stream, if any.
    pub fn finish_stream(&mut self, end_time: f64) -> Result<()> {
        if let Some(mut w) = self.stream.take() {
            writeln!(w, "# end={end_time}")?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn queue_count(&self) -> usize {
        self.m
    }

    pub fn record(&mut self, time: f64, mark: &JumpMark) -> Result<()> {
        let mut any_arrival = false;
        let mut any_departure = false;
        for q in 0..self.m {
            self.cum_arrivals[q] += u64::from(mark.arrivals[q]);
            self.cum_departures[q] += u64::from(mark.departures[q]);
            self.cum_transfers[q] += u64::from(mark.transfers[q]);
            if mark.arrivals[q] > 0 {
                self.arrival_epochs[q] += 1;
                any_arrival = true;
            }
            if mark.departures[q] > 0 {
                self.departure_epochs[q] += 1;
                any_departure = true;
            }
        }
        if any_arrival {
            self.total_arrival_epochs += 1;
        }
        if any_departure {
            self.total_departure_epochs += 1;
            let mask = classify_departure_subset(mark).expect("departure mark has support");
            *self.departure_subset_epochs.entry(mask).or_insert(0) += 1;
        }
        match &self.mode {
            JumpLogMode::Off => {}
            JumpLogMode::Full => self.log.push(time, mark),
            JumpLogMode::Ring(cap) => {
                let cap = *cap;
                self.log.push(time, mark);
                if self.log.len() > cap {
                    let excess = self.log.len() - cap;
                    self.log.drop_front(excess);
                }
            }
            JumpLogMode::Stream(_) => {
                let w = self.stream.as_mut().expect("stream writer open");
                write_record(
                    w,
                    time,
                    &mark.arrivals,
                    &mark.departures,
                    &mark.transfers,
                )?;
            }
        }
        Ok(())
    }

    pub fn jump_log(&self) -> &JumpLog {
        &self.log
    }

    /// The subset epoch counters must partition the total departure epochs.
    pub fn subset_counts_are_partition(&self) -> bool {
        let total: u64 = self.departure_subset_epochs.values().sum();
        total == self.total_departure_epochs
    }

    /// Replay the full jump log from `x0` and confirm the conservation
    /// identity `X(t) = X(0) + N_arr(t) - N_dep(t) + N_xfer(t)` at every
    /// epoch, returning the final state. Requires a full log.
    pub fn replay_conservation(&self, x0: &StateVector) -> Result<StateVector> {
        if self.log.dropped > 0 {
            return Err(Error::EmptyLog("jump log was truncated by ring mode"));
        }
        let m = self.m;
        let mut x = x0.clone();
        let mut mark = JumpMark::zeros(m);
        let mut cum = vec![0i64; m];
        for i in 0..self.log.len() {
            let (_, arr, dep, xfer) = self.log.record(i);
            mark.arrivals.copy_from_slice(arr);
            mark.departures.copy_from_slice(dep);
            mark.transfers.copy_from_slice(xfer);
            let (_, post) = apply_jump(&x, &mark)?;
            for q in 0..m {
                cum[q] += i64::from(arr[q]) - i64::from(dep[q]) + i64::from(xfer[q]);
                debug_assert_eq!(
                    i64::from(post.counts()[q]),
                    i64::from(x0.counts()[q]) + cum[q]
                );
            }
            x = post;
        }
        for q in 0..m {
            if i64::from(x.counts()[q]) != i64::from(x0.counts()[q]) + cum[q] {
                return Err(Error::Config(format!(
                    "conservation identity broken at queue {q}"
                )));
            }
        }
        Ok(x)
    }
}

/// Write one record line: time then the three delta vectors.
fn write_record(
    w: &mut impl Write,
    time: f64,
    arrivals: &[u32],
    departures: &[u32],
    transfers: &[u32],
) -> Result<()> {
    let mut line = String::new();
    write!(line, "{time}").unwrap();
    for v in arrivals.iter().chain(departures).chain(transfers) {
        write!(line, " {v}").unwrap();
    }
    writeln!(w, "{line}")?;
    Ok(())
}

/// Plain-text jump-log file format.
///
/// Header lines start with `#` and carry the queue count, initial state and
/// final time. Each record line is the epoch time followed by `3m`
/// integers: arrivals, departures, transfers per queue. Times are printed
/// with Rust's shortest round-trip formatting so a parsed log replays
/// bit-exactly.
pub struct JumpLogFile {
    pub m: usize,
    pub x0: Vec<u32>,
    pub end_time: f64,
    pub log: JumpLog,
}

impl JumpLogFile {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "# qbalance jumplog v1")?;
        let x0: Vec<String> = self.x0.iter().map(|c| c.to_string()).collect();
        writeln!(
            w,
            "# m={} x0={} end={}",
            self.m,
            x0.join(","),
            self.end_time
        )?;
        for i in 0..self.log.len() {
            let (t, arr, dep, xfer) = self.log.record(i);
            write_record(w, t, arr, dep, xfer)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut m = None;
        let mut x0 = Vec::new();
        let mut end_time = None;
        let mut log: Option<JumpLog> = None;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let bad = |why: &str| Error::MalformedLog {
                line: lineno,
                why: why.to_string(),
            };
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("m=") {
                        m = Some(v.parse::<usize>().map_err(|_| bad("bad m"))?);
                    } else if let Some(v) = field.strip_prefix("x0=") {
                        x0 = v
                            .split(',')
                            .map(|c| c.parse::<u32>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad("bad x0"))?;
                    } else if let Some(v) = field.strip_prefix("end=") {
                        end_time = Some(v.parse::<f64>().map_err(|_| bad("bad end"))?);
                    }
                }
                continue;
            }
            let m = m.ok_or_else(|| bad("record before header"))?;
            let log = log.get_or_insert_with(|| JumpLog::new(m));
            let mut parts = trimmed.split_whitespace();
            let t: f64 = parts
                .next()
                .ok_or_else(|| bad("missing time"))?
                .parse()
                .map_err(|_| bad("bad time"))?;
            let vals: Vec<u32> = parts
                .map(|p| p.parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad delta"))?;
            if vals.len() != 3 * m {
                return Err(bad("wrong number of deltas"));
            }
            log.times.push(t);
            log.deltas.extend_from_slice(&vals);
        }
        let m = m.ok_or(Error::MalformedLog {
            line: 0,
            why: "missing header".to_string(),
        })?;
        if x0.len() != m {
            return Err(Error::MalformedLog {
                line: 0,
                why: "x0 length does not match m".to_string(),
            });
        }
        Ok(Self {
            m,
            x0,
            end_time: end_time.unwrap_or(0.0),
            log: log.unwrap_or_else(|| JumpLog::new(m)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mark(m: usize, arr: &[(usize, u32)], dep: &[(usize, u32)], xfer: &[(usize, u32)]) -> JumpMark {
        let mut mk = JumpMark::zeros(m);
        for &(q, c) in arr {
            mk.arrivals[q] = c;
        }
        for &(q, c) in dep {
            mk.departures[q] = c;
        }
        for &(q, c) in xfer {
            mk.transfers[q] = c;
        }
        mk
    }

    #[test]
    fn apply_jump_departure_with_transfer() {
        let x = StateVector::from_counts(vec![2, 1]);
        let mk = mark(2, &[], &[(0, 1)], &[(1, 1)]);
        let (mid, post) = apply_jump(&x, &mk).unwrap();
        assert_eq!(mid.counts, vec![1, 1]);
        assert_eq!(post.counts(), &[1, 2]);
    }

    #[test]
    fn apply_jump_pure_batch_arrival() {
        let x = StateVector::zeros(2);
        let mk = mark(2, &[(0, 2), (1, 1)], &[], &[]);
        let (mid, post) = apply_jump(&x, &mk).unwrap();
        assert_eq!(mid.counts, vec![2, 1]);
        assert_eq!(post.counts(), &[2, 1]);
    }

    #[test]
    fn apply_jump_departure_leaving_system() {
        let x = StateVector::from_counts(vec![1, 0]);
        let mk = mark(2, &[], &[(0, 1)], &[]);
        let (mid, post) = apply_jump(&x, &mk).unwrap();
        assert_eq!(mid.counts, vec![0, 0]);
        assert_eq!(post.counts(), &[0, 0]);
    }

    #[test]
    fn apply_jump_rejects_negative_state() {
        let x = StateVector::zeros(1);
        let mk = mark(1, &[], &[(0, 1)], &[]);
        assert!(matches!(
            apply_jump(&x, &mk),
            Err(Error::NegativeState { queue: 0, .. })
        ));
    }

    #[test]
    fn departure_subset_classification() {
        let mk = mark(3, &[], &[(0, 1), (2, 2)], &[]);
        assert_eq!(classify_departure_subset(&mk), Some(0b101));
        assert_eq!(subset_members(0b101), vec![0, 2]);
        let single = mark(3, &[], &[(1, 1)], &[]);
        assert_eq!(classify_departure_subset(&single), Some(0b010));
        let none = mark(3, &[(0, 1)], &[], &[]);
        assert_eq!(classify_departure_subset(&none), None);
    }

    #[test]
    fn ledger_counts_and_partition() {
        let mut ledger = CountingLedger::new(2, JumpLogMode::Full).unwrap();
        ledger.record(0.5, &mark(2, &[(0, 1)], &[], &[])).unwrap();
        ledger.record(1.0, &mark(2, &[], &[(0, 1)], &[(1, 1)])).unwrap();
        ledger.record(1.5, &mark(2, &[(1, 2)], &[], &[])).unwrap();
        ledger.record(2.0, &mark(2, &[], &[(0, 1), (1, 1)], &[])).unwrap();
        assert_eq!(ledger.cum_arrivals, vec![1, 2]);
        assert_eq!(ledger.cum_departures, vec![2, 1]);
        assert_eq!(ledger.cum_transfers, vec![0, 1]);
        assert_eq!(ledger.total_arrival_epochs, 2);
        assert_eq!(ledger.total_departure_epochs, 2);
        assert!(ledger.subset_counts_are_partition());
        assert_eq!(ledger.departure_subset_epochs[&0b01], 1);
        assert_eq!(ledger.departure_subset_epochs[&0b11], 1);
    }

    #[test]
    fn conservation_replay() {
        let mut ledger = CountingLedger::new(2, JumpLogMode::Full).unwrap();
        let x0 = StateVector::zeros(2);
        ledger.record(0.5, &mark(2, &[(0, 1)], &[], &[])).unwrap();
        ledger.record(0.7, &mark(2, &[(0, 1)], &[], &[])).unwrap();
        ledger.record(1.0, &mark(2, &[], &[(0, 1)], &[(1, 1)])).unwrap();
        let end = ledger.replay_conservation(&x0).unwrap();
        assert_eq!(end.counts(), &[1, 1]);
    }

    #[test]
    fn ring_mode_bounds_memory() {
        let mut ledger = CountingLedger::new(1, JumpLogMode::Ring(3)).unwrap();
        for i in 0..10 {
            ledger.record(i as f64, &mark(1, &[(0, 1)], &[], &[])).unwrap();
        }
        assert_eq!(ledger.jump_log().len(), 3);
        assert_eq!(ledger.jump_log().dropped, 7);
        assert_eq!(ledger.cum_arrivals[0], 10);
        let x0 = StateVector::zeros(1);
        assert!(ledger.replay_conservation(&x0).is_err());
    }

    #[test]
    fn jump_log_file_round_trips_bit_exactly() {
        let mut log = JumpLog::new(2);
        let mut mk = JumpMark::zeros(2);
        mk.arrivals[0] = 1;
        log.push(0.1 + 0.2, &mk); // deliberately non-representable decimal
        mk.clear();
        mk.departures[0] = 1;
        mk.transfers[1] = 1;
        log.push(1.0 / 3.0, &mk);
        let file = JumpLogFile {
            m: 2,
            x0: vec![0, 0],
            end_time: 12345.6789,
            log,
        };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        let parsed = JumpLogFile::read_from(&buf[..]).unwrap();
        assert_eq!(parsed.m, 2);
        assert_eq!(parsed.x0, vec![0, 0]);
        assert_eq!(parsed.end_time.to_bits(), file.end_time.to_bits());
        assert_eq!(parsed.log.times.len(), 2);
        for i in 0..2 {
            assert_eq!(parsed.log.times[i].to_bits(), file.log.times[i].to_bits());
        }
        assert_eq!(parsed.log.deltas, file.log.deltas);
    }
}
