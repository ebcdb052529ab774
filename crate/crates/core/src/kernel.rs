//! Discrete-event engine with departure-first epoch processing.
//!
//! One engine runs one replication. Models schedule events and emit at most
//! one jump mark per event; the engine applies the mark to the state,
//! updates the counting ledger, feeds the embedded estimators and enforces
//! the no-shared-epoch rule between external arrivals and departures.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::estimators::{
    BlockPlan, EmbeddedLogBuilder, EmbeddedSampleLog, TagKind, TimeAverage, TimeAverageBuilder,
    TransientAccumulator,
};
use crate::state::{apply_jump, CountingLedger, JumpLogMode, JumpMark, StateVector};
use crate::testfns::TestFunction;

/// Perturbation applied to an arrival that collides with another epoch
/// under the `jitter` tie policy.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// A service completes at a station; the model decides who departs.
    ServiceCompletion { station: u32 },
    /// Reserved for models that re-queue customers at epochs of their own.
    /// Shipped models fold transfers into the departure epoch instead,
    /// since a transfer-only epoch falls outside the arrival/departure
    /// epoch set that the pathwise identity sums over.
    InternalArrival { queue: u32 },
    /// An external arrival stream fires.
    ExternalArrival { source: u32 },
    /// The server finishes switching and begins the next visit.
    SwitchoverEnd { station: u32 },
}

impl EventKind {
    /// Priority class for same-time ordering: completions, then internal
    /// arrivals, then external arrivals, then switchover ends.
    fn class(&self) -> u8 {
        match self {
            Self::ServiceCompletion { .. } => 0,
            Self::InternalArrival { .. } => 1,
            Self::ExternalArrival { .. } => 2,
            Self::SwitchoverEnd { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub seq: u64,
}

struct HeapEntry(Event);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .time
            .total_cmp(&other.0.time)
            .then(self.0.kind.class().cmp(&other.0.kind.class()))
            .then(self.0.seq.cmp(&other.0.seq))
    }
}

/// What to do when an arrival epoch would coincide with an existing epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Abort the run with `SimultaneityViolation`.
    #[default]
    Reject,
    /// Push the arrival forward by `TIE_EPSILON` and count the nudge.
    Jitter,
}

/// Simulation clock: current time plus the stopping rule.
#[derive(Clone, Copy, Debug)]
pub struct Clock {
    pub now: f64,
    /// Stop processing events after this time. May be infinite when an
    /// event budget is used instead.
    pub horizon: f64,
    /// Optional cap on the number of emitted jump marks.
    pub max_marks: Option<u64>,
}

/// Per-replication run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub horizon: f64,
    pub max_marks: Option<u64>,
    pub warmup_fraction: f64,
    pub blocks: usize,
    pub tie_policy: TiePolicy,
    pub log_mode: JumpLogMode,
    pub grid: Vec<Vec<f64>>,
    pub test_functions: Vec<TestFunction>,
}

impl RunConfig {
    pub fn new(horizon: f64) -> Self {
        Self {
            horizon,
            max_marks: None,
            warmup_fraction: 0.1,
            blocks: crate::estimators::DEFAULT_BLOCKS,
            tie_policy: TiePolicy::Reject,
            log_mode: JumpLogMode::Off,
            grid: Vec::new(),
            test_functions: Vec::new(),
        }
    }
}

/// Everything a replication produces.
#[derive(Debug)]
pub struct RunOutput {
    pub ledger: CountingLedger,
    /// Present when the horizon is finite (blocked estimators need it).
    pub samples: Option<EmbeddedSampleLog>,
    pub tavg: Option<TimeAverage>,
    pub transients: Vec<TransientAccumulator>,
    pub x0: Vec<u32>,
    pub x_final: Vec<u32>,
    pub end_time: f64,
    pub warmup_time: f64,
    pub events_processed: u64,
    pub marks_emitted: u64,
    pub jitter_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MarkKind {
    Arrival,
    Departure,
    Transfer,
}

/// Which state snapshot a tag captures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateChoice {
    /// The state after this epoch's mark is fully applied.
    Post,
    /// The intermediate state of this epoch's departure mark (departures
    /// removed, transfers not yet re-queued).
    Mid,
}

/// Command surface handed to models. Collects the epoch's mark, tags and
/// future events; the engine applies them after the handler returns.
pub struct Ctx<'a> {
    pub now: f64,
    state: &'a [u32],
    mark: &'a mut JumpMark,
    mark_kind: &'a mut Option<MarkKind>,
    tags: &'a mut Vec<(TagKind, usize, StateChoice)>,
    schedules: &'a mut Vec<(f64, EventKind)>,
}

impl Ctx<'_> {
    /// Queue lengths before this epoch's mark.
    pub fn state(&self) -> &[u32] {
        self.state
    }

    pub fn schedule_at(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time >= self.now, "scheduling into the past");
        self.schedules.push((time, kind));
    }

    pub fn schedule_after(&mut self, dt: f64, kind: EventKind) {
        self.schedule_at(self.now + dt, kind);
    }

    fn set_kind(&mut self, kind: MarkKind) {
        assert!(
            self.mark_kind.is_none(),
            "a model emitted two marks in one epoch"
        );
        *self.mark_kind = Some(kind);
    }

    /// Emit this epoch's external-arrival mark.
    pub fn emit_arrival(&mut self, batch: &[u32]) {
        self.set_kind(MarkKind::Arrival);
        self.mark.arrivals.copy_from_slice(batch);
    }

    /// Emit an external arrival of `count` customers at one queue.
    pub fn emit_arrival_at(&mut self, queue: usize, count: u32) {
        self.set_kind(MarkKind::Arrival);
        self.mark.arrivals[queue] = count;
    }

    /// Emit this epoch's departure mark: departures removed first, then
    /// transfers re-queued, atomically.
    pub fn emit_departure(&mut self, departures: &[u32], transfers: &[u32]) {
        self.set_kind(MarkKind::Departure);
        self.mark.departures.copy_from_slice(departures);
        self.mark.transfers.copy_from_slice(transfers);
    }

    /// Departure of `count` customers from `queue`, optionally re-queued at
    /// `route_to`.
    pub fn emit_departure_from(&mut self, queue: usize, count: u32, route_to: Option<usize>) {
        self.set_kind(MarkKind::Departure);
        self.mark.departures[queue] = count;
        if let Some(to) = route_to {
            self.mark.transfers[to] = count;
        }
    }

    /// Emit a transfer-only mark (see `EventKind::InternalArrival`).
    pub fn emit_transfer(&mut self, transfers: &[u32]) {
        self.set_kind(MarkKind::Transfer);
        self.mark.transfers.copy_from_slice(transfers);
    }

    /// Snapshot the state for an embedded-epoch estimator.
    pub fn tag(&mut self, kind: TagKind, queue: usize, which: StateChoice) {
        self.tags.push((kind, queue, which));
    }
}

/// A queueing model plugged into the engine.
pub trait Model {
    fn queue_count(&self) -> usize;

    /// Which station serves each queue. Default: one station per queue.
    fn queue_layout(&self) -> crate::state::QueueLayout {
        crate::state::QueueLayout::one_station_each(self.queue_count())
    }

    fn initial_state(&self) -> Vec<u32> {
        vec![0; self.queue_count()]
    }

    /// Schedule the first events (and tag initial epochs if any).
    fn init(&mut self, ctx: &mut Ctx);

    /// Handle one event.
    fn handle(&mut self, event: Event, ctx: &mut Ctx);
}

/// Run one replication of `model` under `cfg`.
pub fn run_model<M: Model>(model: &mut M, cfg: &RunConfig) -> Result<RunOutput> {
    let m = model.queue_count();
    let x0 = model.initial_state();
    let mut state = StateVector::from_counts(x0.clone());
    let mut ledger = CountingLedger::new(m, cfg.log_mode.clone())?;
    ledger.stream_header(&x0)?;

    let warmup_time = if cfg.horizon.is_finite() {
        cfg.horizon * cfg.warmup_fraction
    } else {
        0.0
    };
    let plan = BlockPlan {
        start: warmup_time,
        end: cfg.horizon,
        count: cfg.blocks,
    };
    let mut samples = cfg
        .horizon
        .is_finite()
        .then(|| EmbeddedLogBuilder::new(m, plan));
    let mut tavg = cfg
        .horizon
        .is_finite()
        .then(|| TimeAverageBuilder::new(m, plan, cfg.grid.clone(), &x0));
    let mut transients: Vec<TransientAccumulator> = cfg
        .test_functions
        .iter()
        .cloned()
        .map(TransientAccumulator::new)
        .collect();

    let mut heap: BinaryHeap<Reverse<HeapEntry>> = BinaryHeap::new();
    let mut seq: u64 = 0;
    let mut schedules: Vec<(f64, EventKind)> = Vec::new();
    let mut tags: Vec<(TagKind, usize, StateChoice)> = Vec::new();
    let mut mark = JumpMark::zeros(m);
    let mut mark_kind: Option<MarkKind> = None;
    let mut mid_scratch: Vec<u32> = vec![0; m];

    let mut clock = Clock {
        now: 0.0,
        horizon: cfg.horizon,
        max_marks: cfg.max_marks,
    };
    let mut last_mark_time = f64::NEG_INFINITY;
    let mut last_mark_at = 0.0;
    let mut events_processed: u64 = 0;
    let mut marks_emitted: u64 = 0;
    let mut jitter_count: u64 = 0;

    {
        let mut ctx = Ctx {
            now: 0.0,
            state: state.counts(),
            mark: &mut mark,
            mark_kind: &mut mark_kind,
            tags: &mut tags,
            schedules: &mut schedules,
        };
        model.init(&mut ctx);
    }
    assert!(mark_kind.is_none(), "init must not emit a mark");
    if let Some(s) = samples.as_mut() {
        for &(kind, queue, _) in tags.iter() {
            s.record_tag(kind, queue, 0.0, state.counts());
        }
    }
    tags.clear();
    for (t, k) in schedules.drain(..) {
        heap.push(Reverse(HeapEntry(Event { time: t, kind: k, seq })));
        seq += 1;
    }

    while let Some(Reverse(HeapEntry(ev))) = heap.pop() {
        if ev.time > clock.horizon {
            break;
        }
        // Arrival epochs may not coincide with an existing epoch; resolve
        // before the model draws anything.
        if matches!(ev.kind, EventKind::ExternalArrival { .. }) && ev.time == last_mark_time {
            match cfg.tie_policy {
                TiePolicy::Reject => {
                    return Err(Error::SimultaneityViolation { time: ev.time })
                }
                TiePolicy::Jitter => {
                    jitter_count += 1;
                    heap.push(Reverse(HeapEntry(Event {
                        time: ev.time + TIE_EPSILON,
                        kind: ev.kind,
                        seq,
                    })));
                    seq += 1;
                    continue;
                }
            }
        }
        events_processed += 1;
        clock.now = ev.time;
        let now = clock.now;
        {
            let mut ctx = Ctx {
                now,
                state: state.counts(),
                mark: &mut mark,
                mark_kind: &mut mark_kind,
                tags: &mut tags,
                schedules: &mut schedules,
            };
            model.handle(ev, &mut ctx);
        }

        if let Some(kind) = mark_kind.take() {
            if now == last_mark_time {
                // Only arrivals are jitterable, and they were handled above.
                return Err(Error::SimultaneityViolation { time: now });
            }
            match kind {
                MarkKind::Arrival => {
                    debug_assert!(mark.departure_total() == 0 && mark.transfer_total() == 0);
                    if let Some(s) = samples.as_mut() {
                        s.record_arrival(now, state.counts(), &mark.arrivals);
                    }
                    for acc in &mut transients {
                        acc.record_arrival(state.counts(), &mark.arrivals);
                    }
                }
                MarkKind::Departure => {
                    debug_assert!(mark.arrival_total() == 0);
                }
                MarkKind::Transfer => {
                    debug_assert!(
                        mark.arrival_total() == 0 && mark.departure_total() == 0
                    );
                }
            }
            let (mid, post) = apply_jump(&state, &mark)?;
            if kind == MarkKind::Departure {
                if let Some(s) = samples.as_mut() {
                    s.record_departure(now, &mid.counts, &mark.departures, &mark.transfers);
                }
                for acc in &mut transients {
                    acc.record_departure(&mid.counts, &mark.departures, &mark.transfers);
                }
            }
            mid_scratch.copy_from_slice(&mid.counts);
            if let Some(t) = tavg.as_mut() {
                t.advance_to(now);
                for q in 0..m {
                    let delta = i64::from(post.counts()[q]) - i64::from(state.counts()[q]);
                    t.apply_delta(q, delta as i32);
                }
            }
            ledger.record(now, &mark)?;
            state = post;
            mark.clear();
            last_mark_time = now;
            last_mark_at = now;
            marks_emitted += 1;
        }

        if let Some(s) = samples.as_mut() {
            for &(kind, queue, which) in tags.iter() {
                let snap: &[u32] = match which {
                    StateChoice::Post => state.counts(),
                    StateChoice::Mid => &mid_scratch,
                };
                s.record_tag(kind, queue, now, snap);
            }
        }
        tags.clear();

        for (t, k) in schedules.drain(..) {
            heap.push(Reverse(HeapEntry(Event { time: t, kind: k, seq })));
            seq += 1;
        }

        if let Some(cap) = clock.max_marks {
            if marks_emitted >= cap {
                break;
            }
        }
    }

    let end_time = if clock.horizon.is_finite() {
        clock.horizon
    } else {
        last_mark_at
    };
    let tavg = tavg.map(|mut t| {
        t.advance_to(end_time);
        t.freeze()
    });
    ledger.finish_stream(end_time)?;

    Ok(RunOutput {
        ledger,
        samples: samples.map(EmbeddedLogBuilder::freeze),
        tavg,
        transients,
        x0,
        x_final: state.counts().to_vec(),
        end_time,
        warmup_time,
        events_processed,
        marks_emitted,
        jitter_count,
    })
}

/// Point estimates of the epoch rates from a ledger at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateEstimates {
    /// Rate of arrival epochs and departure epochs.
    pub arrival_rate: f64,
    pub departure_rate: f64,
    /// Per-queue epoch rates.
    pub per_queue_arrival: Vec<f64>,
    pub per_queue_departure: Vec<f64>,
    /// Rate of departure epochs per support subset (bitmask keyed).
    pub per_subset: Vec<(u32, f64)>,
}

pub fn rate_estimates(ledger: &CountingLedger, t: f64) -> RateEstimates {
    assert!(t > 0.0, "rates need a positive observation time");
    RateEstimates {
        arrival_rate: ledger.total_arrival_epochs as f64 / t,
        departure_rate: ledger.total_departure_epochs as f64 / t,
        per_queue_arrival: ledger
            .arrival_epochs
            .iter()
            .map(|&c| c as f64 / t)
            .collect(),
        per_queue_departure: ledger
            .departure_epochs
            .iter()
            .map(|&c| c as f64 / t)
            .collect(),
        per_subset: ledger
            .departure_subset_epochs
            .iter()
            .map(|(&mask, &c)| (mask, c as f64 / t))
            .collect(),
    }
}
