//! Single-node multiclass service facility with one server.
//!
//! Covers ordinary M/G/1-type queues, batch Poisson arrivals, fixed-size
//! batch services, non-preemptive priorities and the longer-queue
//! discipline. Departures never route anywhere: customers leave.

use std::collections::VecDeque;

use crate::dist::{BatchLaw, ServiceDistribution};
use crate::kernel::{Ctx, Event, EventKind, Model};
use crate::rng::RngStream;

use super::{stream_for, streams};

/// How external customers enter the facility.
#[derive(Clone, Debug)]
pub enum ArrivalProcess {
    /// Independent renewal streams, one per class. Poisson input is the
    /// exponential special case.
    PerClassRenewal(Vec<ServiceDistribution>),
    /// One Poisson stream of batch epochs; each epoch draws a batch vector.
    BatchPoisson { rate: f64, law: BatchLaw },
}

/// Which waiting customer is served next.
#[derive(Clone, Debug, PartialEq)]
pub enum Discipline {
    /// First come, first served across classes.
    Fcfs,
    /// Non-preemptive priority: class 1 (index 0) highest.
    Priority,
    /// Serve the strictly longer of two queues; break ties in favour of
    /// queue 1 with probability `alpha1`.
    LongerQueue { alpha1: f64 },
}

pub struct FacilityModel {
    m: usize,
    arrivals: ArrivalProcess,
    services: Vec<ServiceDistribution>,
    discipline: Discipline,
    /// Batch-service sizes; class `i` service starts only when `batch_k[i]`
    /// customers wait and removes them together.
    batch_k: Vec<u32>,
    waiting: Vec<u32>,
    fcfs_order: VecDeque<u16>,
    in_service: Option<(usize, u32)>,
    arrival_streams: Vec<RngStream>,
    service_streams: Vec<RngStream>,
    batch_stream: RngStream,
    pick_stream: RngStream,
    batch_scratch: Vec<u32>,
}

impl FacilityModel {
    pub fn new(
        services: Vec<ServiceDistribution>,
        arrivals: ArrivalProcess,
        discipline: Discipline,
        batch_k: Vec<u32>,
        rep_root: &RngStream,
    ) -> Self {
        let m = services.len();
        debug_assert_eq!(batch_k.len(), m);
        let arrival_streams = (0..m)
            .map(|q| stream_for(rep_root, streams::ARRIVALS, q))
            .collect();
        let service_streams = (0..m)
            .map(|q| stream_for(rep_root, streams::SERVICES, q))
            .collect();
        Self {
            m,
            arrivals,
            services,
            discipline,
            batch_k,
            waiting: vec![0; m],
            fcfs_order: VecDeque::new(),
            in_service: None,
            arrival_streams,
            service_streams,
            batch_stream: rep_root.split(streams::BATCHES),
            pick_stream: rep_root.split(streams::PICKS),
            batch_scratch: vec![0; m],
        }
    }

    fn schedule_arrival(&mut self, source: usize, ctx: &mut Ctx) {
        let dt = match &self.arrivals {
            ArrivalProcess::PerClassRenewal(dists) => {
                dists[source].sample(&mut self.arrival_streams[source])
            }
            ArrivalProcess::BatchPoisson { rate, .. } => ServiceDistribution::Exponential {
                rate: *rate,
            }
            .sample(&mut self.arrival_streams[0]),
        };
        ctx.schedule_after(
            dt,
            EventKind::ExternalArrival {
                source: source as u32,
            },
        );
    }

    fn enqueue(&mut self, class: usize, count: u32) {
        self.waiting[class] += count;
        if self.discipline == Discipline::Fcfs {
            for _ in 0..count {
                self.fcfs_order.push_back(class as u16);
            }
        }
    }

    /// Next class to serve, or `None` to idle. Decided on the waiting
    /// counts, i.e. the post-departure state at a completion epoch.
    fn pick(&mut self) -> Option<usize> {
        match &self.discipline {
            Discipline::Fcfs => {
                if self.batch_k.iter().all(|&k| k == 1) {
                    self.fcfs_order.front().map(|&c| c as usize)
                } else {
                    (0..self.m).find(|&c| self.waiting[c] >= self.batch_k[c])
                }
            }
            Discipline::Priority => {
                (0..self.m).find(|&c| self.waiting[c] >= self.batch_k[c])
            }
            Discipline::LongerQueue { alpha1 } => {
                debug_assert_eq!(self.m, 2);
                let (a, b) = (self.waiting[0], self.waiting[1]);
                if a == 0 && b == 0 {
                    None
                } else if a > b {
                    Some(0)
                } else if b > a {
                    Some(1)
                } else if self.pick_stream.next_bool(*alpha1) {
                    Some(0)
                } else {
                    Some(1)
                }
            }
        }
    }

    fn try_start(&mut self, ctx: &mut Ctx) {
        debug_assert!(self.in_service.is_none());
        let Some(class) = self.pick() else {
            return;
        };
        let k = self.batch_k[class];
        if self.waiting[class] < k {
            return;
        }
        self.waiting[class] -= k;
        if self.discipline == Discipline::Fcfs {
            let mut removed = 0;
            self.fcfs_order.retain(|&c| {
                if removed < k && c as usize == class {
                    removed += 1;
                    false
                } else {
                    true
                }
            });
        }
        let duration = self.services[class].sample(&mut self.service_streams[class]);
        self.in_service = Some((class, k));
        ctx.schedule_after(duration, EventKind::ServiceCompletion { station: 0 });
    }
}

impl Model for FacilityModel {
    fn queue_count(&self) -> usize {
        self.m
    }

    /// All classes queue at one station.
    fn queue_layout(&self) -> crate::state::QueueLayout {
        crate::state::QueueLayout::single_station(self.m)
    }

    fn init(&mut self, ctx: &mut Ctx) {
        match &self.arrivals {
            ArrivalProcess::PerClassRenewal(_) => {
                for q in 0..self.m {
                    self.schedule_arrival(q, ctx);
                }
            }
            ArrivalProcess::BatchPoisson { .. } => self.schedule_arrival(0, ctx),
        }
    }

    fn handle(&mut self, event: Event, ctx: &mut Ctx) {
        match event.kind {
            EventKind::ExternalArrival { source } => {
                let source = source as usize;
                match &self.arrivals {
                    ArrivalProcess::PerClassRenewal(_) => {
                        self.batch_scratch.fill(0);
                        self.batch_scratch[source] = 1;
                    }
                    ArrivalProcess::BatchPoisson { law, .. } => {
                        let batch = law.sample(&mut self.batch_stream);
                        self.batch_scratch.copy_from_slice(batch);
                    }
                }
                ctx.emit_arrival(&self.batch_scratch);
                for c in 0..self.m {
                    let g = self.batch_scratch[c];
                    if g > 0 {
                        self.enqueue(c, g);
                    }
                }
                self.schedule_arrival(source, ctx);
                if self.in_service.is_none() {
                    self.try_start(ctx);
                }
            }
            EventKind::ServiceCompletion { .. } => {
                let (class, k) = self.in_service.take().expect("completion without service");
                ctx.emit_departure_from(class, k, None);
                self.try_start(ctx);
            }
            EventKind::InternalArrival { .. } | EventKind::SwitchoverEnd { .. } => {
                unreachable!("facility models schedule no such events")
            }
        }
    }
}
