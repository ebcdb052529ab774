//! Concrete models plugged into the kernel: single-node multiclass
//! facilities and cyclic-server (polling / roving) networks.

mod facility;
mod polling;

pub use facility::{ArrivalProcess, Discipline, FacilityModel};
pub use polling::{PollingDiscipline, PollingModel, RoutingRule, ServiceOrder};

use crate::rng::RngStream;

/// Stream indices under a replication root, so every (process, queue) pair
/// owns an independent stream.
pub(crate) mod streams {
    pub const ARRIVALS: u64 = 0;
    pub const SERVICES: u64 = 1;
    pub const SWITCHOVERS: u64 = 2;
    pub const ROUTING: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const PICKS: u64 = 5;
}

pub(crate) fn stream_for(root: &RngStream, process: u64, queue: usize) -> RngStream {
    root.split(process).split(queue as u64)
}
