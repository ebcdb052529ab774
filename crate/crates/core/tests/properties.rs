//! Property tests over the core types: transition algebra, ledger
//! invariants, log round-trips and transform laws.

use proptest::prelude::*;

use qbalance::dist::ServiceDistribution;
use qbalance::state::{
    apply_jump, classify_departure_subset, CountingLedger, JumpLog, JumpLogFile, JumpLogMode,
    JumpMark, StateVector,
};

/// A short random history of exclusive marks over `m` queues, as raw
/// (arrivals, departures, transfers) triples.
fn mark_history(m: usize) -> impl Strategy<Value = Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>> {
    let mark = (any::<bool>(), proptest::collection::vec(0u32..3, m * 2))
        .prop_map(move |(is_arrival, raw)| {
            let mut arr = vec![0u32; m];
            let mut dep = vec![0u32; m];
            let mut xfer = vec![0u32; m];
            if is_arrival {
                arr.copy_from_slice(&raw[..m]);
            } else {
                dep.copy_from_slice(&raw[..m]);
                // Transfers re-queue at most what departed, shifted around.
                for q in 0..m {
                    xfer[(q + 1) % m] = raw[m + q].min(dep[q]);
                }
            }
            (arr, dep, xfer)
        });
    proptest::collection::vec(mark, 1..60)
}

proptest! {
    /// Replaying any exclusive mark history keeps the conservation
    /// identity exact and the subset counters a partition.
    #[test]
    fn conservation_holds_on_any_history(history in mark_history(3)) {
        let m = 3;
        let mut ledger = CountingLedger::new(m, JumpLogMode::Full).unwrap();
        let mut x = StateVector::zeros(m);
        let mut t = 0.0;
        let mut mark = JumpMark::zeros(m);
        for (arr, dep, xfer) in &history {
            mark.arrivals.copy_from_slice(arr);
            mark.departures.copy_from_slice(dep);
            mark.transfers.copy_from_slice(xfer);
            prop_assert!(mark.is_exclusive());
            t += 0.5;
            // Skip infeasible departures instead of failing the case.
            match apply_jump(&x, &mark) {
                Ok((mid, post)) => {
                    for q in 0..m {
                        prop_assert_eq!(
                            mid.counts[q] + mark.transfers[q],
                            post.counts()[q]
                        );
                    }
                    ledger.record(t, &mark).unwrap();
                    x = post;
                }
                Err(_) => continue,
            }
        }
        prop_assert!(ledger.subset_counts_are_partition());
        let replayed = ledger.replay_conservation(&StateVector::zeros(m)).unwrap();
        prop_assert_eq!(replayed.counts(), x.counts());
        // Cumulative counts are consistent with the final state.
        for q in 0..m {
            let net = ledger.cum_arrivals[q] as i64 - ledger.cum_departures[q] as i64
                + ledger.cum_transfers[q] as i64;
            prop_assert_eq!(net, i64::from(x.counts()[q]));
        }
    }

    /// The departure-subset classifier returns exactly the support.
    #[test]
    fn subset_classification_is_support(dep in proptest::collection::vec(0u32..4, 1..6)) {
        let m = dep.len();
        let mut mark = JumpMark::zeros(m);
        mark.departures.copy_from_slice(&dep);
        match classify_departure_subset(&mark) {
            None => prop_assert!(dep.iter().all(|&d| d == 0)),
            Some(mask) => {
                for (q, &d) in dep.iter().enumerate() {
                    prop_assert_eq!(mask & (1 << q) != 0, d > 0);
                }
            }
        }
    }

    /// Jump-log files round-trip bit-exactly through text.
    #[test]
    fn jump_log_file_round_trips(
        times in proptest::collection::vec(0.0f64..1e9, 1..40),
        seed in any::<u64>(),
    ) {
        let m = 2;
        let mut log = JumpLog::new(m);
        let mut mark = JumpMark::zeros(m);
        let mut t = 0.0;
        for (i, dt) in times.iter().enumerate() {
            t += dt / 1e3 + 1e-6;
            mark.clear();
            if i % 2 == 0 {
                mark.arrivals[i % m] = 1 + (seed % 3) as u32;
            } else {
                mark.departures[i % m] = 1;
                mark.transfers[(i + 1) % m] = (seed % 2) as u32;
            }
            log.push(t, &mark);
        }
        let file = JumpLogFile { m, x0: vec![7, 0], end_time: t, log };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        let parsed = JumpLogFile::read_from(&buf[..]).unwrap();
        prop_assert_eq!(parsed.m, file.m);
        prop_assert_eq!(parsed.x0, file.x0);
        prop_assert_eq!(parsed.log.deltas, file.log.deltas);
        for (a, b) in parsed.log.times.iter().zip(&file.log.times) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Transform laws: complete monotonicity on a grid and the past-lst
    /// identity, for random parameters across the catalog.
    #[test]
    fn transforms_are_monotone_and_consistent(
        rate in 0.05f64..20.0,
        shape in 1u32..6,
        lo in 0.01f64..2.0,
        span in 0.01f64..3.0,
        w in 0.05f64..0.95,
    ) {
        let members = vec![
            ServiceDistribution::Exponential { rate },
            ServiceDistribution::Erlang { shape, rate },
            ServiceDistribution::Deterministic { value: lo },
            ServiceDistribution::Uniform { lo, hi: lo + span },
            ServiceDistribution::Hyperexponential {
                weights: vec![w, 1.0 - w],
                rates: vec![rate, rate * 3.0],
            },
        ];
        for dist in members {
            dist.validate().unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..100 {
                let s = k as f64 * 0.1;
                let v = dist.lst(s);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                prop_assert!(v <= prev + 1e-12);
                prev = v;
                let identity = dist.lst_past(s) * dist.mean() * s + dist.lst(s);
                if s > 0.0 {
                    prop_assert!((identity - 1.0).abs() < 1e-12);
                }
            }
            prop_assert_eq!(dist.lst(0.0), 1.0);
        }
    }
}
