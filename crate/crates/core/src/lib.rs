//! Discrete-event simulation and balance-identity verification for
//! multiclass queueing networks.
//!
//! The toolkit simulates queueing models under a departure-first epoch
//! convention, estimates the embedded (Palm) laws at arrival and departure
//! epochs together with the time-average law, and grades a family of
//! queue-length balance identities against the output: exactly where an
//! identity is pathwise-deterministic, statistically (k-sigma over batch
//! blocks) where it concerns stationary quantities.
//!
//! Module map:
//! - [`state`]: queue-length vectors, jump marks, counting ledgers, jump-log
//!   files with bit-exact replay.
//! - [`rng`]: counter-based splittable random streams.
//! - [`dist`]: duration and batch-size laws with samplers and transforms.
//! - [`kernel`]: the event engine and its tie policy.
//! - [`models`]: facility and polling/roving model plug-ins.
//! - [`testfns`]: the versioned bounded test-function library.
//! - [`estimators`]: embedded sample logs, time averages, transient
//!   functionals, batch-means machinery.
//! - [`analytic`]: closed forms (transform compositions, traffic solutions,
//!   cycle constants, the assembled polling formula).
//! - [`verifier`]: the identity checks and the report container.
//! - [`scenario`]: the TOML scenario schema and the shipped corpus.
//! - [`runner`]: replication orchestration, report assembly, CSV export.

pub mod analytic;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod models;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod state;
pub mod testfns;
pub mod verifier;

pub use error::{Error, Result};
