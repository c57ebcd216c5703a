//! Deterministic discrete-event simulator for self-organizing peer groups.
//!
//! Rendezvous (RV) peers accept worker registrations and host the Entry Point
//! and Monitoring services, worker peers process queries and reply straight to
//! the client's pipe, and clients walk the group tree Root → Category →
//! Service to discover what they want to query. Every run is a pure function
//! of the scenario document and its seed.
//!
//! Layout:
//!
//! * [`kernel`], [`network`], [`rng`]: virtual clock, ordered event queue,
//!   seeded randomness and the lossy/partitionable link model.
//! * [`overlay`]: group tree, registration tables, discovery scoping,
//!   rendezvous election and partition-driven merge visibility.
//! * [`entrypoint`], [`monitor`], [`worker`]: the three per-service roles.
//! * [`scenario`]: scenario documents and the fault/workload timeline.
//! * [`trace`], [`metrics`]: the observable output of a run.
//! * [`sim`]: the world that wires everything onto the kernel.
//! * [`cli`]: the `conscientia` command line driver.

pub mod cli;
pub mod entrypoint;
pub mod ids;
pub mod kernel;
pub mod metrics;
pub mod monitor;
pub mod network;
pub mod overlay;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod worker;

pub use ids::{GroupId, PeerId, PipeRef, QueryId};
pub use kernel::{Kernel, VirtualTime};
pub use metrics::MetricsReport;
pub use scenario::Scenario;
pub use sim::Simulation;
pub use trace::{Trace, TraceRecord};
