//! Deterministic discrete-event runtime.
//!
//! A [`Scenario`] fully determines a run: the same scenario yields the same
//! [`MetricsReport`] and the same key bytes. Time is simulated; key
//! generation advances in fixed ticks and workload actions are interleaved
//! in timestamp order, ties going to whichever was queued first.

mod madrid;
mod metrics;
mod network;
mod scenario;
mod sim;

pub use madrid::{madrid_scenario, ALMAGRO_TX_DEVICE, VIRTUAL_LINK_ID};
pub use metrics::{AppMetrics, ClassicalLinkMetrics, LinkMetrics, MetricsReport};
pub use network::{Agents, LogEntry, LogEvent, Network, NetworkConfig};
pub use scenario::{
    load_scenario, Action, ClassicalLink, RelayMode, Scenario, ScenarioError, ScenarioIssue, WorkloadItem,
};
pub use sim::{run, Simulation};
