use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::scenario::ClassicalLink;
use crate::linksim::compute_loss;
use crate::lkms::{KeyCounters, LkmsDirectory};
use crate::model::{LinkId, LinkKind, LinkStatus, NodeId};
use crate::relay::RelayRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub link_id: LinkId,
    pub kind: LinkKind,
    pub status: LinkStatus,
    pub endpoints: (NodeId, NodeId),
    pub loss_db: Option<f64>,
    /// Rate of a dedicated transmitter at this loss.
    pub expected_rate_bps: Option<f64>,
    /// Share of time the transmitter spends on this link.
    pub duty: Option<f64>,
    pub active_time_s: f64,
    /// Bits stored on the link; equal at both ends.
    pub generated_bits: u64,
    /// `generated_bits / active_time_s`.
    pub observed_rate_bps: Option<f64>,
    /// Counters of each endpoint store.
    pub endpoints_counters: BTreeMap<NodeId, KeyCounters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalLinkMetrics {
    pub a: NodeId,
    pub b: NodeId,
    pub loss_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppMetrics {
    pub app_id: String,
    pub node_id: NodeId,
    pub peer_app: Option<String>,
    pub sessions: u64,
    pub keys_delivered: u64,
    pub bits_consumed: u64,
}

/// Outcome of a run. Every list is sorted so reports diff cleanly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub duration_s: f64,
    pub links: Vec<LinkMetrics>,
    pub classical_links: Vec<ClassicalLinkMetrics>,
    pub relays: Vec<RelayRecord>,
    pub applications: Vec<AppMetrics>,
    pub events: BTreeMap<String, u64>,
}

impl MetricsReport {
    /// Report of a run that did not advance the clock.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn link(&self, link_id: &str) -> Option<&LinkMetrics> {
        self.links.iter().find(|l| l.link_id == link_id)
    }

    pub fn collect(net: &Network, seed: u64, duration_s: f64, classical: &[ClassicalLink]) -> Self {
        let links = net
            .links()
            .map(|link| {
                let mut endpoints_counters = BTreeMap::new();
                for node in [&link.endpoints.0, &link.endpoints.1] {
                    if let Some(c) = net
                        .agents()
                        .lkms(node)
                        .and_then(|l| l.store().counters(&link.link_id).ok())
                    {
                        endpoints_counters.insert(node.clone(), c);
                    }
                }
                let generated_bits = endpoints_counters
                    .values()
                    .map(|c| c.generated_bits)
                    .max()
                    .unwrap_or(0);
                let active_time_s = net.active_time_s(&link.link_id);
                LinkMetrics {
                    link_id: link.link_id.clone(),
                    kind: link.kind,
                    status: link.status,
                    endpoints: link.endpoints.clone(),
                    loss_db: link.effective_loss_db(),
                    expected_rate_bps: link.expected_rate_bps(),
                    duty: net.duty(&link.link_id),
                    active_time_s,
                    generated_bits,
                    observed_rate_bps: (active_time_s > 0.0).then(|| generated_bits as f64 / active_time_s),
                    endpoints_counters,
                }
            })
            .collect();

        let classical_links = classical
            .iter()
            .map(|c| ClassicalLinkMetrics {
                a: c.a.clone(),
                b: c.b.clone(),
                loss_db: compute_loss(&c.fiber),
            })
            .collect();

        let applications = net
            .controller()
            .applications()
            .into_iter()
            .map(|a| AppMetrics {
                app_id: a.application.app_id,
                node_id: a.application.host_node,
                peer_app: a.application.peer_app,
                sessions: a.application.sessions.len() as u64,
                keys_delivered: a.usage.keys_delivered,
                bits_consumed: a.usage.bits_consumed,
            })
            .collect();

        let mut events = BTreeMap::new();
        for e in net.log() {
            *events.entry(e.event.name().to_string()).or_insert(0) += 1;
        }

        Self {
            seed,
            duration_s,
            links,
            classical_links,
            relays: net.relay_outcomes().iter().map(|o| o.record.clone()).collect(),
            applications,
            events,
        }
    }
}
