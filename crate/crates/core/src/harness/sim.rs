use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use super::metrics::MetricsReport;
use super::network::{Network, NetworkConfig};
use super::scenario::{Action, Scenario};
use crate::controlplane::{PathConstraints, VirtualLinkRequest};
use crate::lkms::SessionId;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Tick,
    Workload(usize),
}

/// Ordered by time, then by insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Queued {
    time_us: u64,
    seq: u64,
    kind: EventKind,
}

fn to_us(seconds: f64) -> u64 {
    (seconds * 1e6).round() as u64
}

/// Deterministic single-threaded run of one scenario.
#[derive(Debug, Clone)]
pub struct Simulation {
    scenario: Scenario,
    network: Network,
    queue: BinaryHeap<Reverse<Queued>>,
    next_seq: u64,
    sessions: BTreeMap<String, SessionId>,
    last_tick_us: u64,
    finished: bool,
}

impl Simulation {
    /// Validates the scenario and builds the network at time zero: nodes
    /// registered, physical links active.
    pub fn new(scenario: Scenario) -> Result<Self, Error> {
        scenario.validate()?;
        let mut network = Network::new(NetworkConfig {
            seed: scenario.seed,
            block_bits: scenario.block_bits,
            grid_slots: scenario.grid_slots,
            scheduler: scenario.scheduler,
            rate_profile: scenario.rate_profile,
            watermark_bits: scenario.watermark_bits,
            auth_overhead_bits_per_hop: scenario.auth_overhead_bits_per_hop,
            relay_mode: scenario.relay_mode,
        });
        for node in &scenario.nodes {
            network.add_node(node.clone())?;
        }
        for link in &scenario.links {
            network.create_physical_link(link.clone())?;
        }
        Ok(Self {
            scenario,
            network,
            queue: BinaryHeap::new(),
            next_seq: 0,
            sessions: BTreeMap::new(),
            last_tick_us: 0,
            finished: false,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// Session id behind a workload label.
    pub fn session_id(&self, label: &str) -> Option<&SessionId> {
        self.sessions.get(label)
    }

    fn push(&mut self, time_us: u64, kind: EventKind) {
        self.queue.push(Reverse(Queued {
            time_us,
            seq: self.next_seq,
            kind,
        }));
        self.next_seq += 1;
    }

    /// Executes every event up to the scenario duration and reports.
    pub fn run(&mut self) -> Result<MetricsReport, Error> {
        let duration_us = to_us(self.scenario.duration_s);
        if duration_us == 0 {
            return Ok(MetricsReport::empty(self.scenario.seed));
        }
        if !self.finished {
            let tick_us = to_us(self.scenario.tick_s).max(1);
            for i in 0..self.scenario.workload.len() {
                let at = to_us(self.scenario.workload[i].at_s);
                if at <= duration_us {
                    self.push(at, EventKind::Workload(i));
                }
            }
            // Ticks are queued one at a time, so workload due at the same
            // instant always runs before the tick.
            self.push(tick_us.min(duration_us), EventKind::Tick);
            while let Some(Reverse(ev)) = self.queue.pop() {
                self.network.set_time_us(ev.time_us);
                match ev.kind {
                    EventKind::Tick => {
                        self.network.advance(ev.time_us - self.last_tick_us)?;
                        self.last_tick_us = ev.time_us;
                        if ev.time_us < duration_us {
                            self.push((ev.time_us + tick_us).min(duration_us), EventKind::Tick);
                        }
                    }
                    EventKind::Workload(i) => {
                        let action = self.scenario.workload[i].action.clone();
                        if let Err(e) = self.execute(&action) {
                            self.network.record_error(action.name(), &e);
                        }
                    }
                }
            }
            self.finished = true;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport::collect(
            &self.network,
            self.scenario.seed,
            self.scenario.duration_s,
            &self.scenario.classical_links,
        )
    }

    fn session(&self, label: &str) -> Result<SessionId, Error> {
        self.sessions
            .get(label)
            .cloned()
            .ok_or_else(|| crate::lkms::LkmsError::UnknownSession(label.to_string()).into())
    }

    fn execute(&mut self, action: &Action) -> Result<(), Error> {
        let net = &mut self.network;
        match action {
            Action::ConnectApp { node, app, peer } => net.connect_app(node, app, peer.as_deref()),
            Action::DisconnectApp { node, app } => net.disconnect_app(node, app),
            Action::CreateVirtualLink {
                link_id,
                a,
                b,
                min_available_bits,
            } => net
                .create_virtual_link(VirtualLinkRequest {
                    link_id: link_id.clone(),
                    node_a: a.clone(),
                    node_b: b.clone(),
                    constraints: PathConstraints {
                        min_available_bits: *min_available_bits,
                    },
                })
                .map(drop),
            Action::RelayKey { link_id, bits } => net.relay(link_id, *bits).map(drop),
            Action::OpenSession {
                label,
                initiator,
                responder,
                key_size_bits,
            } => {
                let s = net.open_session(initiator, responder, *key_size_bits)?;
                self.sessions.insert(label.clone(), s.session_id);
                Ok(())
            }
            Action::GetKey {
                session,
                count,
                size_bits,
                fetch_at_peer,
            } => {
                let id = self.session(session)?;
                let s = self.network.key_service().session(&id).cloned().expect("labelled sessions exist");
                let keys = self.network.get_key(&id, &s.initiator_app, *count, *size_bits)?;
                if *fetch_at_peer {
                    let ids: Vec<_> = keys.iter().map(|k| k.key_id.clone()).collect();
                    self.network.fetch_keys(&id, &s.responder_app, &ids)?;
                }
                Ok(())
            }
            Action::CloseSession { session } => {
                let id = self.session(session)?;
                self.network.close_session(&id)
            }
            Action::TeardownLink { link_id } => net.teardown_link(link_id).map(drop),
        }
    }
}

/// Builds and runs a scenario.
pub fn run(scenario: &Scenario) -> Result<MetricsReport, Error> {
    Simulation::new(scenario.clone())?.run()
}
