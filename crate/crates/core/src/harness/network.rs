use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scenario::RelayMode;
use crate::agent::{AgentState, DEFAULT_WATERMARK_BITS};
use super::metrics::MetricsReport;
use crate::controlplane::{
    AppInventory, Controller, ControllerConfig, ControllerState, Directive, DirectiveKind, NorthboundHost,
    NotificationBus, PhysicalLinkRequest, VirtualLinkRequest, DEFAULT_GRID_SLOTS,
};
use crate::linksim::{schedule_transmitter, LinkGenerator, DEFAULT_BLOCK_BITS};
use crate::lkms::{AppEndpoint, DeliveredKey, KeyId, KeyService, KeySession, Lkms, LkmsDirectory, Qos, SessionId};
use crate::model::{Link, LinkId, LinkKind, LinkStatus, NodeDescriptor, NodeId};
use crate::relay::{relay_key, RelayError, RelayKeySource, RelayOutcome};
use crate::{Error, RateProfile, SchedulerConfig};

const CONTROLLER: &str = "controller";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub seed: u64,
    pub block_bits: u32,
    pub grid_slots: u32,
    pub scheduler: SchedulerConfig,
    pub rate_profile: RateProfile,
    pub watermark_bits: u64,
    pub auth_overhead_bits_per_hop: u64,
    pub relay_mode: RelayMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            block_bits: DEFAULT_BLOCK_BITS,
            grid_slots: DEFAULT_GRID_SLOTS,
            scheduler: SchedulerConfig::default(),
            rate_profile: RateProfile::default(),
            watermark_bits: DEFAULT_WATERMARK_BITS,
            auth_overhead_bits_per_hop: 0,
            relay_mode: RelayMode::OnDemand,
        }
    }
}

/// The node agents of a network, addressable as an LKMS directory.
#[derive(Debug, Clone, Default)]
pub struct Agents(BTreeMap<NodeId, AgentState>);

impl Agents {
    pub fn get(&self, node_id: &str) -> Option<&AgentState> {
        self.0.get(node_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &AgentState)> {
        self.0.iter()
    }

    fn get_mut(&mut self, node_id: &str) -> Option<&mut AgentState> {
        self.0.get_mut(node_id)
    }

    fn available_bits(&self, node_id: &str, link_id: &str) -> u64 {
        self.0
            .get(node_id)
            .and_then(|a| a.lkms().available_bits(link_id).ok())
            .unwrap_or(0)
    }
}

impl LkmsDirectory for Agents {
    fn lkms(&self, node_id: &str) -> Option<&Lkms> {
        self.0.get(node_id).map(AgentState::lkms)
    }

    fn lkms_mut(&mut self, node_id: &str) -> Option<&mut Lkms> {
        self.0.get_mut(node_id).map(AgentState::lkms_mut)
    }
}

/// One entry of the network event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Directive {
        directive_id: String,
        target_node: NodeId,
        kind: DirectiveKind,
    },
    Response {
        directive_id: String,
        node_id: NodeId,
        ack: bool,
    },
    Notification {
        emitter: NodeId,
        topic: String,
        seq: u64,
    },
    /// Blocks distilled on a physical link and stored at both ends.
    Ingest {
        link_id: LinkId,
        blocks: u64,
        bits: u64,
    },
    Relay {
        link_id: LinkId,
        bits: u64,
        per_hop_consumed_bits: BTreeMap<LinkId, u64>,
    },
    SessionOpened {
        session_id: SessionId,
        link_id: LinkId,
    },
    KeysDelivered {
        session_id: SessionId,
        node_id: NodeId,
        app_id: String,
        keys: u64,
        bits: u64,
    },
    SessionClosed {
        session_id: SessionId,
    },
    Error {
        context: String,
        code: String,
        message: String,
    },
}

impl LogEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LogEvent::Directive { .. } => "directive",
            LogEvent::Response { .. } => "response",
            LogEvent::Notification { .. } => "notification",
            LogEvent::Ingest { .. } => "ingest",
            LogEvent::Relay { .. } => "relay",
            LogEvent::SessionOpened { .. } => "session_opened",
            LogEvent::KeysDelivered { .. } => "keys_delivered",
            LogEvent::SessionClosed { .. } => "session_closed",
            LogEvent::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time_us: u64,
    #[serde(flatten)]
    pub event: LogEvent,
}

/// Controller, agents and simulated quantum channels of one network.
///
/// All message passing is synchronous: every public mutation runs the
/// control plane to quiescence before returning.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    controller: Controller,
    agents: Agents,
    bus: NotificationBus,
    keys: KeyService,
    generators: BTreeMap<LinkId, LinkGenerator>,
    duties: BTreeMap<LinkId, f64>,
    active_us: BTreeMap<LinkId, u64>,
    relay_source: RelayKeySource,
    relays: Vec<RelayOutcome>,
    log: Vec<LogEntry>,
    now_us: u64,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Self {
        let controller = Controller::new(ControllerConfig {
            grid_slots: config.grid_slots,
            block_bits: config.block_bits,
            rate_profile: config.rate_profile,
        });
        let mut bus = NotificationBus::new();
        bus.subscribe(CONTROLLER, "qkd.app.*");
        bus.subscribe(CONTROLLER, "qkd.link.*");
        let relay_source = RelayKeySource::new(config.seed);
        Self {
            config,
            controller,
            agents: Agents::default(),
            bus,
            keys: KeyService::new(),
            generators: BTreeMap::new(),
            duties: BTreeMap::new(),
            active_us: BTreeMap::new(),
            relay_source,
            relays: Vec::new(),
            log: Vec::new(),
            now_us: 0,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn agents(&self) -> &Agents {
        &self.agents
    }

    pub fn agent(&self, node_id: &str) -> Option<&AgentState> {
        self.agents.get(node_id)
    }

    pub fn key_service(&self) -> &KeyService {
        &self.keys
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn relay_outcomes(&self) -> &[RelayOutcome] {
        &self.relays
    }

    pub fn duty(&self, link_id: &str) -> Option<f64> {
        self.duties.get(link_id).copied()
    }

    /// Time a link has spent active, in seconds.
    pub fn active_time_s(&self, link_id: &str) -> f64 {
        self.active_us.get(link_id).copied().unwrap_or(0) as f64 / 1e6
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn now_s(&self) -> f64 {
        self.now_us as f64 / 1e6
    }

    pub fn set_time_us(&mut self, now_us: u64) {
        self.now_us = now_us;
        self.controller.set_time(self.now_s());
    }

    pub fn state(&self) -> ControllerState {
        self.controller.state()
    }

    fn record(&mut self, event: LogEvent) {
        self.log.push(LogEntry {
            time_us: self.now_us,
            event,
        });
    }

    /// Logs a failure that was absorbed rather than propagated.
    pub fn record_error(&mut self, context: &str, err: &Error) {
        self.record(LogEvent::Error {
            context: context.to_string(),
            code: err.code().to_string(),
            message: err.to_string(),
        });
    }

    /// Delivers directives, responses and notifications until nothing is in
    /// flight.
    pub fn settle(&mut self) {
        loop {
            let mut moved = false;
            for d in self.controller.drain_outbox() {
                moved = true;
                self.deliver(d);
            }
            let nodes: Vec<NodeId> = self.agents.0.keys().cloned().collect();
            for node in &nodes {
                let agent = self.agents.get_mut(node).expect("listed above");
                let responses = agent.process_pending();
                let notes = agent.drain_notifications();
                for r in responses {
                    moved = true;
                    self.record(LogEvent::Response {
                        directive_id: r.directive_id.clone(),
                        node_id: r.node_id.clone(),
                        ack: r.is_ack(),
                    });
                    self.controller.handle_response(&r);
                }
                for n in notes {
                    moved = true;
                    self.record(LogEvent::Notification {
                        emitter: n.emitter.clone(),
                        topic: n.topic.clone(),
                        seq: n.seq,
                    });
                    self.bus.publish(n);
                }
            }
            while let Some(n) = self.bus.poll(CONTROLLER) {
                moved = true;
                if let Err(e) = self.controller.handle_notification(&n) {
                    self.record_error(&format!("notification {} from {}", n.topic, n.emitter), &e.into());
                }
            }
            if !moved {
                break;
            }
        }
        // Alerts only matter to the provisioning loop, which polls stores
        // directly.
        self.controller.take_alerts();
    }

    fn deliver(&mut self, d: Directive) {
        self.record(LogEvent::Directive {
            directive_id: d.directive_id.clone(),
            target_node: d.target_node.clone(),
            kind: d.kind,
        });
        match self.agents.get_mut(&d.target_node) {
            Some(agent) => agent.enqueue(d),
            // the controller only targets registered nodes, which all have agents
            None => unreachable!("directive for node without agent"),
        }
    }

    pub fn add_node(&mut self, descriptor: NodeDescriptor) -> Result<(), Error> {
        self.controller.register_node(descriptor.clone())?;
        let agent = AgentState::with_watermark(descriptor.clone(), self.config.watermark_bits);
        self.agents.0.insert(descriptor.node_id, agent);
        Ok(())
    }

    pub fn create_physical_link(&mut self, req: PhysicalLinkRequest) -> Result<Link, Error> {
        let link = self.controller.create_physical_link(req)?;
        self.settle();
        self.reschedule()?;
        Ok(self.controller.topology().link(&link.link_id).cloned().unwrap_or(link))
    }

    /// True when the controller and both endpoint agents consider the link
    /// active.
    fn generating(&self, link: &Link) -> bool {
        link.is_physical()
            && link.is_active()
            && [&link.endpoints.0, &link.endpoints.1].iter().all(|n| {
                self.agents
                    .get(n)
                    .and_then(|a| a.endpoint(&link.link_id))
                    .is_some_and(|ep| ep.active)
            })
    }

    /// Recomputes transmitter time sharing and the set of generators.
    fn reschedule(&mut self) -> Result<(), Error> {
        let mut groups: BTreeMap<(NodeId, String), Vec<LinkId>> = BTreeMap::new();
        let live: Vec<Link> = self
            .controller
            .topology()
            .physical_links()
            .filter(|l| self.generating(l))
            .cloned()
            .collect();
        for link in &live {
            let tx = &link.endpoints.0;
            let agent = self.agents.get(tx).expect("generating links have agents");
            let iface_id = agent
                .endpoint(&link.link_id)
                .and_then(|ep| ep.iface_id.clone())
                .unwrap_or_default();
            let device = agent
                .node()
                .interface(&iface_id)
                .and_then(|i| i.device_id.clone())
                .unwrap_or(iface_id);
            groups.entry((tx.clone(), device)).or_default().push(link.link_id.clone());
        }
        let mut duties = BTreeMap::new();
        for ((tx, _), links) in &groups {
            duties.extend(schedule_transmitter(tx, links, &self.config.scheduler)?);
        }
        self.duties = duties;
        self.generators.retain(|id, _| self.duties.contains_key(id));
        for link in &live {
            if !self.generators.contains_key(&link.link_id) {
                let generator = LinkGenerator::new(link, self.config.seed, self.config.block_bits)?;
                self.generators.insert(link.link_id.clone(), generator);
            }
        }
        Ok(())
    }

    /// Runs the quantum channels for `dt_us` ending at the current time,
    /// then lets the control plane react.
    pub fn advance(&mut self, dt_us: u64) -> Result<(), Error> {
        let dt_s = dt_us as f64 / 1e6;
        let now_s = self.now_s();
        let ids: Vec<LinkId> = self.generators.keys().cloned().collect();
        for link_id in ids {
            let duty = self.duties[&link_id];
            let blocks = self
                .generators
                .get_mut(&link_id)
                .expect("listed above")
                .generate(duty, dt_s, now_s)?;
            *self.active_us.entry(link_id.clone()).or_default() += dt_us;
            if blocks.is_empty() {
                continue;
            }
            let (a, b) = self.controller.topology().links[&link_id].endpoints.clone();
            let count = blocks.len() as u64;
            let bits = blocks.iter().map(|b| b.bits()).sum();
            self.agents.get_mut(&a).expect("endpoint agent").ingest(&link_id, blocks.clone())?;
            self.agents.get_mut(&b).expect("endpoint agent").ingest(&link_id, blocks)?;
            self.record(LogEvent::Ingest {
                link_id,
                blocks: count,
                bits,
            });
        }
        let virtual_active: Vec<LinkId> = self
            .controller
            .topology()
            .virtual_links()
            .filter(|l| l.is_active())
            .map(|l| l.link_id.clone())
            .collect();
        for id in virtual_active {
            *self.active_us.entry(id).or_default() += dt_us;
        }
        if let RelayMode::PreProvision { target_bits } = self.config.relay_mode {
            self.provision(target_bits);
        }
        self.after_key_change();
        Ok(())
    }

    /// Watermark checks, counter reports and control-plane delivery.
    fn after_key_change(&mut self) {
        let nodes: Vec<NodeId> = self.agents.0.keys().cloned().collect();
        for node in &nodes {
            let agent = self.agents.get_mut(node).expect("listed above");
            agent.check_watermarks();
            let report = agent.report_status();
            for l in report.links {
                self.controller.observe_counters(node, &l.link_id, l.counters);
            }
        }
        self.settle();
    }

    fn provision(&mut self, target_bits: u64) {
        let block = self.config.block_bits as u64;
        let vlinks: Vec<(LinkId, NodeId, NodeId)> = self
            .controller
            .topology()
            .virtual_links()
            .filter(|l| l.is_active())
            .map(|l| (l.link_id.clone(), l.endpoints.0.clone(), l.endpoints.1.clone()))
            .collect();
        for (id, a, b) in vlinks {
            let have = self.agents.available_bits(&a, &id).min(self.agents.available_bits(&b, &id));
            if have >= target_bits {
                continue;
            }
            let want = (target_bits - have).div_ceil(block) * block;
            // Fall back to a single block when the hops cannot cover it all.
            for bits in [want, block] {
                match self.relay(&id, bits) {
                    Ok(_) => break,
                    Err(Error::Relay(RelayError::Depletion { .. })) => continue,
                    Err(e) => {
                        self.record_error(&format!("provision {id}"), &e);
                        break;
                    }
                }
            }
        }
    }

    pub fn connect_app(&mut self, node_id: &str, app_id: &str, peer_hint: Option<&str>) -> Result<(), Error> {
        let agent = self
            .agents
            .get_mut(node_id)
            .ok_or_else(|| crate::controlplane::ControlError::UnknownNode(node_id.to_string()))?;
        agent.connect_app(app_id, peer_hint)?;
        self.settle();
        Ok(())
    }

    pub fn disconnect_app(&mut self, node_id: &str, app_id: &str) -> Result<(), Error> {
        let agent = self
            .agents
            .get_mut(node_id)
            .ok_or_else(|| crate::controlplane::ControlError::UnknownNode(node_id.to_string()))?;
        agent.disconnect_app(app_id)?;
        self.settle();
        Ok(())
    }

    /// Bits usable on a link right now: the smaller of its two stores.
    pub fn available_bits(&self, link_id: &str) -> u64 {
        match self.controller.topology().link(link_id) {
            Some(l) => self
                .agents
                .available_bits(&l.endpoints.0, link_id)
                .min(self.agents.available_bits(&l.endpoints.1, link_id)),
            None => 0,
        }
    }

    pub fn create_virtual_link(&mut self, req: VirtualLinkRequest) -> Result<Link, Error> {
        let agents = &self.agents;
        let topology = self.controller.topology().clone();
        let available = |link_id: &str| match topology.link(link_id) {
            Some(l) => agents
                .available_bits(&l.endpoints.0, link_id)
                .min(agents.available_bits(&l.endpoints.1, link_id)),
            None => 0,
        };
        let link = self.controller.create_virtual_link(req, available)?;
        self.settle();
        Ok(self.controller.topology().link(&link.link_id).cloned().unwrap_or(link))
    }

    /// Relays `bits` of fresh key over a virtual link.
    pub fn relay(&mut self, link_id: &str, bits: u64) -> Result<RelayOutcome, Error> {
        let outcome = relay_key(
            &mut self.agents,
            self.controller.topology(),
            link_id,
            bits,
            self.config.auth_overhead_bits_per_hop,
            &mut self.relay_source,
        )?;
        self.record(LogEvent::Relay {
            link_id: link_id.to_string(),
            bits,
            per_hop_consumed_bits: outcome.record.per_hop_consumed_bits.clone(),
        });
        self.relays.push(outcome.clone());
        self.after_key_change();
        Ok(outcome)
    }

    pub fn open_session(&mut self, initiator: &AppEndpoint, responder: &AppEndpoint, key_size_bits: u64) -> Result<KeySession, Error> {
        let qos = Qos {
            key_size_bits,
            ..Qos::default()
        };
        let session = self.keys.open_session(
            &mut self.agents,
            &self.controller,
            self.controller.topology(),
            initiator,
            responder,
            qos,
        )?;
        self.controller
            .record_session(&initiator.node_id, &initiator.app_id, &session.session_id)?;
        self.controller
            .record_session(&responder.node_id, &responder.app_id, &session.session_id)?;
        self.record(LogEvent::SessionOpened {
            session_id: session.session_id.clone(),
            link_id: session.serving_link.clone(),
        });
        Ok(session)
    }

    fn session(&self, session_id: &str) -> Result<KeySession, Error> {
        self.keys
            .session(session_id)
            .cloned()
            .ok_or_else(|| crate::lkms::LkmsError::UnknownSession(session_id.to_string()).into())
    }

    /// Initiator key request. Sessions served by a virtual link relay the
    /// missing material first when running on demand.
    pub fn get_key(&mut self, session_id: &str, caller_app: &str, count: u64, size_bits: u64) -> Result<Vec<DeliveredKey>, Error> {
        let s = self.session(session_id)?;
        let is_virtual = self
            .controller
            .topology()
            .link(&s.serving_link)
            .is_some_and(|l| l.kind == LinkKind::Virtual);
        let needed = self.keys.bits_needed(&self.agents, session_id, count, size_bits)?;
        if is_virtual && self.config.relay_mode == RelayMode::OnDemand && caller_app == s.initiator_app {
            let have = self.keys.session_available_bits(&self.agents, session_id)?;
            if needed > have {
                let block = self.config.block_bits as u64;
                self.relay(&s.serving_link, (needed - have).div_ceil(block) * block)?;
            }
        }
        let keys = self.keys.get_key(&mut self.agents, session_id, caller_app, count, size_bits)?;
        self.controller
            .record_key_usage(&s.initiator_node, caller_app, keys.len() as u64, needed)?;
        self.record(LogEvent::KeysDelivered {
            session_id: session_id.to_string(),
            node_id: s.initiator_node.clone(),
            app_id: caller_app.to_string(),
            keys: keys.len() as u64,
            bits: needed,
        });
        self.after_key_change();
        Ok(keys)
    }

    /// Responder key request by id.
    pub fn fetch_keys(&mut self, session_id: &str, caller_app: &str, key_ids: &[KeyId]) -> Result<Vec<DeliveredKey>, Error> {
        let s = self.session(session_id)?;
        let keys = self.keys.get_key_with_ids(&mut self.agents, session_id, caller_app, key_ids)?;
        let block = self
            .agents
            .lkms(&s.responder_node)
            .and_then(|l| l.store().link(&s.serving_link).ok())
            .map(|k| k.block_bits() as u64)
            .unwrap_or(self.config.block_bits as u64);
        let bits = keys.iter().map(|k| (k.bytes.len() as u64 * 8).div_ceil(block) * block).sum();
        self.controller
            .record_key_usage(&s.responder_node, caller_app, keys.len() as u64, bits)?;
        self.record(LogEvent::KeysDelivered {
            session_id: session_id.to_string(),
            node_id: s.responder_node.clone(),
            app_id: caller_app.to_string(),
            keys: keys.len() as u64,
            bits,
        });
        self.after_key_change();
        Ok(keys)
    }

    pub fn pending_key_ids(&self, session_id: &str) -> Vec<KeyId> {
        self.keys
            .session(session_id)
            .and_then(|s| self.agents.lkms(&s.responder_node))
            .map(|l| l.pending_key_ids(session_id))
            .unwrap_or_default()
    }

    pub fn close_session(&mut self, session_id: &str) -> Result<(), Error> {
        self.keys.close_session(&mut self.agents, session_id)?;
        self.record(LogEvent::SessionClosed {
            session_id: session_id.to_string(),
        });
        self.after_key_change();
        Ok(())
    }

    /// Controller-decided teardown; the agents drop the link's key material.
    pub fn teardown_link(&mut self, link_id: &str) -> Result<Vec<LinkId>, Error> {
        let removed = self.controller.teardown_link(link_id)?;
        self.settle();
        self.reschedule()?;
        Ok(removed)
    }

    pub fn set_profile(&mut self, link_id: &str, profile: RateProfile) -> Result<f64, Error> {
        let rate = self.controller.set_profile(link_id, profile)?;
        self.settle();
        if let Some(generator) = self.generators.get_mut(link_id) {
            let loss = self.controller.topology().links[link_id]
                .effective_loss_db()
                .expect("physical link");
            generator.set_profile(loss, &profile)?;
        }
        Ok(rate)
    }

    /// Links known to the controller, any status.
    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.controller.topology().links.values()
    }

    pub fn link_status(&self, link_id: &str) -> Option<LinkStatus> {
        self.controller.topology().link(link_id).map(|l| l.status)
    }
}

/// Serves the northbound API with live agents behind the controller.
impl NorthboundHost for Network {
    fn register_node(&mut self, descriptor: NodeDescriptor) -> Result<(), Error> {
        self.add_node(descriptor)
    }

    fn create_physical_link(&mut self, req: PhysicalLinkRequest) -> Result<Link, Error> {
        Network::create_physical_link(self, req)
    }

    fn create_virtual_link(&mut self, req: VirtualLinkRequest) -> Result<Link, Error> {
        Network::create_virtual_link(self, req)
    }

    fn controller_state(&self) -> ControllerState {
        self.state()
    }

    fn applications(&self) -> Vec<AppInventory> {
        self.controller.applications()
    }

    fn metrics(&self) -> serde_json::Value {
        crate::document::to_value(&MetricsReport::collect(self, self.config.seed, self.now_s(), &[]))
    }
}
