//! The SDN controller.
//!
//! The controller is the single writer of the [`Topology`]. It validates
//! requests, plans spectrum and relay routes, and pushes [`Directive`]s to
//! the node agents; links become active only once every endpoint agent has
//! acknowledged. Agents report back through directive responses and
//! notifications.

pub mod api;
pub mod bus;
pub mod messages;
pub mod path;
pub mod spectrum;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use api::{route, ApiResponse, NorthboundHost};
pub use bus::{NotificationBus, SeqTracker, TopicPattern};
pub use messages::{
    Directive, DirectiveKind, DirectiveResponse, EndpointPayload, LinkRef, Notification, NotificationKind, Outcome,
    ProfilePayload, RelayPayload,
};
pub use path::{compute_path, PathConstraints};
pub use spectrum::{assign_spectrum, SlotAssignment, SpectrumMap, DEFAULT_GRID_SLOTS};

use crate::linksim::{LinkSimError, DEFAULT_BLOCK_BITS};
use crate::lkms::{ApplicationDirectory, KeyCounters};
use crate::model::{
    validate_topology, AppId, ApplicationRecord, FiberSpec, InterfaceRole, InterfaceStatus, Link, LinkId, LinkKind,
    LinkStatus, ModelError, NodeDescriptor, NodeId, Topology,
};
use crate::relay::{establish_virtual_link, RelayError};
use crate::RateProfile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("node `{0}` already registered")]
    DuplicateNode(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown interface `{iface_id}` on `{node_id}`")]
    UnknownInterface { node_id: NodeId, iface_id: String },
    #[error("role mismatch: both interfaces are {0:?}")]
    RoleMismatch(InterfaceRole),
    #[error("interface `{iface_id}` on `{node_id}` is busy")]
    InterfaceBusy { node_id: NodeId, iface_id: String },
    #[error("link infeasible: loss {loss_db:.3} dB exceeds {max_loss_db} dB")]
    Infeasible { loss_db: f64, max_loss_db: f64 },
    #[error("grid overflow: {needed} slots needed, grid has {grid_slots}")]
    GridOverflow { needed: u32, grid_slots: u32 },
    #[error("no relay route between `{0}` and `{1}`")]
    NoRelayRoute(NodeId, NodeId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("link `{0}` already exists")]
    DuplicateLink(LinkId),
    #[error("application `{app_id}` already registered at `{node_id}`")]
    DuplicateApplication { app_id: AppId, node_id: NodeId },
    #[error("unknown application `{app_id}` at `{node_id}`")]
    UnknownApplication { app_id: AppId, node_id: NodeId },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Relay(#[from] RelayError),
    #[error(transparent)]
    LinkSim(#[from] LinkSimError),
}

impl ControlError {
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::DuplicateNode(_) => "duplicate_node",
            ControlError::UnknownNode(_) => "unknown_node",
            ControlError::UnknownInterface { .. } => "unknown_interface",
            ControlError::RoleMismatch(_) => "role_mismatch",
            ControlError::InterfaceBusy { .. } => "interface_busy",
            ControlError::Infeasible { .. } => "link_infeasible",
            ControlError::GridOverflow { .. } => "grid_overflow",
            ControlError::NoRelayRoute(..) => "no_relay_route",
            ControlError::UnknownLink(_) => "unknown_link",
            ControlError::DuplicateLink(_) => "duplicate_link",
            ControlError::DuplicateApplication { .. } => "duplicate_application",
            ControlError::UnknownApplication { .. } => "unknown_application",
            ControlError::InvalidRequest(_) => "invalid_request",
            ControlError::Model(e) => e.code(),
            ControlError::Relay(e) => e.code(),
            ControlError::LinkSim(e) => e.code(),
        }
    }
}

/// An interface on a node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfaceRef {
    pub node_id: NodeId,
    pub iface_id: String,
}

impl IfaceRef {
    pub fn new(node_id: impl Into<String>, iface_id: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            iface_id: iface_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalLinkRequest {
    /// Defaults to `<transmitter node>-<receiver node>`.
    #[serde(default)]
    pub link_id: Option<LinkId>,
    pub a: IfaceRef,
    pub b: IfaceRef,
    pub fiber: FiberSpec,
    #[serde(default)]
    pub n_classical: u32,
    /// Classical channel the pilot follows; midpoint when absent.
    #[serde(default)]
    pub pilot_after_channel: Option<u32>,
    /// Controller default when absent.
    #[serde(default)]
    pub rate_profile: Option<RateProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualLinkRequest {
    /// Defaults to `vl-<node_a>-<node_b>`.
    #[serde(default)]
    pub link_id: Option<LinkId>,
    pub node_a: NodeId,
    pub node_b: NodeId,
    #[serde(default)]
    pub constraints: PathConstraints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(default = "default_grid")]
    pub grid_slots: u32,
    #[serde(default = "default_block")]
    pub block_bits: u32,
    #[serde(default)]
    pub rate_profile: RateProfile,
}

fn default_grid() -> u32 {
    DEFAULT_GRID_SLOTS
}

fn default_block() -> u32 {
    DEFAULT_BLOCK_BITS
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            grid_slots: DEFAULT_GRID_SLOTS,
            block_bits: DEFAULT_BLOCK_BITS,
            rate_profile: RateProfile::default(),
        }
    }
}

/// Key usage of one application, for accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppUsage {
    pub keys_delivered: u64,
    pub bits_consumed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppInventory {
    pub application: ApplicationRecord,
    pub usage: AppUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkInventory {
    pub link: Link,
    pub loss_db: Option<f64>,
    pub expected_rate_bps: Option<f64>,
    /// Generated bits over time since activation, as last reported.
    pub observed_rate_bps: Option<f64>,
    pub activated_at: Option<f64>,
    /// Last counters reported by each endpoint.
    pub counters: BTreeMap<NodeId, KeyCounters>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

/// Snapshot of the controller's central database.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub nodes: Vec<NodeDescriptor>,
    pub links: Vec<LinkInventory>,
    pub applications: Vec<AppInventory>,
}

/// Request from an agent that needs controller action beyond bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkAlert {
    pub node_id: NodeId,
    pub link_id: LinkId,
    pub available_bits: u64,
}

#[derive(Debug, Clone, Default)]
struct LinkMeta {
    awaiting: BTreeSet<NodeId>,
    activated_at: Option<f64>,
    counters: BTreeMap<NodeId, KeyCounters>,
    last_error: Option<String>,
}

#[derive(Debug, Clone)]
struct PendingDirective {
    kind: DirectiveKind,
    link_id: LinkId,
}

#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    topology: Topology,
    apps: BTreeMap<(NodeId, AppId), AppInventory>,
    meta: BTreeMap<LinkId, LinkMeta>,
    pending: BTreeMap<String, PendingDirective>,
    completed: BTreeMap<String, Outcome>,
    outbox: VecDeque<Directive>,
    next_directive: u64,
    seq: SeqTracker,
    alerts: VecDeque<WatermarkAlert>,
    now_s: f64,
}

impl Default for Controller {
    fn default() -> Self {
        Self::new(ControllerConfig::default())
    }
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Self {
            config,
            topology: Topology::new(),
            apps: BTreeMap::new(),
            meta: BTreeMap::new(),
            pending: BTreeMap::new(),
            completed: BTreeMap::new(),
            outbox: VecDeque::new(),
            next_directive: 0,
            seq: SeqTracker::default(),
            alerts: VecDeque::new(),
            now_s: 0.0,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_time(&mut self, now_s: f64) {
        self.now_s = now_s;
    }

    pub fn now_s(&self) -> f64 {
        self.now_s
    }

    /// Directives waiting for delivery, oldest first.
    pub fn drain_outbox(&mut self) -> Vec<Directive> {
        self.outbox.drain(..).collect()
    }

    /// Directives sent and not answered yet.
    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn outcome(&self, directive_id: &str) -> Option<&Outcome> {
        self.completed.get(directive_id)
    }

    pub fn take_alerts(&mut self) -> Vec<WatermarkAlert> {
        self.alerts.drain(..).collect()
    }

    pub fn register_node(&mut self, descriptor: NodeDescriptor) -> Result<(), ControlError> {
        if self.topology.nodes.contains_key(&descriptor.node_id) {
            return Err(ControlError::DuplicateNode(descriptor.node_id));
        }
        let mut candidate = self.topology.clone();
        candidate.insert_node(descriptor.clone());
        let before = validate_topology(&self.topology).len();
        let violations = validate_topology(&candidate);
        if violations.len() > before {
            let ours = violations
                .into_iter()
                .filter(|v| v.subject == descriptor.node_id)
                .collect::<Vec<_>>();
            return Err(ModelError::Invalid(ours).into());
        }
        self.topology = candidate;
        Ok(())
    }

    fn interface(&self, r: &IfaceRef) -> Result<&crate::model::QkdInterface, ControlError> {
        let node = self
            .topology
            .node(&r.node_id)
            .ok_or_else(|| ControlError::UnknownNode(r.node_id.clone()))?;
        node.interface(&r.iface_id)
            .ok_or_else(|| ControlError::UnknownInterface {
                node_id: r.node_id.clone(),
                iface_id: r.iface_id.clone(),
            })
    }

    fn fresh_link_id(&self, requested: Option<&LinkId>, base: String) -> Result<LinkId, ControlError> {
        if let Some(id) = requested {
            if self.topology.links.contains_key(id) {
                return Err(ControlError::DuplicateLink(id.clone()));
            }
            return Ok(id.clone());
        }
        if !self.topology.links.contains_key(&base) {
            return Ok(base);
        }
        let n = (2..).find(|n| !self.topology.links.contains_key(&format!("{base}-{n}"))).expect("unbounded");
        Ok(format!("{base}-{n}"))
    }

    fn send(&mut self, target: &str, kind: DirectiveKind, link_id: &str, payload: serde_json::Value) -> String {
        self.next_directive += 1;
        let directive_id = format!("d{}", self.next_directive);
        self.pending.insert(
            directive_id.clone(),
            PendingDirective {
                kind,
                link_id: link_id.to_string(),
            },
        );
        self.outbox.push_back(Directive {
            directive_id: directive_id.clone(),
            target_node: target.to_string(),
            kind,
            payload,
        });
        directive_id
    }

    /// Plans a quantum link between a transmitter and a receiver interface.
    /// The link stays planned until both agents acknowledge their endpoint.
    pub fn create_physical_link(&mut self, req: PhysicalLinkRequest) -> Result<Link, ControlError> {
        let ia = self.interface(&req.a)?.clone();
        let ib = self.interface(&req.b)?.clone();
        if req.a.node_id == req.b.node_id {
            return Err(ControlError::InvalidRequest("both interfaces are on the same node".into()));
        }
        if ia.role == ib.role {
            return Err(ControlError::RoleMismatch(ia.role));
        }
        for (r, i) in [(&req.a, &ia), (&req.b, &ib)] {
            if !i.is_free() {
                return Err(ControlError::InterfaceBusy {
                    node_id: r.node_id.clone(),
                    iface_id: r.iface_id.clone(),
                });
            }
        }
        let (tx, rx) = if ia.role == InterfaceRole::Transmitter {
            (&req.a, &req.b)
        } else {
            (&req.b, &req.a)
        };
        if !req.fiber.is_valid() {
            return Err(ControlError::InvalidRequest("fiber values must be >= 0".into()));
        }
        let profile = req.rate_profile.unwrap_or(self.config.rate_profile);
        profile.validate()?;
        let spectrum = assign_spectrum(req.n_classical, self.config.grid_slots, req.pilot_after_channel)?;

        let link_id = self.fresh_link_id(req.link_id.as_ref(), format!("{}-{}", tx.node_id, rx.node_id))?;
        let mut link = Link::physical(&link_id, &tx.node_id, &rx.node_id, req.fiber.clone(), profile);
        link.spectrum = Some(spectrum);
        let loss_db = link.effective_loss_db().expect("physical link has fiber");
        if loss_db > profile.max_loss_db {
            return Err(ControlError::Infeasible {
                loss_db,
                max_loss_db: profile.max_loss_db,
            });
        }
        let rate = link.expected_rate_bps().unwrap_or(0.0);

        self.topology.insert_link(link.clone());
        for r in [tx, rx] {
            let iface = self
                .topology
                .nodes
                .get_mut(&r.node_id)
                .and_then(|n| n.interface_mut(&r.iface_id))
                .expect("checked above");
            iface.attached_link = Some(link_id.clone());
        }
        self.meta.insert(
            link_id.clone(),
            LinkMeta {
                awaiting: [tx.node_id.clone(), rx.node_id.clone()].into(),
                ..LinkMeta::default()
            },
        );
        for (me, peer, role) in [
            (tx, rx, InterfaceRole::Transmitter),
            (rx, tx, InterfaceRole::Receiver),
        ] {
            let payload = EndpointPayload {
                link_id: link_id.clone(),
                iface_id: me.iface_id.clone(),
                role,
                peer_node: peer.node_id.clone(),
                block_bits: self.config.block_bits,
                expected_rate_bps: rate,
            };
            self.send(
                &me.node_id,
                DirectiveKind::CreateLinkEndpoint,
                &link_id,
                crate::document::to_value(&payload),
            );
        }
        Ok(link)
    }

    /// Routes a virtual link through trusted nodes and asks both endpoints
    /// to open a key store for it. `available_bits` reports the current key
    /// material of each physical link.
    pub fn create_virtual_link<F>(&mut self, req: VirtualLinkRequest, available_bits: F) -> Result<Link, ControlError>
    where
        F: Fn(&str) -> u64,
    {
        let path = compute_path(&self.topology, &req.node_a, &req.node_b, &req.constraints, available_bits)?
            .ok_or_else(|| ControlError::NoRelayRoute(req.node_a.clone(), req.node_b.clone()))?;
        let link_id = self.fresh_link_id(req.link_id.as_ref(), format!("vl-{}-{}", req.node_a, req.node_b))?;
        let link = establish_virtual_link(&mut self.topology, &link_id, &req.node_a, &req.node_b, &path)?;
        self.meta.insert(
            link_id.clone(),
            LinkMeta {
                awaiting: [req.node_a.clone(), req.node_b.clone()].into(),
                ..LinkMeta::default()
            },
        );
        for (me, peer) in [(&req.node_a, &req.node_b), (&req.node_b, &req.node_a)] {
            let payload = RelayPayload {
                link_id: link_id.clone(),
                peer_node: peer.clone(),
                path: path.clone(),
                block_bits: self.config.block_bits,
            };
            self.send(me, DirectiveKind::OpenRelay, &link_id, crate::document::to_value(&payload));
        }
        Ok(link)
    }

    /// Processes an agent's answer. Returns false for responses to unknown
    /// or already answered directives, which are dropped.
    pub fn handle_response(&mut self, resp: &DirectiveResponse) -> bool {
        let Some(pending) = self.pending.remove(&resp.directive_id) else {
            return false;
        };
        self.completed.insert(resp.directive_id.clone(), resp.outcome.clone());
        let link_id = pending.link_id;
        match &resp.outcome {
            Outcome::Error { code, message } => {
                if let Some(meta) = self.meta.get_mut(&link_id) {
                    meta.last_error = Some(format!("{}: {code}: {message}", resp.node_id));
                }
                if matches!(pending.kind, DirectiveKind::CreateLinkEndpoint | DirectiveKind::OpenRelay) {
                    if let Some(link) = self.topology.links.get_mut(&link_id) {
                        link.status = LinkStatus::Down;
                    }
                }
            }
            Outcome::Ack => {
                if matches!(pending.kind, DirectiveKind::CreateLinkEndpoint | DirectiveKind::OpenRelay) {
                    self.endpoint_ready(&link_id, &resp.node_id);
                }
            }
        }
        true
    }

    fn endpoint_ready(&mut self, link_id: &str, node_id: &str) {
        let Some(meta) = self.meta.get_mut(link_id) else {
            return;
        };
        meta.awaiting.remove(node_id);
        if !meta.awaiting.is_empty() {
            return;
        }
        let Some(link) = self.topology.links.get_mut(link_id) else {
            return;
        };
        if link.status != LinkStatus::Planned {
            return;
        }
        link.status = LinkStatus::Active;
        meta.activated_at = Some(self.now_s);
        if link.kind == LinkKind::Physical {
            let ends = link.endpoints.clone();
            for node in [&ends.0, &ends.1] {
                self.set_iface_status(link_id, node, InterfaceStatus::Generating);
                let payload = LinkRef {
                    link_id: link_id.to_string(),
                };
                self.send(node, DirectiveKind::ActivateLink, link_id, crate::document::to_value(&payload));
            }
        }
    }

    fn set_iface_status(&mut self, link_id: &str, node_id: &str, status: InterfaceStatus) {
        if let Some(node) = self.topology.nodes.get_mut(node_id) {
            for iface in &mut node.interfaces {
                if iface.attached_link.as_deref() == Some(link_id) {
                    iface.status = status;
                    if status == InterfaceStatus::Idle {
                        iface.attached_link = None;
                    }
                }
            }
        }
    }

    /// Consumes one notification. Duplicates and stale sequence numbers are
    /// ignored and reported as `Ok(false)`.
    pub fn handle_notification(&mut self, n: &Notification) -> Result<bool, ControlError> {
        if !self.seq.accept(&n.emitter, n.seq) {
            return Ok(false);
        }
        let field = |name: &str| n.payload.get(name).and_then(|v| v.as_str()).map(str::to_string);
        match n.kind {
            NotificationKind::AppConnected => {
                let app = field("app_id").ok_or_else(|| ControlError::InvalidRequest("app_connected without app_id".into()))?;
                self.register_application(&app, &n.emitter, field("peer_app").as_deref())?;
            }
            NotificationKind::AppDisconnected => {
                let app = field("app_id")
                    .ok_or_else(|| ControlError::InvalidRequest("app_disconnected without app_id".into()))?;
                self.unregister_application(&app, &n.emitter)?;
            }
            NotificationKind::LinkStatus => {
                if let (Some(link_id), Some(c)) = (field("link_id"), n.payload.get("counters")) {
                    if let Ok(counters) = serde_json::from_value::<KeyCounters>(c.clone()) {
                        self.observe_counters(&n.emitter, &link_id, counters);
                    }
                }
            }
            NotificationKind::KeyLowWatermark => {
                let link_id = field("link_id")
                    .ok_or_else(|| ControlError::InvalidRequest("key_low_watermark without link_id".into()))?;
                let available_bits = n.payload.get("available_bits").and_then(|v| v.as_u64()).unwrap_or(0);
                self.alerts.push_back(WatermarkAlert {
                    node_id: n.emitter.clone(),
                    link_id,
                    available_bits,
                });
            }
        }
        Ok(true)
    }

    pub fn register_application(&mut self, app_id: &str, node_id: &str, peer_hint: Option<&str>) -> Result<(), ControlError> {
        if !self.topology.nodes.contains_key(node_id) {
            return Err(ControlError::UnknownNode(node_id.to_string()));
        }
        let key = (node_id.to_string(), app_id.to_string());
        if self.apps.contains_key(&key) {
            return Err(ControlError::DuplicateApplication {
                app_id: app_id.to_string(),
                node_id: node_id.to_string(),
            });
        }
        // peer hints are symmetric once both sides are known
        if let Some(peer) = peer_hint {
            for entry in self.apps.values_mut() {
                if entry.application.app_id == peer && entry.application.peer_app.is_none() {
                    entry.application.peer_app = Some(app_id.to_string());
                }
            }
        }
        self.apps.insert(
            key,
            AppInventory {
                application: ApplicationRecord {
                    app_id: app_id.to_string(),
                    host_node: node_id.to_string(),
                    peer_app: peer_hint.map(str::to_string),
                    sessions: Vec::new(),
                    registered_at: self.now_s,
                },
                usage: AppUsage::default(),
            },
        );
        Ok(())
    }

    pub fn unregister_application(&mut self, app_id: &str, node_id: &str) -> Result<AppInventory, ControlError> {
        self.apps
            .remove(&(node_id.to_string(), app_id.to_string()))
            .ok_or_else(|| ControlError::UnknownApplication {
                app_id: app_id.to_string(),
                node_id: node_id.to_string(),
            })
    }

    fn app_mut(&mut self, node_id: &str, app_id: &str) -> Result<&mut AppInventory, ControlError> {
        self.apps
            .get_mut(&(node_id.to_string(), app_id.to_string()))
            .ok_or_else(|| ControlError::UnknownApplication {
                app_id: app_id.to_string(),
                node_id: node_id.to_string(),
            })
    }

    pub fn record_session(&mut self, node_id: &str, app_id: &str, session_id: &str) -> Result<(), ControlError> {
        self.app_mut(node_id, app_id)?.application.sessions.push(session_id.to_string());
        Ok(())
    }

    pub fn record_key_usage(&mut self, node_id: &str, app_id: &str, keys: u64, bits: u64) -> Result<(), ControlError> {
        let usage = &mut self.app_mut(node_id, app_id)?.usage;
        usage.keys_delivered += keys;
        usage.bits_consumed += bits;
        Ok(())
    }

    pub fn applications(&self) -> Vec<AppInventory> {
        self.apps.values().cloned().collect()
    }

    pub fn application(&self, node_id: &str, app_id: &str) -> Option<&AppInventory> {
        self.apps.get(&(node_id.to_string(), app_id.to_string()))
    }

    pub fn observe_counters(&mut self, node_id: &str, link_id: &str, counters: KeyCounters) {
        if let Some(meta) = self.meta.get_mut(link_id) {
            meta.counters.insert(node_id.to_string(), counters);
        }
    }

    pub fn activated_at(&self, link_id: &str) -> Option<f64> {
        self.meta.get(link_id).and_then(|m| m.activated_at)
    }

    /// Takes a link out of service. Virtual links riding on a physical link
    /// that goes down are torn down with it.
    pub fn teardown_link(&mut self, link_id: &str) -> Result<Vec<LinkId>, ControlError> {
        let link = self
            .topology
            .link(link_id)
            .ok_or_else(|| ControlError::UnknownLink(link_id.to_string()))?
            .clone();
        if link.status == LinkStatus::Down {
            return Ok(Vec::new());
        }
        let mut removed = vec![link_id.to_string()];
        if link.is_physical() {
            let dependents: Vec<LinkId> = self
                .topology
                .virtual_links()
                .filter(|v| v.status != LinkStatus::Down)
                .filter(|v| {
                    v.path.as_ref().is_some_and(|p| {
                        p.windows(2).any(|h| link.connects(&h[0], &h[1]))
                    })
                })
                .map(|v| v.link_id.clone())
                .collect();
            removed.extend(dependents);
        }
        for id in &removed {
            let ends = self.topology.links[id].endpoints.clone();
            for node in [&ends.0, &ends.1] {
                self.set_iface_status(id, node, InterfaceStatus::Idle);
                let payload = LinkRef { link_id: id.clone() };
                self.send(node, DirectiveKind::Teardown, id, crate::document::to_value(&payload));
            }
            if let Some(l) = self.topology.links.get_mut(id) {
                l.status = LinkStatus::Down;
            }
        }
        Ok(removed)
    }

    /// Replaces the rate profile of a physical link. Returns the new
    /// expected rate.
    pub fn set_profile(&mut self, link_id: &str, profile: RateProfile) -> Result<f64, ControlError> {
        profile.validate()?;
        let link = self
            .topology
            .links
            .get_mut(link_id)
            .ok_or_else(|| ControlError::UnknownLink(link_id.to_string()))?;
        if !link.is_physical() {
            return Err(ModelError::WrongKind {
                link_id: link_id.to_string(),
                expected: LinkKind::Physical,
            }
            .into());
        }
        link.rate_profile = Some(profile);
        let rate = link.expected_rate_bps().unwrap_or(0.0);
        let ends = link.endpoints.clone();
        for node in [&ends.0, &ends.1] {
            let payload = ProfilePayload {
                link_id: link_id.to_string(),
                rate_profile: profile,
                expected_rate_bps: rate,
            };
            self.send(node, DirectiveKind::SetProfile, link_id, crate::document::to_value(&payload));
        }
        Ok(rate)
    }

    fn inventory(&self, link: &Link) -> LinkInventory {
        let meta = self.meta.get(&link.link_id);
        let counters = meta.map(|m| m.counters.clone()).unwrap_or_default();
        let activated_at = meta.and_then(|m| m.activated_at);
        let observed_rate_bps = match (activated_at, counters.get(&link.endpoints.0)) {
            (Some(t0), Some(c)) if self.now_s > t0 => Some(c.generated_bits as f64 / (self.now_s - t0)),
            _ => None,
        };
        LinkInventory {
            link: link.clone(),
            loss_db: link.effective_loss_db(),
            expected_rate_bps: link.expected_rate_bps(),
            observed_rate_bps,
            activated_at,
            counters,
            last_error: meta.and_then(|m| m.last_error.clone()),
        }
    }

    pub fn state(&self) -> ControllerState {
        ControllerState {
            nodes: self.topology.nodes.values().cloned().collect(),
            links: self.topology.links.values().map(|l| self.inventory(l)).collect(),
            applications: self.applications(),
        }
    }

    /// Compact summary used by the northbound `GET /metrics` when no
    /// simulation is attached.
    pub fn metrics_summary(&self) -> serde_json::Value {
        let links: Vec<_> = self
            .topology
            .links
            .values()
            .map(|l| {
                let inv = self.inventory(l);
                json!({
                    "link_id": l.link_id,
                    "status": l.status,
                    "expected_rate_bps": inv.expected_rate_bps,
                    "observed_rate_bps": inv.observed_rate_bps,
                })
            })
            .collect();
        json!({ "links": links, "applications": self.apps.len(), "in_flight_directives": self.pending.len() })
    }
}

impl ApplicationDirectory for Controller {
    fn is_registered(&self, node_id: &str, app_id: &str) -> bool {
        self.apps.contains_key(&(node_id.to_string(), app_id.to_string()))
    }
}
