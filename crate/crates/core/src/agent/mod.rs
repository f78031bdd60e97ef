//! Per-node SDN agent.
//!
//! The agent owns its node's LKMS and QKD interfaces. It executes controller
//! directives, tracks which links terminate locally, detects applications
//! and emits notifications. It never touches the controller's topology.

mod app_api;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use app_api::{GetKeyRequest, GetKeyWithIdsRequest, KeyDocument, KeyResponse, OpenSessionRequest};

use crate::controlplane::{
    Directive, DirectiveKind, DirectiveResponse, EndpointPayload, LinkRef, Notification, NotificationKind,
    ProfilePayload, RelayPayload,
};
use crate::linksim::KeyBlock;
use crate::lkms::{KeyCounters, Lkms, LkmsError};
use crate::model::{AppId, InterfaceRole, InterfaceStatus, LinkId, LinkKind, NodeDescriptor, NodeId, QkdInterface};

/// Default low-watermark, per link. Arbitrary; configurable per scenario.
pub const DEFAULT_WATERMARK_BITS: u64 = 4096;

/// Number of directive ids remembered for replay detection.
pub const DIRECTIVE_MEMO: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("application `{0}` already connected")]
    DuplicateApplication(AppId),
    #[error("application `{0}` not connected")]
    UnknownApplication(AppId),
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::DuplicateApplication(_) => "duplicate_application",
            AgentError::UnknownApplication(_) => "unknown_application",
        }
    }
}

/// A link terminating at this node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEndpoint {
    pub link_id: LinkId,
    pub kind: LinkKind,
    /// Local QKD interface; none for virtual links.
    pub iface_id: Option<String>,
    pub role: Option<InterfaceRole>,
    pub peer_node: NodeId,
    pub active: bool,
    pub expected_rate_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub link_id: LinkId,
    pub kind: LinkKind,
    pub iface_id: Option<String>,
    pub active: bool,
    pub counters: KeyCounters,
}

/// Read-only status document of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub node_id: NodeId,
    pub interfaces: Vec<QkdInterface>,
    pub links: Vec<LinkReport>,
    pub applications: Vec<AppId>,
}

/// Bounded memo of answered directives, oldest evicted first.
#[derive(Debug, Clone, Default, PartialEq)]
struct DirectiveMemo {
    order: VecDeque<String>,
    answers: BTreeMap<String, DirectiveResponse>,
}

impl DirectiveMemo {
    fn get(&self, id: &str) -> Option<&DirectiveResponse> {
        self.answers.get(id)
    }

    fn put(&mut self, resp: DirectiveResponse) {
        if self.order.len() == DIRECTIVE_MEMO {
            if let Some(old) = self.order.pop_front() {
                self.answers.remove(&old);
            }
        }
        self.order.push_back(resp.directive_id.clone());
        self.answers.insert(resp.directive_id.clone(), resp);
    }
}

struct Refusal(&'static str, String);

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    node: NodeDescriptor,
    pending_directives: VecDeque<Directive>,
    link_endpoints: BTreeMap<LinkId, LinkEndpoint>,
    notification_seq: u64,
    lkms: Lkms,
    memo: DirectiveMemo,
    watermark_bits: u64,
    /// Links that were at or above the watermark since the last alert.
    armed: BTreeSet<LinkId>,
    apps: BTreeMap<AppId, Option<AppId>>,
    outbox: VecDeque<Notification>,
}

impl AgentState {
    pub fn new(node: NodeDescriptor) -> Self {
        Self::with_watermark(node, DEFAULT_WATERMARK_BITS)
    }

    pub fn with_watermark(node: NodeDescriptor, watermark_bits: u64) -> Self {
        let lkms = Lkms::new(node.node_id.clone());
        Self {
            node,
            pending_directives: VecDeque::new(),
            link_endpoints: BTreeMap::new(),
            notification_seq: 0,
            lkms,
            memo: DirectiveMemo::default(),
            watermark_bits,
            armed: BTreeSet::new(),
            apps: BTreeMap::new(),
            outbox: VecDeque::new(),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node.node_id
    }

    pub fn node(&self) -> &NodeDescriptor {
        &self.node
    }

    pub fn lkms(&self) -> &Lkms {
        &self.lkms
    }

    pub fn lkms_mut(&mut self) -> &mut Lkms {
        &mut self.lkms
    }

    pub fn endpoint(&self, link_id: &str) -> Option<&LinkEndpoint> {
        self.link_endpoints.get(link_id)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &LinkEndpoint> {
        self.link_endpoints.values()
    }

    pub fn watermark_bits(&self) -> u64 {
        self.watermark_bits
    }

    pub fn notification_seq(&self) -> u64 {
        self.notification_seq
    }

    pub fn applications(&self) -> impl Iterator<Item = &AppId> {
        self.apps.keys()
    }

    pub fn enqueue(&mut self, directive: Directive) {
        self.pending_directives.push_back(directive);
    }

    pub fn pending(&self) -> usize {
        self.pending_directives.len()
    }

    /// Applies queued directives in arrival order.
    pub fn process_pending(&mut self) -> Vec<DirectiveResponse> {
        let mut out = Vec::with_capacity(self.pending_directives.len());
        while let Some(d) = self.pending_directives.pop_front() {
            out.push(self.apply_directive(&d));
        }
        out
    }

    /// Executes one directive. A replayed directive id gets the original
    /// answer again without executing anything.
    pub fn apply_directive(&mut self, d: &Directive) -> DirectiveResponse {
        if let Some(previous) = self.memo.get(&d.directive_id) {
            return previous.clone();
        }
        let node_id = self.node.node_id.clone();
        let resp = match self.execute(d) {
            Ok(()) => DirectiveResponse::ack(&d.directive_id, &node_id),
            Err(Refusal(code, message)) => DirectiveResponse::error(&d.directive_id, &node_id, code, message),
        };
        self.memo.put(resp.clone());
        resp
    }

    fn execute(&mut self, d: &Directive) -> Result<(), Refusal> {
        if d.target_node != self.node.node_id {
            return Err(Refusal("wrong_target", format!("directive for `{}`", d.target_node)));
        }
        match d.kind {
            DirectiveKind::CreateLinkEndpoint => self.create_endpoint(payload(&d.payload)?),
            DirectiveKind::ActivateLink => self.activate(payload(&d.payload)?),
            DirectiveKind::Teardown => self.teardown(payload(&d.payload)?),
            DirectiveKind::SetProfile => self.set_profile(payload(&d.payload)?),
            DirectiveKind::OpenRelay => self.open_relay(payload(&d.payload)?),
        }
    }

    fn create_endpoint(&mut self, p: EndpointPayload) -> Result<(), Refusal> {
        let iface = self
            .node
            .interface(&p.iface_id)
            .ok_or_else(|| Refusal("unknown_interface", format!("no interface `{}`", p.iface_id)))?;
        if iface.role != p.role {
            return Err(Refusal("conflict", format!("`{}` is a {:?}", p.iface_id, iface.role)));
        }
        match &iface.attached_link {
            Some(l) if *l == p.link_id => {}
            Some(l) => return Err(Refusal("conflict", format!("`{}` already attached to `{l}`", p.iface_id))),
            None if iface.status == InterfaceStatus::Generating => {
                return Err(Refusal("conflict", format!("`{}` is generating", p.iface_id)))
            }
            None => {}
        }
        if let Some(existing) = self.link_endpoints.get(&p.link_id) {
            if existing.iface_id.as_deref() != Some(p.iface_id.as_str()) {
                return Err(Refusal("conflict", format!("`{}` already terminates here", p.link_id)));
            }
        }
        self.lkms
            .store_mut()
            .register_link(&p.link_id, p.block_bits)
            .map_err(|e| Refusal("malformed_payload", e.to_string()))?;
        let iface = self.node.interface_mut(&p.iface_id).expect("checked above");
        iface.attached_link = Some(p.link_id.clone());
        self.link_endpoints.insert(
            p.link_id.clone(),
            LinkEndpoint {
                link_id: p.link_id,
                kind: LinkKind::Physical,
                iface_id: Some(p.iface_id),
                role: Some(p.role),
                peer_node: p.peer_node,
                active: false,
                expected_rate_bps: p.expected_rate_bps,
            },
        );
        Ok(())
    }

    fn activate(&mut self, p: LinkRef) -> Result<(), Refusal> {
        let ep = self
            .link_endpoints
            .get(&p.link_id)
            .ok_or_else(|| Refusal("unknown_link", format!("`{}` does not terminate here", p.link_id)))?;
        if let Some(iface_id) = ep.iface_id.clone() {
            let iface = self.node.interface_mut(&iface_id).expect("endpoint interfaces exist");
            if iface.attached_link.as_deref() != Some(p.link_id.as_str()) {
                return Err(Refusal("conflict", format!("`{iface_id}` serves another link")));
            }
            iface.status = InterfaceStatus::Generating;
        }
        self.link_endpoints.get_mut(&p.link_id).expect("checked above").active = true;
        Ok(())
    }

    fn teardown(&mut self, p: LinkRef) -> Result<(), Refusal> {
        let ep = self
            .link_endpoints
            .remove(&p.link_id)
            .ok_or_else(|| Refusal("unknown_link", format!("`{}` does not terminate here", p.link_id)))?;
        if let Some(iface) = ep.iface_id.and_then(|i| self.node.interface_mut(&i)) {
            iface.attached_link = None;
            iface.status = InterfaceStatus::Idle;
        }
        self.lkms.forget_link(&p.link_id);
        self.armed.remove(&p.link_id);
        Ok(())
    }

    fn set_profile(&mut self, p: ProfilePayload) -> Result<(), Refusal> {
        p.rate_profile
            .validate()
            .map_err(|e| Refusal("malformed_payload", e.to_string()))?;
        let ep = self
            .link_endpoints
            .get_mut(&p.link_id)
            .ok_or_else(|| Refusal("unknown_link", format!("`{}` does not terminate here", p.link_id)))?;
        ep.expected_rate_bps = p.expected_rate_bps;
        Ok(())
    }

    fn open_relay(&mut self, p: RelayPayload) -> Result<(), Refusal> {
        let me = self.node.node_id.as_str();
        if p.path.first().map(String::as_str) != Some(me) && p.path.last().map(String::as_str) != Some(me) {
            return Err(Refusal("malformed_payload", format!("`{me}` is not an end of the path")));
        }
        if let Some(existing) = self.link_endpoints.get(&p.link_id) {
            if existing.kind != LinkKind::Virtual {
                return Err(Refusal("conflict", format!("`{}` already terminates here", p.link_id)));
            }
        }
        self.lkms
            .store_mut()
            .register_link(&p.link_id, p.block_bits)
            .map_err(|e| Refusal("malformed_payload", e.to_string()))?;
        self.link_endpoints.insert(
            p.link_id.clone(),
            LinkEndpoint {
                link_id: p.link_id,
                kind: LinkKind::Virtual,
                iface_id: None,
                role: None,
                peer_node: p.peer_node,
                active: true,
                expected_rate_bps: 0.0,
            },
        );
        Ok(())
    }

    pub fn report_status(&self) -> StatusReport {
        let links = self
            .link_endpoints
            .values()
            .map(|ep| LinkReport {
                link_id: ep.link_id.clone(),
                kind: ep.kind,
                iface_id: ep.iface_id.clone(),
                active: ep.active,
                counters: self.lkms.store().counters(&ep.link_id).unwrap_or_default(),
            })
            .collect();
        StatusReport {
            node_id: self.node.node_id.clone(),
            interfaces: self.node.interfaces.clone(),
            links,
            applications: self.apps.keys().cloned().collect(),
        }
    }

    /// Stamps and queues a notification for the controller.
    pub fn emit_notification(&mut self, kind: NotificationKind, payload: Value) -> Notification {
        self.notification_seq += 1;
        let n = Notification {
            topic: kind.topic().to_string(),
            emitter: self.node.node_id.clone(),
            kind,
            payload,
            seq: self.notification_seq,
        };
        self.outbox.push_back(n.clone());
        n
    }

    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        self.outbox.drain(..).collect()
    }

    /// A local application appeared.
    pub fn connect_app(&mut self, app_id: &str, peer_hint: Option<&str>) -> Result<Notification, AgentError> {
        if self.apps.contains_key(app_id) {
            return Err(AgentError::DuplicateApplication(app_id.to_string()));
        }
        self.apps.insert(app_id.to_string(), peer_hint.map(str::to_string));
        let mut payload = json!({ "app_id": app_id });
        if let Some(peer) = peer_hint {
            payload["peer_app"] = json!(peer);
        }
        Ok(self.emit_notification(NotificationKind::AppConnected, payload))
    }

    pub fn disconnect_app(&mut self, app_id: &str) -> Result<Notification, AgentError> {
        if self.apps.remove(app_id).is_none() {
            return Err(AgentError::UnknownApplication(app_id.to_string()));
        }
        Ok(self.emit_notification(NotificationKind::AppDisconnected, json!({ "app_id": app_id })))
    }

    /// Hands freshly distilled blocks of a local link to the LKMS.
    pub fn ingest(&mut self, link_id: &str, blocks: Vec<KeyBlock>) -> Result<KeyCounters, LkmsError> {
        self.lkms.ingest_blocks(link_id, blocks)
    }

    /// Emits `key_low_watermark` for every link whose available key fell
    /// below the watermark since it was last at or above it.
    pub fn check_watermarks(&mut self) -> Vec<Notification> {
        let mut low = Vec::new();
        for (link_id, keys) in self.lkms.store().links() {
            let available = keys.counters().available_bits;
            if available >= self.watermark_bits {
                self.armed.insert(link_id.clone());
            } else if self.armed.contains(link_id) {
                low.push((link_id.clone(), available));
            }
        }
        let mut out = Vec::with_capacity(low.len());
        for (link_id, available_bits) in low {
            self.armed.remove(&link_id);
            out.push(self.emit_notification(
                NotificationKind::KeyLowWatermark,
                json!({
                    "link_id": link_id,
                    "available_bits": available_bits,
                    "watermark_bits": self.watermark_bits,
                }),
            ));
        }
        out
    }
}

fn payload<T: serde::de::DeserializeOwned>(value: &Value) -> Result<T, Refusal> {
    crate::document::from_value(value.clone()).map_err(|e| Refusal("malformed_payload", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::{keystream, BlockState};
    use crate::model::Technology;

    fn node() -> NodeDescriptor {
        NodeDescriptor::new("almagro", "Madrid")
            .with_interface(QkdInterface::new("tx-norte", InterfaceRole::Transmitter, Technology::CV))
            .with_interface(QkdInterface::new("tx-concepcion", InterfaceRole::Transmitter, Technology::CV))
    }

    fn create(id: &str, link: &str, iface: &str) -> Directive {
        Directive {
            directive_id: id.into(),
            target_node: "almagro".into(),
            kind: DirectiveKind::CreateLinkEndpoint,
            payload: json!({
                "link_id": link,
                "iface_id": iface,
                "role": "transmitter",
                "peer_node": "norte",
                "block_bits": 256,
                "expected_rate_bps": 70000.0,
            }),
        }
    }

    fn simple(id: &str, kind: DirectiveKind, link: &str) -> Directive {
        Directive {
            directive_id: id.into(),
            target_node: "almagro".into(),
            kind,
            payload: json!({ "link_id": link }),
        }
    }

    fn blocks(link: &str, ids: std::ops::Range<u64>) -> Vec<KeyBlock> {
        ids.map(|i| KeyBlock {
            block_id: i,
            link_id: link.into(),
            bytes: keystream("t", 0, link, i, 32),
            created_at: 0.0,
            state: BlockState::Available,
        })
        .collect()
    }

    #[test]
    fn attach_idle_transmitter() {
        let mut a = AgentState::new(node());
        let r = a.apply_directive(&create("d1", "l1", "tx-norte"));
        assert!(r.is_ack());
        assert_eq!(r.directive_id, "d1");
        assert_eq!(a.node().interface("tx-norte").unwrap().attached_link.as_deref(), Some("l1"));
    }

    #[test]
    fn replay_is_acked_without_reexecution() {
        let mut a = AgentState::new(node());
        let d = create("d1", "l1", "tx-norte");
        let first = a.apply_directive(&d);
        let snapshot = a.clone();
        let second = a.apply_directive(&d);
        assert_eq!(first, second);
        assert_eq!(a, snapshot);
    }

    #[test]
    fn attaching_a_generating_interface_conflicts() {
        let mut a = AgentState::new(node());
        a.apply_directive(&create("d1", "l1", "tx-norte"));
        assert!(a.apply_directive(&simple("d2", DirectiveKind::ActivateLink, "l1")).is_ack());
        assert_eq!(a.node().interface("tx-norte").unwrap().status, InterfaceStatus::Generating);
        let r = a.apply_directive(&create("d3", "l2", "tx-norte"));
        match r.outcome {
            crate::controlplane::Outcome::Error { code, .. } => assert_eq!(code, "conflict"),
            o => panic!("unexpected {o:?}"),
        }
    }

    #[test]
    fn unknown_interface_and_malformed_payload() {
        let mut a = AgentState::new(node());
        let r = a.apply_directive(&create("d1", "l1", "tx-nowhere"));
        assert!(matches!(r.outcome, crate::controlplane::Outcome::Error { ref code, .. } if code == "unknown_interface"));
        let mut bad = create("d2", "l1", "tx-norte");
        bad.payload = json!({ "link": "l1" });
        let r = a.apply_directive(&bad);
        match r.outcome {
            crate::controlplane::Outcome::Error { code, message } => {
                assert_eq!(code, "malformed_payload");
                assert!(message.contains("link"));
            }
            o => panic!("unexpected {o:?}"),
        }
    }

    #[test]
    fn pending_directives_run_in_order() {
        let mut a = AgentState::new(node());
        a.enqueue(create("d1", "l1", "tx-norte"));
        a.enqueue(simple("d2", DirectiveKind::ActivateLink, "l1"));
        let out = a.process_pending();
        assert_eq!(out.iter().map(|r| r.directive_id.as_str()).collect::<Vec<_>>(), ["d1", "d2"]);
        assert!(out.iter().all(DirectiveResponse::is_ack));
        assert_eq!(a.pending(), 0);
    }

    #[test]
    fn fresh_status_is_idle_and_empty() {
        let a = AgentState::new(node());
        let s = a.report_status();
        assert!(s.interfaces.iter().all(|i| i.status == InterfaceStatus::Idle));
        assert!(s.links.is_empty());
        assert!(s.applications.is_empty());
    }

    #[test]
    fn status_after_teardown_excludes_link() {
        let mut a = AgentState::new(node());
        a.apply_directive(&create("d1", "l1", "tx-norte"));
        a.apply_directive(&simple("d2", DirectiveKind::ActivateLink, "l1"));
        a.ingest("l1", blocks("l1", 0..4)).unwrap();
        let s = a.report_status();
        assert_eq!(s.links[0].counters.available_bits, 1024);
        assert!(s.links.iter().all(|l| l.counters.is_conserved()));
        assert!(a.apply_directive(&simple("d3", DirectiveKind::Teardown, "l1")).is_ack());
        let s = a.report_status();
        assert!(s.links.is_empty());
        assert!(a.node().interface("tx-norte").unwrap().is_free());
    }

    #[test]
    fn notifications_have_increasing_seq() {
        let mut a = AgentState::new(node());
        let n1 = a.connect_app("enc-almagro", None).unwrap();
        assert_eq!(n1.kind, NotificationKind::AppConnected);
        assert_eq!(n1.payload["app_id"], "enc-almagro");
        let n2 = a.emit_notification(NotificationKind::LinkStatus, json!({}));
        assert!(n2.seq > n1.seq);
        assert_eq!(a.connect_app("enc-almagro", None).unwrap_err().code(), "duplicate_application");
    }

    #[test]
    fn low_watermark_fires_once_on_the_way_down() {
        let mut a = AgentState::with_watermark(node(), 512);
        a.apply_directive(&create("d1", "l1", "tx-norte"));
        a.ingest("l1", blocks("l1", 0..1)).unwrap();
        // below the mark from the start: nothing to report
        assert!(a.check_watermarks().is_empty());
        a.ingest("l1", blocks("l1", 1..3)).unwrap();
        assert!(a.check_watermarks().is_empty());
        a.lkms_mut()
            .store_mut()
            .transition("l1", &[0, 1], BlockState::Available, BlockState::Consumed)
            .unwrap();
        let fired = a.check_watermarks();
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].kind, NotificationKind::KeyLowWatermark);
        assert_eq!(fired[0].payload["link_id"], "l1");
        assert_eq!(fired[0].payload["available_bits"], 256);
        assert!(a.check_watermarks().is_empty());
    }

    #[test]
    fn memo_is_bounded() {
        let mut a = AgentState::new(node());
        for i in 0..(DIRECTIVE_MEMO + 10) {
            a.apply_directive(&simple(&format!("x{i}"), DirectiveKind::ActivateLink, "none"));
        }
        assert_eq!(a.memo.answers.len(), DIRECTIVE_MEMO);
        assert!(a.memo.get("x0").is_none());
    }
}
