//! Domain model of a software-defined QKD network.
//!
//! A node aggregates QKD interfaces under one security perimeter. Links are
//! key associations between two nodes: either a physical quantum channel or
//! a virtual association relayed through trusted intermediate nodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controlplane::spectrum::SpectrumMap;
use crate::linksim::{self, RateProfile};
use crate::scalar::Scalar;

pub type NodeId = String;
pub type LinkId = String;
pub type AppId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Active,
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceRole {
    Transmitter,
    Receiver,
}

/// QKD technology family. Informational only; rates come from the profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Technology {
    CV,
    DV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceStatus {
    Idle,
    Generating,
    Calibrating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    SupportsRelay,
    SupportsHybrid,
    SharedTransmitter,
}

/// One QKD system endpoint hosted by a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QkdInterface {
    pub iface_id: String,
    pub role: InterfaceRole,
    pub technology: Technology,
    #[serde(default)]
    pub attached_link: Option<LinkId>,
    #[serde(default = "idle")]
    pub status: InterfaceStatus,
    /// Physical QKD device backing this interface. Interfaces of one node
    /// naming the same device time-share it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
}

fn idle() -> InterfaceStatus {
    InterfaceStatus::Idle
}

impl QkdInterface {
    pub fn new(iface_id: impl Into<String>, role: InterfaceRole, technology: Technology) -> Self {
        Self {
            iface_id: iface_id.into(),
            role,
            technology,
            attached_link: None,
            status: InterfaceStatus::Idle,
            device_id: None,
        }
    }

    pub fn with_device(mut self, device_id: impl Into<String>) -> Self {
        self.device_id = Some(device_id.into());
        self
    }

    pub fn is_free(&self) -> bool {
        self.attached_link.is_none() && self.status == InterfaceStatus::Idle
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    #[serde(default)]
    pub location: String,
    #[serde(default)]
    pub interfaces: Vec<QkdInterface>,
    #[serde(default)]
    pub capabilities: BTreeSet<Capability>,
    #[serde(default = "active")]
    pub status: NodeStatus,
}

fn active() -> NodeStatus {
    NodeStatus::Active
}

impl NodeDescriptor {
    pub fn new(node_id: impl Into<String>, location: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            location: location.into(),
            interfaces: Vec::new(),
            capabilities: BTreeSet::new(),
            status: NodeStatus::Active,
        }
    }

    pub fn with_interface(mut self, iface: QkdInterface) -> Self {
        self.interfaces.push(iface);
        self
    }

    pub fn with_capability(mut self, capability: Capability) -> Self {
        self.capabilities.insert(capability);
        self
    }

    pub fn interface(&self, iface_id: &str) -> Option<&QkdInterface> {
        self.interfaces.iter().find(|i| i.iface_id == iface_id)
    }

    pub fn interface_mut(&mut self, iface_id: &str) -> Option<&mut QkdInterface> {
        self.interfaces.iter_mut().find(|i| i.iface_id == iface_id)
    }
}

/// Fiber span plus the passive elements on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberSpec<T = f64> {
    pub length_km: T,
    #[serde(default)]
    pub component_losses_db: Vec<T>,
}

impl<T: Scalar> FiberSpec<T> {
    pub fn new(length_km: T, component_losses_db: Vec<T>) -> Self {
        Self {
            length_km,
            component_losses_db,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.length_km >= T::zero() && self.component_losses_db.iter().all(|c| *c >= T::zero())
    }

    /// Joins two spans end to end.
    pub fn concat(&self, other: &Self) -> Self {
        let mut components = self.component_losses_db.clone();
        components.extend_from_slice(&other.component_losses_db);
        Self {
            length_km: self.length_km + other.length_km,
            component_losses_db: components,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Physical,
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkStatus {
    Planned,
    Active,
    Down,
}

/// A key association between two nodes.
///
/// Physical links carry `fiber` and `rate_profile` (and normally a
/// `spectrum`); their endpoints are ordered (transmitter, receiver).
/// Virtual links carry the relay `path` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub link_id: LinkId,
    pub kind: LinkKind,
    pub endpoints: (NodeId, NodeId),
    #[serde(default)]
    pub fiber: Option<FiberSpec>,
    #[serde(default)]
    pub spectrum: Option<SpectrumMap>,
    #[serde(default)]
    pub rate_profile: Option<RateProfile>,
    #[serde(default)]
    pub path: Option<Vec<NodeId>>,
    pub status: LinkStatus,
}

impl Link {
    pub fn physical(
        link_id: impl Into<String>,
        transmitter: impl Into<String>,
        receiver: impl Into<String>,
        fiber: FiberSpec,
        rate_profile: RateProfile,
    ) -> Self {
        Self {
            link_id: link_id.into(),
            kind: LinkKind::Physical,
            endpoints: (transmitter.into(), receiver.into()),
            fiber: Some(fiber),
            spectrum: None,
            rate_profile: Some(rate_profile),
            path: None,
            status: LinkStatus::Planned,
        }
    }

    pub fn virtual_link(link_id: impl Into<String>, path: Vec<NodeId>) -> Self {
        let first = path.first().cloned().unwrap_or_default();
        let last = path.last().cloned().unwrap_or_default();
        Self {
            link_id: link_id.into(),
            kind: LinkKind::Virtual,
            endpoints: (first, last),
            fiber: None,
            spectrum: None,
            rate_profile: None,
            path: Some(path),
            status: LinkStatus::Planned,
        }
    }

    pub fn with_status(mut self, status: LinkStatus) -> Self {
        self.status = status;
        self
    }

    pub fn is_physical(&self) -> bool {
        self.kind == LinkKind::Physical
    }

    pub fn is_active(&self) -> bool {
        self.status == LinkStatus::Active
    }

    pub fn has_endpoint(&self, node: &str) -> bool {
        self.endpoints.0 == node || self.endpoints.1 == node
    }

    /// True when the link joins `a` and `b` in either orientation.
    pub fn connects(&self, a: &str, b: &str) -> bool {
        (self.endpoints.0 == a && self.endpoints.1 == b)
            || (self.endpoints.0 == b && self.endpoints.1 == a)
    }

    pub fn other_end(&self, node: &str) -> Option<&str> {
        if self.endpoints.0 == node {
            Some(&self.endpoints.1)
        } else if self.endpoints.1 == node {
            Some(&self.endpoints.0)
        } else {
            None
        }
    }

    /// Fiber loss plus any coexistence penalty from the classical channels.
    pub fn effective_loss_db(&self) -> Option<f64> {
        let fiber = self.fiber.as_ref()?;
        let loss = linksim::compute_loss(fiber);
        let penalty = match (&self.rate_profile, &self.spectrum) {
            (Some(profile), Some(spectrum)) => {
                profile.classical_penalty_db * spectrum.classical_count() as f64
            }
            _ => 0.0,
        };
        Some(loss + penalty)
    }

    /// Raw secret key rate of a physical link (before time sharing).
    pub fn expected_rate_bps(&self) -> Option<f64> {
        let profile = self.rate_profile.as_ref()?;
        let loss = self.effective_loss_db()?;
        linksim::key_rate(loss, profile).ok()
    }
}

/// An application consuming keys from a node's LKMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationRecord {
    pub app_id: AppId,
    pub host_node: NodeId,
    #[serde(default)]
    pub peer_app: Option<AppId>,
    #[serde(default)]
    pub sessions: Vec<String>,
    /// Simulation time in seconds.
    pub registered_at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub nodes: BTreeMap<NodeId, NodeDescriptor>,
    #[serde(default)]
    pub links: BTreeMap<LinkId, Link>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_node(&mut self, node: NodeDescriptor) {
        self.nodes.insert(node.node_id.clone(), node);
    }

    pub fn insert_link(&mut self, link: Link) {
        self.links.insert(link.link_id.clone(), link);
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeDescriptor> {
        self.nodes.get(node_id)
    }

    pub fn link(&self, link_id: &str) -> Option<&Link> {
        self.links.get(link_id)
    }

    pub fn physical_links(&self) -> impl Iterator<Item = &Link> {
        self.links.values().filter(|l| l.is_physical())
    }

    pub fn virtual_links(&self) -> impl Iterator<Item = &Link> {
        self.links.values().filter(|l| !l.is_physical())
    }

    /// The active physical link joining `a` and `b`, lowest link id first.
    pub fn physical_link_between(&self, a: &str, b: &str) -> Option<&Link> {
        self.links
            .values()
            .find(|l| l.is_physical() && l.is_active() && l.connects(a, b))
    }

    /// Active links of any kind joining `a` and `b`: physical links first,
    /// then virtual, each group in link id order.
    pub fn links_between<'a>(&'a self, a: &'a str, b: &'a str) -> Vec<&'a Link> {
        let mut found: Vec<&Link> = self
            .links
            .values()
            .filter(|l| l.is_active() && l.connects(a, b))
            .collect();
        found.sort_by(|x, y| x.kind.cmp(&y.kind).then_with(|| x.link_id.cmp(&y.link_id)));
        found
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    NodeIdMismatch,
    DuplicateInterfaceId,
    UnknownEndpoint,
    SelfLink,
    LinkIdMismatch,
    MissingFiber,
    MissingRateProfile,
    NegativeFiberValue,
    UnexpectedPath,
    UnexpectedPhysicalField,
    MissingPath,
    PathTooShort,
    PathEndpointMismatch,
    PathRepeatsNode,
    BrokenRelayPath,
    DanglingAttachment,
    DuplicateAttachment,
    RoleMismatch,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::NodeIdMismatch => "node_id_mismatch",
            ViolationCode::DuplicateInterfaceId => "duplicate_interface_id",
            ViolationCode::UnknownEndpoint => "unknown_endpoint",
            ViolationCode::SelfLink => "self_link",
            ViolationCode::LinkIdMismatch => "link_id_mismatch",
            ViolationCode::MissingFiber => "missing_fiber",
            ViolationCode::MissingRateProfile => "missing_rate_profile",
            ViolationCode::NegativeFiberValue => "negative_fiber_value",
            ViolationCode::UnexpectedPath => "unexpected_path",
            ViolationCode::UnexpectedPhysicalField => "unexpected_physical_field",
            ViolationCode::MissingPath => "missing_path",
            ViolationCode::PathTooShort => "path_too_short",
            ViolationCode::PathEndpointMismatch => "path_endpoint_mismatch",
            ViolationCode::PathRepeatsNode => "path_repeats_node",
            ViolationCode::BrokenRelayPath => "broken_relay_path",
            ViolationCode::DanglingAttachment => "dangling_attachment",
            ViolationCode::DuplicateAttachment => "duplicate_attachment",
            ViolationCode::RoleMismatch => "role_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Node or link id the violation is about.
    pub subject: String,
    pub detail: String,
}

impl Violation {
    fn new(code: ViolationCode, subject: &str, detail: impl Into<String>) -> Self {
        Self {
            code,
            subject: subject.to_string(),
            detail: detail.into(),
        }
    }
}

/// Lists every invariant violation in `topology`. An empty list means valid.
pub fn validate_topology(topology: &Topology) -> Vec<Violation> {
    use ViolationCode::*;

    let mut out = Vec::new();

    for (key, node) in &topology.nodes {
        if key != &node.node_id {
            out.push(Violation::new(
                NodeIdMismatch,
                key,
                format!("stored under `{key}` but descriptor says `{}`", node.node_id),
            ));
        }
        let mut seen = BTreeSet::new();
        for iface in &node.interfaces {
            if !seen.insert(iface.iface_id.as_str()) {
                out.push(Violation::new(
                    DuplicateInterfaceId,
                    &node.node_id,
                    format!("interface `{}` declared twice", iface.iface_id),
                ));
            }
        }
    }

    for (key, link) in &topology.links {
        let id = link.link_id.as_str();
        if key != id {
            out.push(Violation::new(LinkIdMismatch, key, format!("descriptor says `{id}`")));
        }
        let (a, b) = (&link.endpoints.0, &link.endpoints.1);
        for end in [a, b] {
            if !topology.nodes.contains_key(end) {
                out.push(Violation::new(UnknownEndpoint, id, format!("no node `{end}`")));
            }
        }
        if a == b {
            out.push(Violation::new(SelfLink, id, format!("both endpoints are `{a}`")));
        }
        match link.kind {
            LinkKind::Physical => {
                match &link.fiber {
                    None => out.push(Violation::new(MissingFiber, id, "physical link without fiber")),
                    Some(f) if !f.is_valid() => {
                        out.push(Violation::new(NegativeFiberValue, id, "fiber values must be >= 0"))
                    }
                    Some(_) => {}
                }
                if link.rate_profile.is_none() {
                    out.push(Violation::new(MissingRateProfile, id, "physical link without rate profile"));
                }
                if link.path.is_some() {
                    out.push(Violation::new(UnexpectedPath, id, "physical link carries a relay path"));
                }
            }
            LinkKind::Virtual => {
                if link.fiber.is_some() || link.spectrum.is_some() || link.rate_profile.is_some() {
                    out.push(Violation::new(
                        UnexpectedPhysicalField,
                        id,
                        "virtual link carries fiber, spectrum or rate profile",
                    ));
                }
                match &link.path {
                    None => out.push(Violation::new(MissingPath, id, "virtual link without path")),
                    Some(path) => validate_path(topology, id, path, &link.endpoints, &mut out),
                }
            }
        }
    }

    // Interface attachments: each physical link has at most one attached
    // interface per endpoint, and the two are a transmitter/receiver pair.
    let mut attached: BTreeMap<&str, Vec<(&str, &QkdInterface)>> = BTreeMap::new();
    for node in topology.nodes.values() {
        for iface in &node.interfaces {
            let Some(link_id) = iface.attached_link.as_deref() else {
                continue;
            };
            match topology.links.get(link_id) {
                Some(link) if link.is_physical() && link.has_endpoint(&node.node_id) => {
                    attached.entry(link_id).or_default().push((&node.node_id, iface));
                }
                _ => out.push(Violation::new(
                    DanglingAttachment,
                    &node.node_id,
                    format!(
                        "interface `{}` attached to `{link_id}` which is not a physical link of this node",
                        iface.iface_id
                    ),
                )),
            }
        }
    }
    for (link_id, ifaces) in &attached {
        let mut per_node: BTreeMap<&str, usize> = BTreeMap::new();
        for (node, _) in ifaces {
            *per_node.entry(node).or_default() += 1;
        }
        for (node, count) in per_node {
            if count > 1 {
                out.push(Violation::new(
                    DuplicateAttachment,
                    link_id,
                    format!("{count} interfaces of `{node}` attached to the same link"),
                ));
            }
        }
        if ifaces.len() == 2 && ifaces[0].0 != ifaces[1].0 && ifaces[0].1.role == ifaces[1].1.role {
            out.push(Violation::new(
                RoleMismatch,
                link_id,
                format!("both attached interfaces are {:?}", ifaces[0].1.role),
            ));
        }
    }

    out
}

fn validate_path(
    topology: &Topology,
    id: &str,
    path: &[NodeId],
    endpoints: &(NodeId, NodeId),
    out: &mut Vec<Violation>,
) {
    use ViolationCode::*;

    if path.len() < 3 {
        out.push(Violation::new(
            PathTooShort,
            id,
            format!("path too short: {} nodes, at least 3 required", path.len()),
        ));
    }
    if path.first() != Some(&endpoints.0) || path.last() != Some(&endpoints.1) {
        out.push(Violation::new(
            PathEndpointMismatch,
            id,
            "path extremes differ from link endpoints",
        ));
    }
    let mut seen = BTreeSet::new();
    for node in path {
        if !seen.insert(node.as_str()) {
            out.push(Violation::new(PathRepeatsNode, id, format!("`{node}` visited twice")));
        }
        if !topology.nodes.contains_key(node) {
            out.push(Violation::new(UnknownEndpoint, id, format!("path node `{node}` unknown")));
        }
    }
    for hop in path.windows(2) {
        if topology.physical_link_between(&hop[0], &hop[1]).is_none() {
            out.push(Violation::new(
                BrokenRelayPath,
                id,
                format!("no active physical link {} - {}", hop[0], hop[1]),
            ));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("link `{link_id}` is not a {expected:?} link")]
    WrongKind { link_id: LinkId, expected: LinkKind },
    #[error("virtual link `{0}` has no path")]
    MissingPath(LinkId),
    #[error("broken relay path: no active physical link between `{from}` and `{to}`")]
    BrokenRelayPath { from: NodeId, to: NodeId },
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("model violations: {}", summarize(.0))]
    Invalid(Vec<Violation>),
}

fn summarize(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("{}({}): {}", v.code.as_str(), v.subject, v.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::WrongKind { .. } => "wrong_kind",
            ModelError::MissingPath(_) => "missing_path",
            ModelError::BrokenRelayPath { .. } => "broken_relay_path",
            ModelError::UnknownNode(_) => "unknown_node",
            ModelError::UnknownLink(_) => "unknown_link",
            ModelError::Invalid(_) => "model_violation",
        }
    }
}

/// The physical links a virtual link rides on, in path order.
pub fn underlying_physical_links(
    topology: &Topology,
    virtual_link: &Link,
) -> Result<Vec<LinkId>, ModelError> {
    if virtual_link.kind != LinkKind::Virtual {
        return Err(ModelError::WrongKind {
            link_id: virtual_link.link_id.clone(),
            expected: LinkKind::Virtual,
        });
    }
    let path = virtual_link
        .path
        .as_ref()
        .ok_or_else(|| ModelError::MissingPath(virtual_link.link_id.clone()))?;
    path.windows(2)
        .map(|hop| {
            topology
                .physical_link_between(&hop[0], &hop[1])
                .map(|l| l.link_id.clone())
                .ok_or_else(|| ModelError::BrokenRelayPath {
                    from: hop[0].clone(),
                    to: hop[1].clone(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, ifaces: &[(&str, InterfaceRole)]) -> NodeDescriptor {
        let mut n = NodeDescriptor::new(id, id);
        for (iface, role) in ifaces {
            n = n.with_interface(QkdInterface::new(*iface, *role, Technology::CV));
        }
        n
    }

    fn phys(id: &str, a: &str, b: &str) -> Link {
        Link::physical(id, a, b, FiberSpec::new(1.0, vec![]), RateProfile::default())
            .with_status(LinkStatus::Active)
    }

    fn chain(n: usize) -> Topology {
        let mut t = Topology::new();
        for i in 0..n {
            t.insert_node(node(&format!("n{i}"), &[]));
        }
        for i in 0..n - 1 {
            t.insert_link(phys(&format!("l{i}"), &format!("n{i}"), &format!("n{}", i + 1)));
        }
        t
    }

    #[test]
    fn empty_topology_is_valid() {
        assert!(validate_topology(&Topology::new()).is_empty());
    }

    #[test]
    fn short_virtual_path_is_flagged() {
        let mut t = chain(2);
        t.insert_link(Link::virtual_link("v", vec!["n0".into(), "n1".into()]));
        let v = validate_topology(&t);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].code, ViolationCode::PathTooShort);
        assert!(v[0].detail.contains("path too short"));
    }

    #[test]
    fn duplicate_interface_ids_are_flagged() {
        let mut t = Topology::new();
        t.insert_node(node(
            "a",
            &[("q0", InterfaceRole::Transmitter), ("q0", InterfaceRole::Receiver)],
        ));
        let v = validate_topology(&t);
        assert_eq!(v.iter().map(|v| v.code).collect::<Vec<_>>(), vec![ViolationCode::DuplicateInterfaceId]);
    }

    #[test]
    fn two_transmitters_on_one_link_is_a_role_mismatch() {
        let mut t = Topology::new();
        let mut a = node("a", &[("tx", InterfaceRole::Transmitter)]);
        let mut b = node("b", &[("tx", InterfaceRole::Transmitter)]);
        a.interfaces[0].attached_link = Some("ab".into());
        b.interfaces[0].attached_link = Some("ab".into());
        t.insert_node(a);
        t.insert_node(b);
        t.insert_link(phys("ab", "a", "b"));
        let v = validate_topology(&t);
        assert_eq!(v.iter().map(|v| v.code).collect::<Vec<_>>(), vec![ViolationCode::RoleMismatch]);
    }

    #[test]
    fn repeated_path_node_and_broken_hop() {
        let mut t = chain(3);
        t.insert_link(Link::virtual_link(
            "v",
            vec!["n0".into(), "n1".into(), "n0".into(), "n2".into()],
        ));
        let codes: BTreeSet<_> = validate_topology(&t).into_iter().map(|v| v.code).collect();
        assert!(codes.contains(&ViolationCode::PathRepeatsNode));
        // n0 -> n2 has no physical link.
        assert!(codes.contains(&ViolationCode::BrokenRelayPath));
    }

    #[test]
    fn validation_is_idempotent() {
        let mut t = chain(3);
        t.insert_link(Link::virtual_link("v", vec!["n0".into(), "n2".into()]));
        let before = t.clone();
        assert_eq!(validate_topology(&t), validate_topology(&t));
        assert_eq!(t, before);
    }

    #[test]
    fn underlying_links_follow_path_order() {
        let t = chain(5);
        let v = Link::virtual_link("v", (0..5).map(|i| format!("n{i}")).collect());
        assert_eq!(
            underlying_physical_links(&t, &v).unwrap(),
            vec!["l0", "l1", "l2", "l3"]
        );
    }

    #[test]
    fn underlying_links_reject_physical_link() {
        let t = chain(2);
        let err = underlying_physical_links(&t, t.link("l0").unwrap()).unwrap_err();
        assert_eq!(err.code(), "wrong_kind");
    }

    #[test]
    fn underlying_links_name_the_broken_pair() {
        let t = chain(3);
        let v = Link::virtual_link("v", vec!["n0".into(), "n2".into(), "n1".into()]);
        match underlying_physical_links(&t, &v).unwrap_err() {
            ModelError::BrokenRelayPath { from, to } => assert_eq!((from.as_str(), to.as_str()), ("n0", "n2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn links_between_prefers_physical() {
        let mut t = chain(2);
        let mut v = Link::virtual_link("a-virtual", vec!["n0".into(), "x".into(), "n1".into()]);
        v.status = LinkStatus::Active;
        t.insert_link(v);
        let found: Vec<_> = t.links_between("n0", "n1").iter().map(|l| l.link_id.clone()).collect();
        assert_eq!(found, vec!["l0", "a-virtual"]);
    }
}
