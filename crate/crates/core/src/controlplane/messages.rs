//! Southbound directives and northbound-bound notifications.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{InterfaceRole, LinkId, NodeId};
use crate::RateProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    CreateLinkEndpoint,
    ActivateLink,
    Teardown,
    SetProfile,
    OpenRelay,
}

/// Configuration change pushed by the controller to one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub directive_id: String,
    pub target_node: NodeId,
    pub kind: DirectiveKind,
    pub payload: Value,
}

/// Payload of `create_link_endpoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointPayload {
    pub link_id: LinkId,
    pub iface_id: String,
    pub role: InterfaceRole,
    pub peer_node: NodeId,
    pub block_bits: u32,
    pub expected_rate_bps: f64,
}

/// Payload of `activate_link` and `teardown`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkRef {
    pub link_id: LinkId,
}

/// Payload of `set_profile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilePayload {
    pub link_id: LinkId,
    pub rate_profile: RateProfile,
    pub expected_rate_bps: f64,
}

/// Payload of `open_relay`, sent to both ends of a virtual link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelayPayload {
    pub link_id: LinkId,
    pub peer_node: NodeId,
    pub path: Vec<NodeId>,
    pub block_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ack,
    Error { code: String, message: String },
}

/// Terminal answer of an agent to a directive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectiveResponse {
    pub directive_id: String,
    pub node_id: NodeId,
    pub outcome: Outcome,
}

impl DirectiveResponse {
    pub fn ack(directive_id: &str, node_id: &str) -> Self {
        Self {
            directive_id: directive_id.to_string(),
            node_id: node_id.to_string(),
            outcome: Outcome::Ack,
        }
    }

    pub fn error(directive_id: &str, node_id: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            directive_id: directive_id.to_string(),
            node_id: node_id.to_string(),
            outcome: Outcome::Error {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    pub fn is_ack(&self) -> bool {
        self.outcome == Outcome::Ack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    AppConnected,
    AppDisconnected,
    LinkStatus,
    KeyLowWatermark,
}

impl NotificationKind {
    pub fn topic(&self) -> &'static str {
        match self {
            NotificationKind::AppConnected => "qkd.app.connected",
            NotificationKind::AppDisconnected => "qkd.app.disconnected",
            NotificationKind::LinkStatus => "qkd.link.status",
            NotificationKind::KeyLowWatermark => "qkd.link.key_low_watermark",
        }
    }
}

/// Event published by an agent. `seq` increases by one per emitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub topic: String,
    pub emitter: NodeId,
    pub kind: NotificationKind,
    pub payload: Value,
    pub seq: u64,
}
