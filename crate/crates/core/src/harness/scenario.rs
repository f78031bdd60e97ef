use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::DEFAULT_WATERMARK_BITS;
use crate::controlplane::{PhysicalLinkRequest, DEFAULT_GRID_SLOTS};
use crate::linksim::DEFAULT_BLOCK_BITS;
use crate::lkms::AppEndpoint;
use crate::model::{AppId, LinkId, NodeDescriptor, NodeId};
use crate::{FiberSpec, RateProfile, SchedulerConfig};

/// One problem found in a scenario, located by field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioIssue {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid scenario: {}", summarize(.issues))]
pub struct ScenarioError {
    pub issues: Vec<ScenarioIssue>,
}

fn summarize(issues: &[ScenarioIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.path, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        "invalid_scenario"
    }
}

/// How virtual links obtain their key material.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum RelayMode {
    /// Relay exactly the deficit when a session asks for key.
    #[default]
    OnDemand,
    /// Keep every virtual link topped up to `target_bits` at each tick.
    PreProvision { target_bits: u64 },
}

/// Fiber carrying classical traffic only. Reported, never keyed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalLink {
    pub a: NodeId,
    pub b: NodeId,
    pub fiber: FiberSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    ConnectApp {
        node: NodeId,
        app: AppId,
        #[serde(default)]
        peer: Option<AppId>,
    },
    DisconnectApp {
        node: NodeId,
        app: AppId,
    },
    CreateVirtualLink {
        #[serde(default)]
        link_id: Option<LinkId>,
        a: NodeId,
        b: NodeId,
        #[serde(default)]
        min_available_bits: u64,
    },
    RelayKey {
        link_id: LinkId,
        bits: u64,
    },
    /// Opens a session; later actions refer to it by `label`.
    OpenSession {
        label: String,
        initiator: AppEndpoint,
        responder: AppEndpoint,
        #[serde(default = "default_key_size")]
        key_size_bits: u64,
    },
    GetKey {
        session: String,
        #[serde(default = "one")]
        count: u64,
        size_bits: u64,
        /// Let the responder fetch the same keys right away.
        #[serde(default = "yes")]
        fetch_at_peer: bool,
    },
    CloseSession {
        session: String,
    },
    TeardownLink {
        link_id: LinkId,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::ConnectApp { .. } => "connect_app",
            Action::DisconnectApp { .. } => "disconnect_app",
            Action::CreateVirtualLink { .. } => "create_virtual_link",
            Action::RelayKey { .. } => "relay_key",
            Action::OpenSession { .. } => "open_session",
            Action::GetKey { .. } => "get_key",
            Action::CloseSession { .. } => "close_session",
            Action::TeardownLink { .. } => "teardown_link",
        }
    }
}

fn default_key_size() -> u64 {
    256
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadItem {
    pub at_s: f64,
    pub action: Action,
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    /// Key generation tick.
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    #[serde(default = "default_block")]
    pub block_bits: u32,
    #[serde(default = "default_grid")]
    pub grid_slots: u32,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Default profile for links that do not carry their own.
    #[serde(default)]
    pub rate_profile: RateProfile,
    #[serde(default = "default_watermark")]
    pub watermark_bits: u64,
    #[serde(default)]
    pub auth_overhead_bits_per_hop: u64,
    #[serde(default)]
    pub relay_mode: RelayMode,
    #[serde(default)]
    pub nodes: Vec<NodeDescriptor>,
    /// Physical quantum links, created in order before the clock starts.
    #[serde(default)]
    pub links: Vec<PhysicalLinkRequest>,
    #[serde(default)]
    pub classical_links: Vec<ClassicalLink>,
    #[serde(default)]
    pub workload: Vec<WorkloadItem>,
}

fn default_duration() -> f64 {
    10.0
}

fn default_tick() -> f64 {
    0.1
}

fn default_block() -> u32 {
    DEFAULT_BLOCK_BITS
}

fn default_grid() -> u32 {
    DEFAULT_GRID_SLOTS
}

fn default_watermark() -> u64 {
    DEFAULT_WATERMARK_BITS
}

impl Default for Scenario {
    fn default() -> Self {
        crate::document::from_document("{}").expect("every field has a default")
    }
}

impl Scenario {
    /// Checks cross-field consistency. Schema errors are caught earlier by
    /// the decoder.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut issues = Vec::new();
        let mut issue = |path: String, message: String| issues.push(ScenarioIssue { path, message });

        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            issue("duration_s".into(), "must be a finite number >= 0".into());
        }
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            issue("tick_s".into(), "must be positive".into());
        }
        if self.block_bits == 0 || !self.block_bits.is_multiple_of(8) {
            issue("block_bits".into(), "must be a positive multiple of 8".into());
        }
        if let Err(e) = self.scheduler.validate() {
            issue("scheduler".into(), e.to_string());
        }
        if let Err(e) = self.rate_profile.validate() {
            issue("rate_profile".into(), e.to_string());
        }

        let mut nodes = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !nodes.insert(n.node_id.as_str()) {
                issue(format!("nodes[{i}].node_id"), format!("duplicate node `{}`", n.node_id));
            }
        }
        let check_node = |path: String, node: &str, issue: &mut dyn FnMut(String, String)| {
            if !nodes.contains(node) {
                issue(path, format!("unknown node `{node}`"));
            }
        };

        if self.links.is_empty() {
            issue("links".into(), "no links".into());
        }
        for (i, l) in self.links.iter().enumerate() {
            check_node(format!("links[{i}].a.node_id"), &l.a.node_id, &mut issue);
            check_node(format!("links[{i}].b.node_id"), &l.b.node_id, &mut issue);
        }
        for (i, l) in self.classical_links.iter().enumerate() {
            check_node(format!("classical_links[{i}].a"), &l.a, &mut issue);
            check_node(format!("classical_links[{i}].b"), &l.b, &mut issue);
        }

        let connected: BTreeSet<(&str, &str)> = self
            .workload
            .iter()
            .filter_map(|w| match &w.action {
                Action::ConnectApp { node, app, .. } => Some((node.as_str(), app.as_str())),
                _ => None,
            })
            .collect();
        let labels: BTreeSet<&str> = self
            .workload
            .iter()
            .filter_map(|w| match &w.action {
                Action::OpenSession { label, .. } => Some(label.as_str()),
                _ => None,
            })
            .collect();
        for (i, w) in self.workload.iter().enumerate() {
            let base = format!("workload[{i}]");
            if !(w.at_s.is_finite() && w.at_s >= 0.0) {
                issue(format!("{base}.at_s"), "must be a finite number >= 0".into());
            }
            let app_known = |path: String, e: &AppEndpoint, issue: &mut dyn FnMut(String, String)| {
                if !connected.contains(&(e.node_id.as_str(), e.app_id.as_str())) {
                    issue(path, format!("unknown app `{e}`"));
                }
            };
            match &w.action {
                Action::ConnectApp { node, .. } | Action::DisconnectApp { node, .. } => {
                    check_node(format!("{base}.action.node"), node, &mut issue)
                }
                Action::CreateVirtualLink { a, b, .. } => {
                    check_node(format!("{base}.action.a"), a, &mut issue);
                    check_node(format!("{base}.action.b"), b, &mut issue);
                }
                Action::OpenSession {
                    initiator, responder, ..
                } => {
                    check_node(format!("{base}.action.initiator.node_id"), &initiator.node_id, &mut issue);
                    check_node(format!("{base}.action.responder.node_id"), &responder.node_id, &mut issue);
                    app_known(format!("{base}.action.initiator"), initiator, &mut issue);
                    app_known(format!("{base}.action.responder"), responder, &mut issue);
                }
                Action::GetKey { session, .. } | Action::CloseSession { session } => {
                    if !labels.contains(session.as_str()) {
                        issue(format!("{base}.action.session"), format!("no session labelled `{session}`"));
                    }
                }
                Action::RelayKey { .. } | Action::TeardownLink { .. } => {}
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError { issues })
        }
    }
}

/// Decodes and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, crate::Error> {
    let scenario: Scenario = crate::document::from_document(text)?;
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_rejected_for_lack_of_links() {
        match load_scenario("{}").unwrap_err() {
            crate::Error::Scenario(e) => {
                assert_eq!(e.issues.len(), 1);
                assert_eq!(e.issues[0].path, "links");
                assert_eq!(e.issues[0].message, "no links");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_field_is_named() {
        let err = load_scenario(r#"{"seed":1,"durration_s":3}"#).unwrap_err();
        assert_eq!(err.code(), "schema_violation");
        assert!(err.to_string().contains("durration_s"), "{err}");
    }

    #[test]
    fn nested_schema_error_has_a_path() {
        let err = load_scenario(r#"{"workload":[{"at_s":1,"action":{"type":"relay_key","link_id":"v","bits":"x"}}]}"#)
            .unwrap_err();
        match err {
            crate::Error::Document(d) => assert!(d.path.starts_with("workload[0].action"), "{}", d.path),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn defaults_are_filled() {
        let s = Scenario::default();
        assert_eq!(s.duration_s, 10.0);
        assert_eq!(s.tick_s, 0.1);
        assert_eq!(s.block_bits, 256);
        assert_eq!(s.watermark_bits, 4096);
        assert_eq!(s.relay_mode, RelayMode::OnDemand);
        assert_eq!(s.scheduler.calibration_fraction, 0.5);
    }

    #[test]
    fn workload_must_reference_known_nodes_and_apps() {
        let mut s = crate::harness::madrid_scenario();
        s.workload.push(WorkloadItem {
            at_s: 4.0,
            action: Action::ConnectApp {
                node: "sol".into(),
                app: "x".into(),
                peer: None,
            },
        });
        s.workload.push(WorkloadItem {
            at_s: 4.0,
            action: Action::OpenSession {
                label: "s2".into(),
                initiator: AppEndpoint::new("ghost", "norte"),
                responder: AppEndpoint::new("enc-concepcion", "concepcion"),
                key_size_bits: 256,
            },
        });
        let err = s.validate().unwrap_err();
        let paths: Vec<_> = err.issues.iter().map(|i| i.path.as_str()).collect();
        assert!(paths.iter().any(|p| p.ends_with(".action.node")), "{paths:?}");
        assert!(paths.iter().any(|p| p.ends_with(".action.initiator")), "{paths:?}");
    }
}
