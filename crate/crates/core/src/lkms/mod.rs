//! Local Key Management System.
//!
//! Each node runs one [`Lkms`]: a [`KeyStore`] with the synchronized blocks
//! of every link ending at the node, the node's half of each key session,
//! and the keys it has handed to applications. [`KeyService`] coordinates
//! the two halves of a session; the only thing exchanged between nodes is
//! block ids, never key bytes.

pub(crate) mod service;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linksim::BlockState;
use crate::model::{AppId, LinkId, NodeId};

pub use service::{ApplicationDirectory, KeyService, LkmsDirectory};
pub use store::{KeyCounters, KeyStore, LinkKeys};

pub type SessionId = String;
pub type KeyId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LkmsError {
    #[error("desynchronized link `{link_id}`: expected block {expected}, got {got}; restart the link")]
    Desynchronized { link_id: LinkId, expected: u64, got: u64 },
    #[error("no key association between `{0}` and `{1}`")]
    NoKeyAssociation(NodeId, NodeId),
    #[error("unregistered application `{app_id}` at `{node_id}`")]
    UnregisteredApplication { app_id: AppId, node_id: NodeId },
    #[error("key depletion: {requested_bits} bits requested, {available_bits} available")]
    KeyDepletion { available_bits: u64, requested_bits: u64 },
    #[error("role violation: `{0}` may not perform this call")]
    RoleViolation(AppId),
    #[error("unknown key id `{0}`")]
    UnknownKeyId(KeyId),
    #[error("key replay refused for `{0}`")]
    KeyReplayRefused(KeyId),
    #[error("unknown session `{0}`")]
    UnknownSession(SessionId),
    #[error("session `{0}` is closed")]
    SessionClosed(SessionId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("block {block_id} of `{link_id}` is {actual:?}, expected {expected:?}")]
    BlockState {
        link_id: LinkId,
        block_id: u64,
        expected: BlockState,
        actual: BlockState,
    },
    #[error("block {block_id} of `{link_id}` not present")]
    BlockMissing { link_id: LinkId, block_id: u64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LkmsError {
    pub fn code(&self) -> &'static str {
        match self {
            LkmsError::Desynchronized { .. } => "desynchronized_link",
            LkmsError::NoKeyAssociation(..) => "no_key_association",
            LkmsError::UnregisteredApplication { .. } => "unregistered_application",
            LkmsError::KeyDepletion { .. } => "key_depletion",
            LkmsError::RoleViolation(_) => "role_violation",
            LkmsError::UnknownKeyId(_) => "unknown_key_id",
            LkmsError::KeyReplayRefused(_) => "key_replay_refused",
            LkmsError::UnknownSession(_) => "unknown_session",
            LkmsError::SessionClosed(_) => "session_closed",
            LkmsError::UnknownLink(_) => "unknown_link",
            LkmsError::UnknownNode(_) => "unknown_node",
            LkmsError::BlockState { .. } => "block_state",
            LkmsError::BlockMissing { .. } => "block_missing",
            LkmsError::InvalidRequest(_) => "invalid_request",
        }
    }
}

/// An application bound to a node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppEndpoint {
    pub app_id: AppId,
    pub node_id: NodeId,
}

impl AppEndpoint {
    pub fn new(app_id: impl Into<String>, node_id: impl Into<String>) -> Self {
        Self {
            app_id: app_id.into(),
            node_id: node_id.into(),
        }
    }
}

impl std::fmt::Display for AppEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.app_id, self.node_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Qos {
    pub key_size_bits: u64,
    pub min_rate_bps: f64,
}

impl Default for Qos {
    fn default() -> Self {
        Self {
            key_size_bits: 256,
            min_rate_bps: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySession {
    pub session_id: SessionId,
    pub initiator_app: AppId,
    pub responder_app: AppId,
    pub initiator_node: NodeId,
    pub responder_node: NodeId,
    pub serving_link: LinkId,
    pub qos: Qos,
    pub state: SessionState,
}

/// Key material handed to an application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredKey {
    pub key_id: KeyId,
    pub bytes: Vec<u8>,
    pub session_id: SessionId,
}

/// Key id format: `link_id:first_block_id:size_bits`.
pub fn format_key_id(link_id: &str, first_block: u64, size_bits: u64) -> KeyId {
    format!("{link_id}:{first_block}:{size_bits}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionRole {
    Initiator,
    Responder,
}

/// Blocks backing one key id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyAllocation {
    pub key_id: KeyId,
    pub block_ids: Vec<u64>,
    pub size_bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct SessionEnd {
    session: KeySession,
    role: SessionRole,
    /// Responder side: allocations announced by the initiator, keyed by id,
    /// with whether they were fetched already.
    allocations: BTreeMap<KeyId, (KeyAllocation, bool)>,
    issued: u64,
}

/// One node's key management system.
#[derive(Debug, Clone, PartialEq)]
pub struct Lkms {
    node_id: NodeId,
    store: KeyStore,
    sessions: BTreeMap<SessionId, SessionEnd>,
    delivered: BTreeMap<KeyId, DeliveredKey>,
}

impl Lkms {
    pub fn new(node_id: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            store: KeyStore::new(),
            sessions: BTreeMap::new(),
            delivered: BTreeMap::new(),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn store(&self) -> &KeyStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut KeyStore {
        &mut self.store
    }

    /// Keys this node has handed to its applications.
    pub fn delivered(&self) -> impl Iterator<Item = &DeliveredKey> {
        self.delivered.values()
    }

    pub fn delivered_key(&self, key_id: &str) -> Option<&DeliveredKey> {
        self.delivered.get(key_id)
    }

    pub fn session(&self, session_id: &str) -> Option<(&KeySession, SessionRole)> {
        self.sessions.get(session_id).map(|s| (&s.session, s.role))
    }

    pub fn sessions(&self) -> impl Iterator<Item = (&KeySession, SessionRole)> {
        self.sessions.values().map(|s| (&s.session, s.role))
    }

    pub fn available_bits(&self, link_id: &str) -> Result<u64, LkmsError> {
        self.store.available_bits(link_id)
    }

    pub fn ingest_blocks(
        &mut self,
        link_id: &str,
        blocks: Vec<crate::linksim::KeyBlock>,
    ) -> Result<KeyCounters, LkmsError> {
        self.store.ingest_blocks(link_id, blocks)
    }

    pub(crate) fn open_session_end(&mut self, session: KeySession, role: SessionRole) -> Result<(), LkmsError> {
        if !self.store.contains(&session.serving_link) {
            return Err(LkmsError::UnknownLink(session.serving_link.clone()));
        }
        self.sessions.insert(
            session.session_id.clone(),
            SessionEnd {
                session,
                role,
                allocations: BTreeMap::new(),
                issued: 0,
            },
        );
        Ok(())
    }

    fn open_end(&self, session_id: &str) -> Result<&SessionEnd, LkmsError> {
        let end = self
            .sessions
            .get(session_id)
            .ok_or_else(|| LkmsError::UnknownSession(session_id.to_string()))?;
        if end.session.state == SessionState::Closed {
            return Err(LkmsError::SessionClosed(session_id.to_string()));
        }
        Ok(end)
    }

    /// Initiator side: consumes the chosen blocks and builds the keys.
    /// `chosen` holds one block id list per key.
    pub(crate) fn allocate(
        &mut self,
        session_id: &str,
        app_id: &str,
        chosen: &[Vec<u64>],
        size_bits: u64,
    ) -> Result<Vec<(DeliveredKey, KeyAllocation)>, LkmsError> {
        let end = self.open_end(session_id)?;
        if end.role != SessionRole::Initiator || end.session.initiator_app != app_id {
            return Err(LkmsError::RoleViolation(app_id.to_string()));
        }
        let link = end.session.serving_link.clone();
        let flat: Vec<u64> = chosen.iter().flatten().copied().collect();
        self.store
            .transition(&link, &flat, BlockState::Available, BlockState::Consumed)?;
        let mut out = Vec::with_capacity(chosen.len());
        for ids in chosen {
            let bytes = self.store.assemble(&link, ids, size_bits)?;
            let key_id = format_key_id(&link, ids[0], size_bits);
            let key = DeliveredKey {
                key_id: key_id.clone(),
                bytes,
                session_id: session_id.to_string(),
            };
            self.delivered.insert(key_id.clone(), key.clone());
            out.push((
                key,
                KeyAllocation {
                    key_id,
                    block_ids: ids.clone(),
                    size_bits,
                },
            ));
        }
        let end = self.sessions.get_mut(session_id).expect("checked above");
        end.issued += out.len() as u64;
        Ok(out)
    }

    /// Responder side: sets aside the blocks the initiator consumed.
    pub(crate) fn reserve(&mut self, session_id: &str, allocations: &[KeyAllocation]) -> Result<(), LkmsError> {
        let end = self.open_end(session_id)?;
        if end.role != SessionRole::Responder {
            return Err(LkmsError::InvalidRequest(format!(
                "`{}` is not the responder of `{session_id}`",
                self.node_id
            )));
        }
        let link = end.session.serving_link.clone();
        if let Some(dup) = allocations.iter().find(|a| end.allocations.contains_key(&a.key_id)) {
            return Err(LkmsError::InvalidRequest(format!("key id `{}` announced twice", dup.key_id)));
        }
        let flat: Vec<u64> = allocations.iter().flat_map(|a| a.block_ids.iter().copied()).collect();
        self.store
            .transition(&link, &flat, BlockState::Available, BlockState::Reserved)?;
        let end = self.sessions.get_mut(session_id).expect("checked above");
        for a in allocations {
            end.allocations.insert(a.key_id.clone(), (a.clone(), false));
        }
        Ok(())
    }

    /// Responder side: hands out the reserved keys by id.
    pub(crate) fn fetch(
        &mut self,
        session_id: &str,
        app_id: &str,
        key_ids: &[KeyId],
    ) -> Result<Vec<DeliveredKey>, LkmsError> {
        let end = self.open_end(session_id)?;
        if end.role != SessionRole::Responder || end.session.responder_app != app_id {
            return Err(LkmsError::RoleViolation(app_id.to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in key_ids {
            match end.allocations.get(id) {
                None => return Err(LkmsError::UnknownKeyId(id.clone())),
                Some((_, true)) => return Err(LkmsError::KeyReplayRefused(id.clone())),
                Some((_, false)) if !seen.insert(id) => return Err(LkmsError::KeyReplayRefused(id.clone())),
                Some(_) => {}
            }
        }
        let link = end.session.serving_link.clone();
        let allocations: Vec<KeyAllocation> = key_ids.iter().map(|id| end.allocations[id].0.clone()).collect();
        let flat: Vec<u64> = allocations.iter().flat_map(|a| a.block_ids.iter().copied()).collect();
        self.store
            .transition(&link, &flat, BlockState::Reserved, BlockState::Consumed)?;
        let mut out = Vec::with_capacity(allocations.len());
        for a in &allocations {
            let key = DeliveredKey {
                key_id: a.key_id.clone(),
                bytes: self.store.assemble(&link, &a.block_ids, a.size_bits)?,
                session_id: session_id.to_string(),
            };
            self.delivered.insert(a.key_id.clone(), key.clone());
            out.push(key);
        }
        let end = self.sessions.get_mut(session_id).expect("checked above");
        for id in key_ids {
            if let Some(entry) = end.allocations.get_mut(id) {
                entry.1 = true;
            }
        }
        end.issued += out.len() as u64;
        Ok(out)
    }

    /// Closes this node's half. Unfetched reservations return to available.
    pub(crate) fn close_session_end(&mut self, session_id: &str) -> Result<(), LkmsError> {
        let end = self.open_end(session_id)?;
        let link = end.session.serving_link.clone();
        let pending: Vec<u64> = end
            .allocations
            .values()
            .filter(|(_, fetched)| !fetched)
            .flat_map(|(a, _)| a.block_ids.iter().copied())
            .collect();
        if self.store.contains(&link) {
            self.store
                .transition(&link, &pending, BlockState::Reserved, BlockState::Available)?;
        }
        let end = self.sessions.get_mut(session_id).expect("checked above");
        end.session.state = SessionState::Closed;
        end.allocations.retain(|_, (_, fetched)| *fetched);
        Ok(())
    }

    /// Key ids announced to this responder and not fetched yet.
    pub fn pending_key_ids(&self, session_id: &str) -> Vec<KeyId> {
        self.sessions
            .get(session_id)
            .map(|end| {
                end.allocations
                    .iter()
                    .filter(|(_, (_, fetched))| !fetched)
                    .map(|(id, _)| id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Drops every key of `link_id` that is held in the delivered table or
    /// store. Used on link teardown.
    pub(crate) fn forget_link(&mut self, link_id: &str) {
        self.store.remove_link(link_id);
    }
}
