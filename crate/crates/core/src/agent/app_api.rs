//! Documents of the node-local application endpoint.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::lkms::{DeliveredKey, KeyId, SessionId};
use crate::model::{AppId, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenSessionRequest {
    pub app_id: AppId,
    pub peer_app: AppId,
    pub peer_node: NodeId,
    #[serde(default = "default_key_size")]
    pub key_size_bits: u64,
}

fn default_key_size() -> u64 {
    256
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GetKeyRequest {
    pub session_id: SessionId,
    #[serde(default = "one")]
    pub count: u64,
    pub size_bits: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GetKeyWithIdsRequest {
    pub session_id: SessionId,
    pub key_ids: Vec<KeyId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyDocument {
    pub key_id: KeyId,
    pub key_b64: String,
}

impl KeyDocument {
    pub fn bytes(&self) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(&self.key_b64)
    }
}

impl From<&DeliveredKey> for KeyDocument {
    fn from(k: &DeliveredKey) -> Self {
        Self {
            key_id: k.key_id.clone(),
            key_b64: STANDARD.encode(&k.bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyResponse {
    pub session_id: SessionId,
    pub keys: Vec<KeyDocument>,
}

impl KeyResponse {
    pub fn new(session_id: &str, keys: &[DeliveredKey]) -> Self {
        Self {
            session_id: session_id.to_string(),
            keys: keys.iter().map(KeyDocument::from).collect(),
        }
    }
}
