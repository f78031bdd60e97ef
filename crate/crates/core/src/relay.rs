//! Trusted-relay virtual links.
//!
//! A key for a virtual link is drawn at the source and forwarded hop by hop:
//! each hop encrypts it with a one-time pad taken from that hop's physical
//! link, the next node decrypts with its copy of the pad and re-encrypts for
//! the following hop. Intermediate nodes only hold the key transiently and
//! keep nothing but accounting. The key lands in the key stores of the two
//! endpoints under the virtual link id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linksim::{keystream, BlockState, KeyBlock};
use crate::lkms::service::common_available;
use crate::lkms::{format_key_id, DeliveredKey, LkmsDirectory, LkmsError};
use crate::model::{underlying_physical_links, Link, LinkId, LinkKind, LinkStatus, ModelError, NodeId, Topology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelayError {
    #[error("length mismatch: {left} vs {right} bytes")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero-length key refused")]
    ZeroLength,
    #[error("relay length {bits} is not a multiple of the {block_bits}-bit block size")]
    NotBlockAligned { bits: u64, block_bits: u32 },
    #[error("relay key depletion on hop {hop_index} (`{link_id}`): {required_bits} bits required, {available_bits} available")]
    Depletion {
        hop_index: usize,
        link_id: LinkId,
        available_bits: u64,
        required_bits: u64,
    },
    #[error("path too short: a virtual link needs at least one intermediate node")]
    PathTooShort,
    #[error("path must start at `{a}` and end at `{b}`")]
    EndpointsNotExtremes { a: NodeId, b: NodeId },
    #[error("path visits `{0}` twice")]
    CyclicPath(NodeId),
    #[error("link `{0}` already exists")]
    DuplicateLink(LinkId),
    #[error("link `{0}` is not virtual")]
    NotVirtual(LinkId),
    #[error("link `{0}` is not active")]
    Inactive(LinkId),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] LkmsError),
}

impl RelayError {
    pub fn code(&self) -> &'static str {
        match self {
            RelayError::LengthMismatch { .. } => "length_mismatch",
            RelayError::ZeroLength => "zero_length_key",
            RelayError::NotBlockAligned { .. } => "not_block_aligned",
            RelayError::Depletion { .. } => "relay_key_depletion",
            RelayError::PathTooShort => "path_too_short",
            RelayError::EndpointsNotExtremes { .. } => "endpoints_not_extremes",
            RelayError::CyclicPath(_) => "cyclic_path",
            RelayError::DuplicateLink(_) => "duplicate_link",
            RelayError::NotVirtual(_) => "wrong_kind",
            RelayError::Inactive(_) => "link_inactive",
            RelayError::UnknownLink(_) => "unknown_link",
            RelayError::UnknownNode(_) => "unknown_node",
            RelayError::Model(e) => e.code(),
            RelayError::Store(e) => e.code(),
        }
    }
}

/// Bytewise XOR of equal-length strings.
pub fn xor_otp(data: &[u8], pad: &[u8]) -> Result<Vec<u8>, RelayError> {
    if data.len() != pad.len() {
        return Err(RelayError::LengthMismatch {
            left: data.len(),
            right: pad.len(),
        });
    }
    Ok(data.iter().zip(pad).map(|(d, p)| d ^ p).collect())
}

/// Combines a QKD key with a classically agreed key so the result is at
/// least as strong as either input.
pub fn hybrid_combine(qkd_key: &[u8], classical_key: &[u8]) -> Result<Vec<u8>, RelayError> {
    xor_otp(qkd_key, classical_key)
}

/// Accounting left behind by one relayed key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayRecord {
    pub virtual_link_id: LinkId,
    pub delivered_bits: u64,
    /// Bits consumed from each hop link, counted once per link.
    pub per_hop_consumed_bits: BTreeMap<LinkId, u64>,
    pub auth_overhead_bits_per_hop: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayOutcome {
    /// Key as it left the source.
    pub source_key: Vec<u8>,
    /// Key as materialized at the destination.
    pub delivered: DeliveredKey,
    pub record: RelayRecord,
}

/// Source of the random keys drawn at the head of virtual links.
#[derive(Debug, Clone)]
pub struct RelayKeySource {
    seed: u64,
    counters: BTreeMap<LinkId, u64>,
}

const RELAY_DOMAIN: &str = "sdqkd/relay-source";

impl RelayKeySource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counters: BTreeMap::new(),
        }
    }

    pub fn draw(&mut self, virtual_link_id: &str, bytes: usize) -> Vec<u8> {
        let counter = self.counters.entry(virtual_link_id.to_string()).or_insert(0);
        let out = keystream(RELAY_DOMAIN, self.seed, virtual_link_id, *counter, bytes);
        *counter += 1;
        out
    }
}

/// Builds a virtual link over `path` and registers it in `topology` as
/// planned. No key material moves until a relay is requested.
pub fn establish_virtual_link(
    topology: &mut Topology,
    link_id: &str,
    node_a: &str,
    node_b: &str,
    path: &[NodeId],
) -> Result<Link, RelayError> {
    if topology.links.contains_key(link_id) {
        return Err(RelayError::DuplicateLink(link_id.to_string()));
    }
    for n in path {
        if !topology.nodes.contains_key(n) {
            return Err(RelayError::UnknownNode(n.clone()));
        }
    }
    if path.first().map(String::as_str) != Some(node_a) || path.last().map(String::as_str) != Some(node_b) {
        return Err(RelayError::EndpointsNotExtremes {
            a: node_a.to_string(),
            b: node_b.to_string(),
        });
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = path.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(RelayError::CyclicPath(dup.clone()));
    }
    if path.len() < 3 {
        return Err(RelayError::PathTooShort);
    }
    let link = Link::virtual_link(link_id, path.to_vec());
    underlying_physical_links(topology, &link)?;
    topology.insert_link(link.clone());
    Ok(link)
}

struct HopPlan {
    from: NodeId,
    to: NodeId,
    link_id: LinkId,
    block_ids: Vec<u64>,
    block_bits: u64,
}

/// Relays a fresh `length_bits` key from the head of the virtual link to its
/// tail. Every hop is checked for enough material before anything is
/// consumed, so a failure leaves all stores untouched.
pub fn relay_key<D: LkmsDirectory + ?Sized>(
    dir: &mut D,
    topology: &Topology,
    virtual_link_id: &str,
    length_bits: u64,
    auth_overhead_bits_per_hop: u64,
    source: &mut RelayKeySource,
) -> Result<RelayOutcome, RelayError> {
    let vlink = topology
        .link(virtual_link_id)
        .ok_or_else(|| RelayError::UnknownLink(virtual_link_id.to_string()))?;
    if vlink.kind != LinkKind::Virtual {
        return Err(RelayError::NotVirtual(virtual_link_id.to_string()));
    }
    if vlink.status != LinkStatus::Active {
        return Err(RelayError::Inactive(virtual_link_id.to_string()));
    }
    if length_bits == 0 {
        return Err(RelayError::ZeroLength);
    }
    let path = vlink.path.clone().unwrap_or_default();
    let (head, tail) = (vlink.endpoints.0.clone(), vlink.endpoints.1.clone());

    let vblock_bits = {
        let h = dir.lkms(&head).ok_or_else(|| RelayError::UnknownNode(head.clone()))?;
        let t = dir.lkms(&tail).ok_or_else(|| RelayError::UnknownNode(tail.clone()))?;
        let hb = h.store().link(virtual_link_id)?.block_bits();
        let tb = t.store().link(virtual_link_id)?.block_bits();
        if hb != tb {
            return Err(LkmsError::InvalidRequest(format!("block size differs across `{virtual_link_id}` endpoints")).into());
        }
        hb
    };
    if !length_bits.is_multiple_of(vblock_bits as u64) {
        return Err(RelayError::NotBlockAligned {
            bits: length_bits,
            block_bits: vblock_bits,
        });
    }

    // Plan every hop up front.
    let hop_links = underlying_physical_links(topology, vlink)?;
    let needed_bits = length_bits + auth_overhead_bits_per_hop;
    let mut plan = Vec::with_capacity(hop_links.len());
    for (i, (hop, link_id)) in path.windows(2).zip(hop_links).enumerate() {
        let (from, to) = (&hop[0], &hop[1]);
        let block_bits = dir
            .lkms(from)
            .ok_or_else(|| RelayError::UnknownNode(from.clone()))?
            .store()
            .link(&link_id)?
            .block_bits() as u64;
        let available = common_available(dir, &link_id, from, to)?;
        let blocks = needed_bits.div_ceil(block_bits) as usize;
        if available.len() < blocks {
            return Err(RelayError::Depletion {
                hop_index: i,
                link_id,
                available_bits: available.len() as u64 * block_bits,
                required_bits: blocks as u64 * block_bits,
            });
        }
        plan.push(HopPlan {
            from: from.clone(),
            to: to.clone(),
            link_id,
            block_ids: available[..blocks].to_vec(),
            block_bits,
        });
    }

    let key_bytes = (length_bits / 8) as usize;
    let source_key = source.draw(virtual_link_id, key_bytes);

    // Forward: the key exists in clear only inside the node holding it.
    let mut in_hand = source_key.clone();
    let mut per_hop = BTreeMap::new();
    for hop in &plan {
        let ciphertext = {
            let sender = dir.lkms_mut(&hop.from).expect("planned");
            let pad = consume_pad(sender.store_mut(), hop, key_bytes)?;
            xor_otp(&in_hand, &pad)?
        };
        in_hand = {
            let receiver = dir.lkms_mut(&hop.to).expect("planned");
            let pad = consume_pad(receiver.store_mut(), hop, key_bytes)?;
            xor_otp(&ciphertext, &pad)?
        };
        per_hop.insert(hop.link_id.clone(), hop.block_ids.len() as u64 * hop.block_bits);
    }

    // Materialize at both endpoints under the virtual link.
    let first_block = dir.lkms(&head).expect("checked").store().link(virtual_link_id)?.next_block_id();
    let tail_next = dir.lkms(&tail).expect("checked").store().link(virtual_link_id)?.next_block_id();
    if first_block != tail_next {
        return Err(LkmsError::Desynchronized {
            link_id: virtual_link_id.to_string(),
            expected: first_block,
            got: tail_next,
        }
        .into());
    }
    let to_blocks = |key: &[u8]| -> Vec<KeyBlock> {
        key.chunks((vblock_bits / 8) as usize)
            .enumerate()
            .map(|(i, chunk)| KeyBlock {
                block_id: first_block + i as u64,
                link_id: virtual_link_id.to_string(),
                bytes: chunk.to_vec(),
                created_at: 0.0,
                state: BlockState::Available,
            })
            .collect()
    };
    dir.lkms_mut(&head)
        .expect("checked")
        .ingest_blocks(virtual_link_id, to_blocks(&source_key))?;
    dir.lkms_mut(&tail)
        .expect("checked")
        .ingest_blocks(virtual_link_id, to_blocks(&in_hand))?;

    Ok(RelayOutcome {
        delivered: DeliveredKey {
            key_id: format_key_id(virtual_link_id, first_block, length_bits),
            bytes: in_hand,
            session_id: String::new(),
        },
        source_key,
        record: RelayRecord {
            virtual_link_id: virtual_link_id.to_string(),
            delivered_bits: length_bits,
            per_hop_consumed_bits: per_hop,
            auth_overhead_bits_per_hop,
        },
    })
}

fn consume_pad(
    store: &mut crate::lkms::KeyStore,
    hop: &HopPlan,
    key_bytes: usize,
) -> Result<Vec<u8>, RelayError> {
    store.transition(&hop.link_id, &hop.block_ids, BlockState::Available, BlockState::Consumed)?;
    let mut pad = store.assemble(&hop.link_id, &hop.block_ids, hop.block_ids.len() as u64 * hop.block_bits)?;
    pad.truncate(key_bytes);
    Ok(pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lkms::Lkms;
    use crate::model::{FiberSpec, NodeDescriptor};
    use crate::RateProfile;
    use proptest::prelude::*;

    #[test]
    fn xor_truth_table_and_identity() {
        assert_eq!(xor_otp(&[0xFF], &[0x0F]).unwrap(), vec![0xF0]);
        let k = keystream("t", 1, "k", 0, 32);
        assert_eq!(xor_otp(&k, &[0u8; 32]).unwrap(), k);
        let pad = keystream("t", 1, "p", 0, 32);
        assert_eq!(xor_otp(&xor_otp(&k, &pad).unwrap(), &pad).unwrap(), k);
        assert_eq!(xor_otp(&[1, 2], &[1]).unwrap_err().code(), "length_mismatch");
    }

    #[test]
    fn hybrid_examples() {
        let k = keystream("t", 2, "k", 0, 32);
        assert_eq!(hybrid_combine(&k, &[0u8; 32]).unwrap(), k);
        assert_eq!(hybrid_combine(&k, &k).unwrap(), vec![0u8; 32]);
        assert!(hybrid_combine(&k, &k[..31]).is_err());
    }

    proptest! {
        #[test]
        fn xor_is_an_involution(data in prop::collection::vec(any::<u8>(), 0..128), seed in any::<u64>()) {
            let pad = keystream("prop", seed, "pad", 0, data.len());
            let enc = xor_otp(&data, &pad).unwrap();
            prop_assert_eq!(enc.len(), data.len());
            prop_assert_eq!(xor_otp(&enc, &pad).unwrap(), data);
        }

        #[test]
        fn hybrid_is_commutative(a in prop::collection::vec(any::<u8>(), 0..64), seed in any::<u64>()) {
            let b = keystream("prop", seed, "b", 0, a.len());
            prop_assert_eq!(hybrid_combine(&a, &b).unwrap(), hybrid_combine(&b, &a).unwrap());
        }
    }

    fn line(names: &[&str], blocks: u64) -> (Topology, BTreeMap<String, Lkms>) {
        let hops = vec![(blocks, 256); names.len() - 1];
        line_with(names, &hops)
    }

    /// Chain of nodes; hop i holds `hops[i].0` blocks of `hops[i].1` bits.
    fn line_with(names: &[&str], hops: &[(u64, u32)]) -> (Topology, BTreeMap<String, Lkms>) {
        let mut topo = Topology::new();
        let mut dir = BTreeMap::new();
        for n in names {
            topo.insert_node(NodeDescriptor::new(*n, *n));
            dir.insert(n.to_string(), Lkms::new(*n));
        }
        for (w, (blocks, bits)) in names.windows(2).zip(hops) {
            let id = format!("{}{}", w[0], w[1]);
            topo.insert_link(
                Link::physical(&id, w[0], w[1], FiberSpec::new(1.0, vec![]), RateProfile::default())
                    .with_status(LinkStatus::Active),
            );
            for n in w {
                let l = dir.get_mut(*n).unwrap();
                l.store_mut().register_link(&id, *bits).unwrap();
                let bs = (0..*blocks)
                    .map(|b| KeyBlock {
                        block_id: b,
                        link_id: id.clone(),
                        bytes: keystream("line", 0, &id, b, (*bits / 8) as usize),
                        created_at: 0.0,
                        state: BlockState::Available,
                    })
                    .collect();
                l.ingest_blocks(&id, bs).unwrap();
            }
        }
        (topo, dir)
    }

    fn activate(topo: &mut Topology, dir: &mut BTreeMap<String, Lkms>, id: &str) {
        let link = topo.links.get_mut(id).unwrap();
        link.status = LinkStatus::Active;
        let (a, b) = link.endpoints.clone();
        for n in [a, b] {
            dir.get_mut(&n).unwrap().store_mut().register_link(id, 256).unwrap();
        }
    }

    #[test]
    fn establish_examples() {
        let (mut topo, _) = line(&["norte", "almagro", "concepcion"], 0);
        let path: Vec<NodeId> = ["norte", "almagro", "concepcion"].map(String::from).to_vec();
        let link = establish_virtual_link(&mut topo, "v", "norte", "concepcion", &path).unwrap();
        assert_eq!(link.path.as_deref(), Some(&path[..]));
        assert_eq!(link.endpoints, ("norte".to_string(), "concepcion".to_string()));
        assert!(topo.link("v").is_some());

        let looped: Vec<NodeId> = ["norte", "almagro", "norte", "almagro", "concepcion"].map(String::from).to_vec();
        assert_eq!(
            establish_virtual_link(&mut topo, "w", "norte", "concepcion", &looped).unwrap_err().code(),
            "cyclic_path"
        );
        assert_eq!(
            establish_virtual_link(&mut topo, "w", "almagro", "concepcion", &path).unwrap_err().code(),
            "endpoints_not_extremes"
        );
        let short: Vec<NodeId> = ["norte", "almagro"].map(String::from).to_vec();
        assert_eq!(
            establish_virtual_link(&mut topo, "w", "norte", "almagro", &short).unwrap_err().code(),
            "path_too_short"
        );
    }

    #[test]
    fn two_hop_relay_matches_direct_copy() {
        let (mut topo, mut dir) = line(&["b", "c", "d"], 4);
        let path: Vec<NodeId> = ["b", "c", "d"].map(String::from).to_vec();
        establish_virtual_link(&mut topo, "v", "b", "d", &path).unwrap();
        activate(&mut topo, &mut dir, "v");
        let mut src = RelayKeySource::new(5);
        let out = relay_key(&mut dir, &topo, "v", 256, 0, &mut src).unwrap();

        // direct-copy oracle: the source hands K to the destination out of band
        let oracle = RelayKeySource::new(5).draw("v", 32);
        assert_eq!(out.source_key, oracle);
        assert_eq!(out.delivered.bytes, oracle);
        assert_eq!(dir["d"].store().link("v").unwrap().block(0).unwrap().bytes, oracle);
        assert_eq!(dir["b"].store().link("v").unwrap().block(0).unwrap().bytes, oracle);

        for (link, nodes) in [("bc", ["b", "c"]), ("cd", ["c", "d"])] {
            for n in nodes {
                assert_eq!(dir[n].store().counters(link).unwrap().consumed_bits, 256);
            }
            assert_eq!(out.record.per_hop_consumed_bits[link], 256);
        }
        // the intermediate has no store for the virtual link
        assert!(!dir["c"].store().contains("v"));
    }

    #[test]
    fn zero_length_refused() {
        let (mut topo, mut dir) = line(&["b", "c", "d"], 4);
        let path: Vec<NodeId> = ["b", "c", "d"].map(String::from).to_vec();
        establish_virtual_link(&mut topo, "v", "b", "d", &path).unwrap();
        activate(&mut topo, &mut dir, "v");
        let err = relay_key(&mut dir, &topo, "v", 0, 0, &mut RelayKeySource::new(0)).unwrap_err();
        assert_eq!(err.to_string(), "zero-length key refused");
    }

    #[test]
    fn depleted_second_hop_leaves_first_untouched() {
        let (mut topo, mut dir) = line_with(&["b", "c", "d"], &[(4, 256), (1, 128)]);
        let path: Vec<NodeId> = ["b", "c", "d"].map(String::from).to_vec();
        establish_virtual_link(&mut topo, "v", "b", "d", &path).unwrap();
        activate(&mut topo, &mut dir, "v");
        let before = dir.clone();
        match relay_key(&mut dir, &topo, "v", 256, 0, &mut RelayKeySource::new(0)).unwrap_err() {
            RelayError::Depletion { hop_index, link_id, available_bits, required_bits } => {
                assert_eq!((hop_index, link_id.as_str()), (1, "cd"));
                assert_eq!((available_bits, required_bits), (128, 256));
            }
            e => panic!("{e:?}"),
        }
        assert_eq!(dir, before);
    }

    #[test]
    fn overhead_is_charged_per_hop() {
        let (mut topo, mut dir) = line(&["b", "c", "d"], 4);
        let path: Vec<NodeId> = ["b", "c", "d"].map(String::from).to_vec();
        establish_virtual_link(&mut topo, "v", "b", "d", &path).unwrap();
        activate(&mut topo, &mut dir, "v");
        let out = relay_key(&mut dir, &topo, "v", 256, 256, &mut RelayKeySource::new(0)).unwrap();
        assert!(out.record.per_hop_consumed_bits.values().all(|b| *b == 512));
        assert_eq!(out.record.auth_overhead_bits_per_hop, 256);
    }

    #[test]
    fn unaligned_length_rejected() {
        let (mut topo, mut dir) = line(&["b", "c", "d"], 4);
        let path: Vec<NodeId> = ["b", "c", "d"].map(String::from).to_vec();
        establish_virtual_link(&mut topo, "v", "b", "d", &path).unwrap();
        activate(&mut topo, &mut dir, "v");
        let err = relay_key(&mut dir, &topo, "v", 100, 0, &mut RelayKeySource::new(0)).unwrap_err();
        assert_eq!(err.code(), "not_block_aligned");
    }
}
