use std::collections::BTreeMap;

use super::{
    AppEndpoint, DeliveredKey, KeyId, KeySession, Lkms, LkmsError, Qos, SessionId, SessionRole, SessionState,
};
use crate::model::Topology;

/// Access to the LKMS instances of the network, one per node.
pub trait LkmsDirectory {
    fn lkms(&self, node_id: &str) -> Option<&Lkms>;
    fn lkms_mut(&mut self, node_id: &str) -> Option<&mut Lkms>;
}

impl LkmsDirectory for BTreeMap<String, Lkms> {
    fn lkms(&self, node_id: &str) -> Option<&Lkms> {
        self.get(node_id)
    }

    fn lkms_mut(&mut self, node_id: &str) -> Option<&mut Lkms> {
        self.get_mut(node_id)
    }
}

/// Registry of applications known to the controller.
pub trait ApplicationDirectory {
    fn is_registered(&self, node_id: &str, app_id: &str) -> bool;
}

impl ApplicationDirectory for std::collections::BTreeSet<AppEndpoint> {
    fn is_registered(&self, node_id: &str, app_id: &str) -> bool {
        self.contains(&AppEndpoint::new(app_id, node_id))
    }
}

fn node<'a, D: LkmsDirectory + ?Sized>(dir: &'a D, node_id: &str) -> Result<&'a Lkms, LkmsError> {
    dir.lkms(node_id)
        .ok_or_else(|| LkmsError::UnknownNode(node_id.to_string()))
}

fn node_mut<'a, D: LkmsDirectory + ?Sized>(dir: &'a mut D, node_id: &str) -> Result<&'a mut Lkms, LkmsError> {
    dir.lkms_mut(node_id)
        .ok_or_else(|| LkmsError::UnknownNode(node_id.to_string()))
}

/// Block ids available at both ends of `link_id`, in order.
pub(crate) fn common_available<D: LkmsDirectory + ?Sized>(
    dir: &D,
    link_id: &str,
    a: &str,
    b: &str,
) -> Result<Vec<u64>, LkmsError> {
    let la = node(dir, a)?.store().link(link_id)?;
    let lb = node(dir, b)?.store().link(link_id)?;
    Ok(la.available_ids().filter(|id| lb.is_available(*id)).collect())
}

/// Session bookkeeping that spans two LKMS instances.
///
/// Only the initiator allocates key ids; the responder learns them through a
/// reservation message and serves them on request.
#[derive(Debug, Clone, Default)]
pub struct KeyService {
    sessions: BTreeMap<SessionId, KeySession>,
    next_session: u64,
}

impl KeyService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session(&self, session_id: &str) -> Option<&KeySession> {
        self.sessions.get(session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &KeySession> {
        self.sessions.values()
    }

    /// Opens a session between two registered applications on the best
    /// active link between their nodes: physical before virtual, then
    /// lowest link id.
    pub fn open_session<D: LkmsDirectory + ?Sized, R: ApplicationDirectory + ?Sized>(
        &mut self,
        dir: &mut D,
        registry: &R,
        topology: &Topology,
        initiator: &AppEndpoint,
        responder: &AppEndpoint,
        qos: Qos,
    ) -> Result<KeySession, LkmsError> {
        for end in [initiator, responder] {
            if !registry.is_registered(&end.node_id, &end.app_id) {
                return Err(LkmsError::UnregisteredApplication {
                    app_id: end.app_id.clone(),
                    node_id: end.node_id.clone(),
                });
            }
        }
        let no_association = || LkmsError::NoKeyAssociation(initiator.node_id.clone(), responder.node_id.clone());
        if initiator.node_id == responder.node_id {
            return Err(no_association());
        }
        let serving = topology
            .links_between(&initiator.node_id, &responder.node_id)
            .into_iter()
            .find(|l| {
                dir.lkms(&initiator.node_id).is_some_and(|n| n.store().contains(&l.link_id))
                    && dir.lkms(&responder.node_id).is_some_and(|n| n.store().contains(&l.link_id))
            })
            .ok_or_else(no_association)?;

        let session = KeySession {
            session_id: format!("session-{}", self.next_session),
            initiator_app: initiator.app_id.clone(),
            responder_app: responder.app_id.clone(),
            initiator_node: initiator.node_id.clone(),
            responder_node: responder.node_id.clone(),
            serving_link: serving.link_id.clone(),
            qos,
            state: SessionState::Open,
        };
        node_mut(dir, &initiator.node_id)?.open_session_end(session.clone(), SessionRole::Initiator)?;
        node_mut(dir, &responder.node_id)?.open_session_end(session.clone(), SessionRole::Responder)?;
        self.next_session += 1;
        self.sessions.insert(session.session_id.clone(), session.clone());
        Ok(session)
    }

    fn open(&self, session_id: &str) -> Result<&KeySession, LkmsError> {
        let s = self
            .sessions
            .get(session_id)
            .ok_or_else(|| LkmsError::UnknownSession(session_id.to_string()))?;
        if s.state == SessionState::Closed {
            return Err(LkmsError::SessionClosed(session_id.to_string()));
        }
        Ok(s)
    }

    /// Bits the session could draw right now.
    pub fn session_available_bits<D: LkmsDirectory + ?Sized>(&self, dir: &D, session_id: &str) -> Result<u64, LkmsError> {
        let s = self.open(session_id)?;
        let bits = node(dir, &s.initiator_node)?.store().link(&s.serving_link)?.block_bits() as u64;
        Ok(common_available(dir, &s.serving_link, &s.initiator_node, &s.responder_node)?.len() as u64 * bits)
    }

    /// Bits a `get_key(count, size_bits)` call consumes, block-rounded.
    pub fn bits_needed<D: LkmsDirectory + ?Sized>(
        &self,
        dir: &D,
        session_id: &str,
        count: u64,
        size_bits: u64,
    ) -> Result<u64, LkmsError> {
        let s = self.open(session_id)?;
        let bits = node(dir, &s.initiator_node)?.store().link(&s.serving_link)?.block_bits() as u64;
        Ok(count * size_bits.div_ceil(bits) * bits)
    }

    /// Initiator call. Draws `count` keys of `size_bits` each; every key
    /// consumes whole blocks and surplus bits of its last block are dropped.
    pub fn get_key<D: LkmsDirectory + ?Sized>(
        &mut self,
        dir: &mut D,
        session_id: &str,
        caller_app: &str,
        count: u64,
        size_bits: u64,
    ) -> Result<Vec<DeliveredKey>, LkmsError> {
        let s = self.open(session_id)?.clone();
        if caller_app != s.initiator_app {
            return Err(LkmsError::RoleViolation(caller_app.to_string()));
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        if size_bits == 0 {
            return Err(LkmsError::InvalidRequest("size_bits must be positive".into()));
        }
        let block_bits = node(dir, &s.initiator_node)?.store().link(&s.serving_link)?.block_bits() as u64;
        let per_key = size_bits.div_ceil(block_bits) as usize;
        let needed = per_key * count as usize;
        let available = common_available(dir, &s.serving_link, &s.initiator_node, &s.responder_node)?;
        if available.len() < needed {
            return Err(LkmsError::KeyDepletion {
                available_bits: available.len() as u64 * block_bits,
                requested_bits: needed as u64 * block_bits,
            });
        }
        let chosen: Vec<Vec<u64>> = available[..needed].chunks(per_key).map(<[u64]>::to_vec).collect();
        let issued = node_mut(dir, &s.initiator_node)?.allocate(session_id, caller_app, &chosen, size_bits)?;
        let allocations: Vec<_> = issued.iter().map(|(_, a)| a.clone()).collect();
        node_mut(dir, &s.responder_node)?.reserve(session_id, &allocations)?;
        Ok(issued.into_iter().map(|(k, _)| k).collect())
    }

    /// Responder call. Returns the keys the initiator drew under `key_ids`.
    pub fn get_key_with_ids<D: LkmsDirectory + ?Sized>(
        &mut self,
        dir: &mut D,
        session_id: &str,
        caller_app: &str,
        key_ids: &[KeyId],
    ) -> Result<Vec<DeliveredKey>, LkmsError> {
        let s = self.open(session_id)?.clone();
        if caller_app != s.responder_app {
            return Err(LkmsError::RoleViolation(caller_app.to_string()));
        }
        node_mut(dir, &s.responder_node)?.fetch(session_id, caller_app, key_ids)
    }

    pub fn close_session<D: LkmsDirectory + ?Sized>(&mut self, dir: &mut D, session_id: &str) -> Result<(), LkmsError> {
        let s = self.open(session_id)?.clone();
        node_mut(dir, &s.initiator_node)?.close_session_end(session_id)?;
        node_mut(dir, &s.responder_node)?.close_session_end(session_id)?;
        if let Some(s) = self.sessions.get_mut(session_id) {
            s.state = SessionState::Closed;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::linksim::{BlockState, KeyBlock};
    use crate::model::{FiberSpec, Link, LinkStatus};
    use crate::RateProfile;

    const BLOCK: u32 = 256;

    struct Fixture {
        dir: BTreeMap<String, Lkms>,
        apps: BTreeSet<AppEndpoint>,
        topo: Topology,
        svc: KeyService,
    }

    fn blocks(link: &str, ids: std::ops::Range<u64>) -> Vec<KeyBlock> {
        ids.map(|id| KeyBlock {
            block_id: id,
            link_id: link.into(),
            bytes: crate::linksim::keystream("test", 0, link, id, (BLOCK / 8) as usize),
            created_at: 0.0,
            state: BlockState::Available,
        })
        .collect()
    }

    fn fixture(n_blocks: u64) -> Fixture {
        let mut dir = BTreeMap::new();
        for n in ["a", "b", "c"] {
            dir.insert(n.to_string(), Lkms::new(n));
        }
        let mut topo = Topology::new();
        topo.insert_link(
            Link::physical("ab", "a", "b", FiberSpec::new(1.0, vec![]), RateProfile::default())
                .with_status(LinkStatus::Active),
        );
        for n in ["a", "b"] {
            let l = dir.get_mut(n).unwrap();
            l.store_mut().register_link("ab", BLOCK).unwrap();
            l.ingest_blocks("ab", blocks("ab", 0..n_blocks)).unwrap();
        }
        let apps = [("x", "a"), ("y", "b"), ("z", "c"), ("w", "a")]
            .into_iter()
            .map(|(app, n)| AppEndpoint::new(app, n))
            .collect();
        Fixture {
            dir,
            apps,
            topo,
            svc: KeyService::new(),
        }
    }

    impl Fixture {
        fn open(&mut self) -> KeySession {
            self.svc
                .open_session(
                    &mut self.dir,
                    &self.apps,
                    &self.topo,
                    &AppEndpoint::new("x", "a"),
                    &AppEndpoint::new("y", "b"),
                    Qos::default(),
                )
                .unwrap()
        }

        fn counters(&self, node: &str) -> crate::lkms::KeyCounters {
            self.dir[node].store().counters("ab").unwrap()
        }
    }

    #[test]
    fn single_key_decrements_both_stores() {
        let mut f = fixture(10);
        let s = f.open();
        let keys = f.svc.get_key(&mut f.dir, &s.session_id, "x", 1, 256).unwrap();
        assert_eq!(keys.len(), 1);
        assert_eq!(keys[0].key_id, "ab:0:256");
        assert_eq!(f.counters("a").available_bits, 2560 - 256);
        assert_eq!(f.counters("b").available_bits, 2560 - 256);
        assert_eq!(f.counters("b").reserved_bits, 256);

        let fetched = f.svc.get_key_with_ids(&mut f.dir, &s.session_id, "y", &[keys[0].key_id.clone()]).unwrap();
        assert_eq!(fetched[0].bytes, keys[0].bytes);
        assert_eq!(f.counters("b").consumed_bits, 256);
    }

    #[test]
    fn zero_count_changes_nothing() {
        let mut f = fixture(4);
        let s = f.open();
        let before = f.dir.clone();
        assert!(f.svc.get_key(&mut f.dir, &s.session_id, "x", 0, 256).unwrap().is_empty());
        assert_eq!(f.dir, before);
    }

    #[test]
    fn sequential_keys_use_disjoint_blocks() {
        let mut f = fixture(4);
        let s = f.open();
        let k1 = f.svc.get_key(&mut f.dir, &s.session_id, "x", 1, 256).unwrap();
        let k2 = f.svc.get_key(&mut f.dir, &s.session_id, "x", 1, 256).unwrap();
        assert_ne!(k1[0].key_id, k2[0].key_id);
        assert_eq!((k1[0].key_id.as_str(), k2[0].key_id.as_str()), ("ab:0:256", "ab:1:256"));
    }

    #[test]
    fn surplus_bits_are_discarded() {
        let mut f = fixture(10);
        let s = f.open();
        let k = f.svc.get_key(&mut f.dir, &s.session_id, "x", 1, 300).unwrap();
        assert_eq!(k[0].bytes.len(), 38);
        assert_eq!(f.dir["a"].available_bits("ab").unwrap(), 2560 - 512);
    }

    #[test]
    fn depletion_reports_available_bits() {
        let mut f = fixture(2);
        let s = f.open();
        match f.svc.get_key(&mut f.dir, &s.session_id, "x", 3, 256).unwrap_err() {
            LkmsError::KeyDepletion { available_bits, requested_bits } => {
                assert_eq!((available_bits, requested_bits), (512, 768));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn responder_cannot_allocate() {
        let mut f = fixture(2);
        let s = f.open();
        let err = f.svc.get_key(&mut f.dir, &s.session_id, "y", 1, 256).unwrap_err();
        assert_eq!(err.code(), "role_violation");
        let k = f.svc.get_key(&mut f.dir, &s.session_id, "x", 1, 256).unwrap();
        let err = f.svc.get_key_with_ids(&mut f.dir, &s.session_id, "x", &[k[0].key_id.clone()]).unwrap_err();
        assert_eq!(err.code(), "role_violation");
    }

    #[test]
    fn replay_and_unknown_ids() {
        let mut f = fixture(4);
        let s = f.open();
        let k = f.svc.get_key(&mut f.dir, &s.session_id, "x", 1, 256).unwrap();
        let id = vec![k[0].key_id.clone()];
        f.svc.get_key_with_ids(&mut f.dir, &s.session_id, "y", &id).unwrap();
        let err = f.svc.get_key_with_ids(&mut f.dir, &s.session_id, "y", &id).unwrap_err();
        assert_eq!(err.code(), "key_replay_refused");
        let err = f.svc.get_key_with_ids(&mut f.dir, &s.session_id, "y", &["ab:9:256".into()]).unwrap_err();
        assert_eq!(err.code(), "unknown_key_id");
    }

    #[test]
    fn out_of_order_fetch() {
        let mut f = fixture(6);
        let s = f.open();
        let keys = f.svc.get_key(&mut f.dir, &s.session_id, "x", 3, 256).unwrap();
        let mut ids: Vec<KeyId> = keys.iter().map(|k| k.key_id.clone()).collect();
        ids.reverse();
        let fetched = f.svc.get_key_with_ids(&mut f.dir, &s.session_id, "y", &ids).unwrap();
        for (got, want) in fetched.iter().zip(keys.iter().rev()) {
            assert_eq!(got.key_id, want.key_id);
            assert_eq!(got.bytes, want.bytes);
        }
    }

    #[test]
    fn session_setup_errors() {
        let mut f = fixture(1);
        let same = f.svc.open_session(
            &mut f.dir,
            &f.apps,
            &f.topo,
            &AppEndpoint::new("x", "a"),
            &AppEndpoint::new("w", "a"),
            Qos::default(),
        );
        assert_eq!(same.unwrap_err().code(), "no_key_association");
        let no_link = f.svc.open_session(
            &mut f.dir,
            &f.apps,
            &f.topo,
            &AppEndpoint::new("x", "a"),
            &AppEndpoint::new("z", "c"),
            Qos::default(),
        );
        assert_eq!(no_link.unwrap_err().code(), "no_key_association");
        let unknown = f.svc.open_session(
            &mut f.dir,
            &f.apps,
            &f.topo,
            &AppEndpoint::new("ghost", "a"),
            &AppEndpoint::new("y", "b"),
            Qos::default(),
        );
        assert_eq!(unknown.unwrap_err().code(), "unregistered_application");
    }

    #[test]
    fn close_returns_unfetched_reservations() {
        let mut f = fixture(6);
        let s = f.open();
        f.svc.get_key(&mut f.dir, &s.session_id, "x", 2, 256).unwrap();
        assert_eq!(f.counters("b").reserved_bits, 512);
        f.svc.close_session(&mut f.dir, &s.session_id).unwrap();
        let b = f.counters("b");
        assert_eq!((b.reserved_bits, b.available_bits), (0, 6 * 256));
        assert!(b.is_conserved());
        assert_eq!(f.svc.close_session(&mut f.dir, &s.session_id).unwrap_err().code(), "session_closed");
        assert_eq!(f.svc.close_session(&mut f.dir, "nope").unwrap_err().code(), "unknown_session");
        // blocks returned at the responder are never reused: the initiator consumed them
        let s2 = f.open();
        let k = f.svc.get_key(&mut f.dir, &s2.session_id, "x", 1, 256).unwrap();
        assert_eq!(k[0].key_id, "ab:2:256");
    }

    #[test]
    fn open_then_close_leaves_stores_unchanged() {
        let mut f = fixture(3);
        let before: Vec<_> = ["a", "b"].iter().map(|n| f.dir[*n].store().clone()).collect();
        let s = f.open();
        f.svc.close_session(&mut f.dir, &s.session_id).unwrap();
        let after: Vec<_> = ["a", "b"].iter().map(|n| f.dir[*n].store().clone()).collect();
        assert_eq!(before, after);
    }
}
