use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LkmsError;
use crate::linksim::{BlockState, KeyBlock};
use crate::model::LinkId;

/// Bit accounting of one link at one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyCounters {
    pub generated_bits: u64,
    pub available_bits: u64,
    pub reserved_bits: u64,
    pub consumed_bits: u64,
}

impl KeyCounters {
    /// generated = available + reserved + consumed
    pub fn is_conserved(&self) -> bool {
        self.generated_bits == self.available_bits + self.reserved_bits + self.consumed_bits
    }

    fn bucket(&mut self, state: BlockState) -> &mut u64 {
        match state {
            BlockState::Available => &mut self.available_bits,
            BlockState::Reserved => &mut self.reserved_bits,
            BlockState::Consumed => &mut self.consumed_bits,
        }
    }
}

/// Blocks of one link held by one endpoint, in block id order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkKeys {
    block_bits: u32,
    blocks: BTreeMap<u64, KeyBlock>,
    next_block_id: u64,
    counters: KeyCounters,
}

impl LinkKeys {
    fn new(block_bits: u32) -> Self {
        Self {
            block_bits,
            blocks: BTreeMap::new(),
            next_block_id: 0,
            counters: KeyCounters::default(),
        }
    }

    pub fn block_bits(&self) -> u32 {
        self.block_bits
    }

    pub fn counters(&self) -> KeyCounters {
        self.counters
    }

    pub fn next_block_id(&self) -> u64 {
        self.next_block_id
    }

    pub fn block(&self, block_id: u64) -> Option<&KeyBlock> {
        self.blocks.get(&block_id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &KeyBlock> {
        self.blocks.values()
    }

    pub fn available_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.blocks
            .values()
            .filter(|b| b.state == BlockState::Available)
            .map(|b| b.block_id)
    }

    pub fn is_available(&self, block_id: u64) -> bool {
        self.blocks
            .get(&block_id)
            .is_some_and(|b| b.state == BlockState::Available)
    }
}

/// Synchronized key material of every link terminating at one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyStore {
    links: BTreeMap<LinkId, LinkKeys>,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens an empty block sequence for a link. Re-registering with the same
    /// block size is a no-op.
    pub fn register_link(&mut self, link_id: &str, block_bits: u32) -> Result<(), LkmsError> {
        if block_bits == 0 || !block_bits.is_multiple_of(8) {
            return Err(LkmsError::InvalidRequest(format!(
                "block size must be a positive multiple of 8, got {block_bits}"
            )));
        }
        match self.links.get(link_id) {
            Some(existing) if existing.block_bits != block_bits => Err(LkmsError::InvalidRequest(format!(
                "link `{link_id}` already registered with {} bit blocks",
                existing.block_bits
            ))),
            Some(_) => Ok(()),
            None => {
                self.links.insert(link_id.to_string(), LinkKeys::new(block_bits));
                Ok(())
            }
        }
    }

    pub fn remove_link(&mut self, link_id: &str) -> Option<LinkKeys> {
        self.links.remove(link_id)
    }

    pub fn contains(&self, link_id: &str) -> bool {
        self.links.contains_key(link_id)
    }

    pub fn link(&self, link_id: &str) -> Result<&LinkKeys, LkmsError> {
        self.links
            .get(link_id)
            .ok_or_else(|| LkmsError::UnknownLink(link_id.to_string()))
    }

    fn link_mut(&mut self, link_id: &str) -> Result<&mut LinkKeys, LkmsError> {
        self.links
            .get_mut(link_id)
            .ok_or_else(|| LkmsError::UnknownLink(link_id.to_string()))
    }

    pub fn links(&self) -> impl Iterator<Item = (&LinkId, &LinkKeys)> {
        self.links.iter()
    }

    pub fn counters(&self, link_id: &str) -> Result<KeyCounters, LkmsError> {
        Ok(self.link(link_id)?.counters)
    }

    pub fn available_bits(&self, link_id: &str) -> Result<u64, LkmsError> {
        Ok(self.link(link_id)?.counters.available_bits)
    }

    /// Appends freshly distilled blocks. They must continue the stored
    /// sequence without gaps; nothing is stored if any block is out of line.
    pub fn ingest_blocks(&mut self, link_id: &str, blocks: Vec<KeyBlock>) -> Result<KeyCounters, LkmsError> {
        let keys = self.link_mut(link_id)?;
        let bytes_per_block = (keys.block_bits / 8) as usize;
        for (expected, block) in (keys.next_block_id..).zip(&blocks) {
            if block.link_id != link_id {
                return Err(LkmsError::InvalidRequest(format!(
                    "block for `{}` offered to `{link_id}`",
                    block.link_id
                )));
            }
            if block.block_id != expected {
                return Err(LkmsError::Desynchronized {
                    link_id: link_id.to_string(),
                    expected,
                    got: block.block_id,
                });
            }
            if block.bytes.len() != bytes_per_block {
                return Err(LkmsError::InvalidRequest(format!(
                    "block {} has {} bytes, link uses {bytes_per_block}",
                    block.block_id,
                    block.bytes.len()
                )));
            }
        }
        for mut block in blocks {
            block.state = BlockState::Available;
            keys.counters.generated_bits += block.bits();
            keys.counters.available_bits += block.bits();
            keys.next_block_id = block.block_id + 1;
            keys.blocks.insert(block.block_id, block);
        }
        Ok(keys.counters)
    }

    /// Moves every listed block from `from` to `to`. All-or-nothing; a
    /// consumed block never changes state again.
    pub fn transition(
        &mut self,
        link_id: &str,
        block_ids: &[u64],
        from: BlockState,
        to: BlockState,
    ) -> Result<(), LkmsError> {
        if from == BlockState::Consumed {
            return Err(LkmsError::InvalidRequest("consumed blocks are final".into()));
        }
        let keys = self.link_mut(link_id)?;
        for id in block_ids {
            match keys.blocks.get(id) {
                Some(b) if b.state == from => {}
                Some(b) => {
                    return Err(LkmsError::BlockState {
                        link_id: link_id.to_string(),
                        block_id: *id,
                        expected: from,
                        actual: b.state,
                    })
                }
                None => {
                    return Err(LkmsError::BlockMissing {
                        link_id: link_id.to_string(),
                        block_id: *id,
                    })
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if !block_ids.iter().all(|id| seen.insert(*id)) {
            return Err(LkmsError::InvalidRequest("block listed twice".into()));
        }
        for id in block_ids {
            let block = keys.blocks.get_mut(id).expect("checked above");
            let bits = block.bits();
            block.state = to;
            *keys.counters.bucket(from) -= bits;
            *keys.counters.bucket(to) += bits;
        }
        Ok(())
    }

    /// Concatenates the listed blocks and keeps the leading `size_bits`.
    /// A trailing partial byte keeps its high bits and zeroes the rest.
    pub fn assemble(&self, link_id: &str, block_ids: &[u64], size_bits: u64) -> Result<Vec<u8>, LkmsError> {
        let keys = self.link(link_id)?;
        let mut bytes = Vec::with_capacity(block_ids.len() * (keys.block_bits / 8) as usize);
        for id in block_ids {
            let block = keys.blocks.get(id).ok_or_else(|| LkmsError::BlockMissing {
                link_id: link_id.to_string(),
                block_id: *id,
            })?;
            bytes.extend_from_slice(&block.bytes);
        }
        Ok(truncate_bits(bytes, size_bits))
    }
}

pub(crate) fn truncate_bits(mut bytes: Vec<u8>, size_bits: u64) -> Vec<u8> {
    let len = size_bits.div_ceil(8) as usize;
    bytes.truncate(len);
    let rem = (size_bits % 8) as u32;
    if rem != 0 {
        if let Some(last) = bytes.last_mut() {
            *last &= 0xFFu8 << (8 - rem);
        }
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(link: &str, ids: std::ops::Range<u64>) -> Vec<KeyBlock> {
        ids.map(|id| KeyBlock {
            block_id: id,
            link_id: link.into(),
            bytes: vec![id as u8; 32],
            created_at: 0.0,
            state: BlockState::Available,
        })
        .collect()
    }

    fn store() -> KeyStore {
        let mut s = KeyStore::new();
        s.register_link("l", 256).unwrap();
        s
    }

    #[test]
    fn ingest_ten_blocks() {
        let mut s = store();
        let c = s.ingest_blocks("l", blocks("l", 0..10)).unwrap();
        assert_eq!(c.available_bits, 2560);
        assert_eq!(c.generated_bits, 2560);
        assert_eq!(s.available_bits("l").unwrap(), 2560);
    }

    #[test]
    fn fresh_link_has_no_bits() {
        assert_eq!(store().available_bits("l").unwrap(), 0);
        assert!(matches!(store().available_bits("x"), Err(LkmsError::UnknownLink(_))));
    }

    #[test]
    fn gap_is_a_desync() {
        let mut s = store();
        s.ingest_blocks("l", blocks("l", 0..4)).unwrap();
        let err = s.ingest_blocks("l", blocks("l", 5..6)).unwrap_err();
        assert_eq!(err.code(), "desynchronized_link");
        // nothing appended
        assert_eq!(s.available_bits("l").unwrap(), 4 * 256);
    }

    #[test]
    fn reorder_is_a_desync() {
        let mut s = store();
        let mut b = blocks("l", 0..3);
        b.swap(1, 2);
        assert!(matches!(s.ingest_blocks("l", b), Err(LkmsError::Desynchronized { .. })));
        assert_eq!(s.counters("l").unwrap(), KeyCounters::default());
    }

    #[test]
    fn transitions_keep_conservation_and_consumed_is_final() {
        let mut s = store();
        s.ingest_blocks("l", blocks("l", 0..4)).unwrap();
        s.transition("l", &[0, 1], BlockState::Available, BlockState::Reserved).unwrap();
        s.transition("l", &[0], BlockState::Reserved, BlockState::Consumed).unwrap();
        s.transition("l", &[1], BlockState::Reserved, BlockState::Available).unwrap();
        let c = s.counters("l").unwrap();
        assert!(c.is_conserved());
        assert_eq!((c.available_bits, c.reserved_bits, c.consumed_bits), (768, 0, 256));
        assert!(s.transition("l", &[0], BlockState::Consumed, BlockState::Available).is_err());
        // a failing batch leaves everything untouched
        assert!(s.transition("l", &[1, 0], BlockState::Available, BlockState::Consumed).is_err());
        assert_eq!(s.counters("l").unwrap(), c);
    }

    #[test]
    fn assemble_truncates_partial_bytes() {
        let mut s = store();
        s.ingest_blocks("l", blocks("l", 0..2)).unwrap();
        let key = s.assemble("l", &[1, 0], 300).unwrap();
        assert_eq!(key.len(), 38);
        assert_eq!(key[0], 1);
        assert_eq!(key[32], 0);
        let ones = s.assemble("l", &[0], 4).unwrap();
        assert_eq!(ones, vec![0]);
        assert_eq!(truncate_bits(vec![0xFF, 0xFF], 12), vec![0xFF, 0xF0]);
    }
}
