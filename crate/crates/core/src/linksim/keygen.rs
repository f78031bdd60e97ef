use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LinkSimError, RateProfile};
use crate::model::{Link, LinkId, LinkKind, LinkStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockState {
    Available,
    Reserved,
    Consumed,
}

/// Fixed-size unit of key material shared by both ends of a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBlock {
    pub block_id: u64,
    pub link_id: LinkId,
    pub bytes: Vec<u8>,
    /// Simulation time in seconds.
    pub created_at: f64,
    pub state: BlockState,
}

impl KeyBlock {
    pub fn bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

/// Deterministic pseudorandom bytes for `(domain, seed, label, counter)`.
///
/// ChaCha20 keyed by SHA-256 over the domain, seed and label, with the
/// counter selecting the stream. Stands in for the quantum channel and for
/// every other source of key material in the emulator.
pub fn keystream(domain: &str, seed: u64, label: &str, counter: u64, len: usize) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(counter);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

const LINK_DOMAIN: &str = "sdqkd/link-keys";

/// Per-link key source. Emits blocks at the link's expected rate and keeps
/// the fractional remainder for the next call.
#[derive(Debug, Clone)]
pub struct LinkGenerator {
    link_id: LinkId,
    rate_bps: f64,
    block_bits: u32,
    seed: u64,
    carry_bits: f64,
    next_block_id: u64,
}

impl LinkGenerator {
    pub fn new(link: &Link, seed: u64, block_bits: u32) -> Result<Self, LinkSimError> {
        if link.kind != LinkKind::Physical {
            return Err(LinkSimError::NotPhysical(link.link_id.clone()));
        }
        if link.status != LinkStatus::Active {
            return Err(LinkSimError::Inactive(link.link_id.clone()));
        }
        if block_bits == 0 || !block_bits.is_multiple_of(8) {
            return Err(LinkSimError::InvalidBlockSize(block_bits));
        }
        let rate_bps = link
            .expected_rate_bps()
            .ok_or_else(|| LinkSimError::InvalidProfile(format!("link `{}` lacks fiber or profile", link.link_id)))?;
        Ok(Self {
            link_id: link.link_id.clone(),
            rate_bps,
            block_bits,
            seed,
            carry_bits: 0.0,
            next_block_id: 0,
        })
    }

    /// Generator with an explicit rate, bypassing the link's own profile.
    pub fn with_rate(link_id: impl Into<String>, rate_bps: f64, seed: u64, block_bits: u32) -> Result<Self, LinkSimError> {
        if block_bits == 0 || !block_bits.is_multiple_of(8) {
            return Err(LinkSimError::InvalidBlockSize(block_bits));
        }
        Ok(Self {
            link_id: link_id.into(),
            rate_bps,
            block_bits,
            seed,
            carry_bits: 0.0,
            next_block_id: 0,
        })
    }

    pub fn link_id(&self) -> &str {
        &self.link_id
    }

    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    pub fn block_bits(&self) -> u32 {
        self.block_bits
    }

    pub fn next_block_id(&self) -> u64 {
        self.next_block_id
    }

    pub fn set_profile(&mut self, loss_db: f64, profile: &RateProfile) -> Result<(), LinkSimError> {
        profile.validate()?;
        self.rate_bps = super::key_rate(loss_db, profile)?;
        Ok(())
    }

    /// Produces the blocks distilled over `duration_s` at the given duty.
    pub fn generate(&mut self, duty: f64, duration_s: f64, now_s: f64) -> Result<Vec<KeyBlock>, LinkSimError> {
        if !(0.0..=1.0).contains(&duty) {
            return Err(LinkSimError::InvalidDuty(duty));
        }
        if !(duration_s >= 0.0 && duration_s.is_finite()) {
            return Err(LinkSimError::InvalidDuration(duration_s));
        }
        let pending = self.carry_bits + self.rate_bps * duty * duration_s;
        let block = self.block_bits as f64;
        let count = (pending / block).floor();
        self.carry_bits = pending - count * block;
        let count = count as u64;
        let bytes_per_block = (self.block_bits / 8) as usize;
        let blocks = (0..count)
            .map(|i| {
                let block_id = self.next_block_id + i;
                KeyBlock {
                    block_id,
                    link_id: self.link_id.clone(),
                    bytes: keystream(LINK_DOMAIN, self.seed, &self.link_id, block_id, bytes_per_block),
                    created_at: now_s,
                    state: BlockState::Available,
                }
            })
            .collect();
        self.next_block_id += count;
        Ok(blocks)
    }
}

/// One-shot generation for a fresh link. Both endpoints ingest clones of
/// the returned sequence.
pub fn generate_key_blocks(
    link: &Link,
    duty: f64,
    duration_s: f64,
    seed: u64,
    block_bits: u32,
) -> Result<Vec<KeyBlock>, LinkSimError> {
    LinkGenerator::new(link, seed, block_bits)?.generate(duty, duration_s, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FiberSpec;

    fn six_db_link() -> Link {
        Link::physical("an", "almagro", "norte", FiberSpec::new(3.9, vec![5.22]), RateProfile::default())
            .with_status(LinkStatus::Active)
    }

    #[test]
    fn block_count_matches_rate_arithmetic() {
        let blocks = generate_key_blocks(&six_db_link(), 0.5, 10.0, 1, 256).unwrap();
        // floor(70000 * 0.5 * 10 / 256)
        assert_eq!(blocks.len(), 1367);
        assert!(blocks.iter().enumerate().all(|(i, b)| b.block_id == i as u64 && b.bits() == 256));
    }

    #[test]
    fn zero_duration_yields_nothing() {
        assert!(generate_key_blocks(&six_db_link(), 0.5, 0.0, 1, 256).unwrap().is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_key_blocks(&six_db_link(), 0.5, 1.0, 9, 256).unwrap();
        let b = generate_key_blocks(&six_db_link(), 0.5, 1.0, 9, 256).unwrap();
        assert_eq!(a, b);
        let c = generate_key_blocks(&six_db_link(), 0.5, 1.0, 10, 256).unwrap();
        assert_ne!(a[0].bytes, c[0].bytes);
    }

    #[test]
    fn remainder_carries_between_calls() {
        let mut g = LinkGenerator::with_rate("l", 1000.0, 0, 256).unwrap();
        let mut total = 0;
        for _ in 0..10 {
            total += g.generate(1.0, 0.1, 0.0).unwrap().len();
        }
        // 1000 bits spread over ten 100-bit slices still yields floor(1000/256).
        assert_eq!(total, 3);
        let ids: Vec<u64> = g.generate(1.0, 1.0, 0.0).unwrap().iter().map(|b| b.block_id).collect();
        assert_eq!(ids.first(), Some(&3));
    }

    #[test]
    fn chunked_generation_reproduces_bytes() {
        let mut g = LinkGenerator::new(&six_db_link(), 3, 256).unwrap();
        let mut chunked = Vec::new();
        for _ in 0..10 {
            chunked.extend(g.generate(0.5, 0.1, 0.0).unwrap());
        }
        let whole = generate_key_blocks(&six_db_link(), 0.5, 1.0, 3, 256).unwrap();
        assert_eq!(chunked.len(), whole.len());
        assert!(chunked.iter().zip(&whole).all(|(a, b)| a.bytes == b.bytes));
    }

    #[test]
    fn rejects_inactive_and_virtual_links() {
        let planned = six_db_link().with_status(LinkStatus::Planned);
        assert_eq!(generate_key_blocks(&planned, 0.5, 1.0, 1, 256).unwrap_err().code(), "link_inactive");
        let v = Link::virtual_link("v", vec!["a".into(), "b".into(), "c".into()]).with_status(LinkStatus::Active);
        assert_eq!(generate_key_blocks(&v, 0.5, 1.0, 1, 256).unwrap_err().code(), "wrong_kind");
        assert!(generate_key_blocks(&six_db_link(), 1.5, 1.0, 1, 256).is_err());
        assert!(generate_key_blocks(&six_db_link(), 0.5, 1.0, 1, 100).is_err());
    }

    #[test]
    fn keystream_bytes_look_uniform() {
        let bytes = keystream("test", 0, "x", 0, 1 << 16);
        let ones: u32 = bytes.iter().map(|b| b.count_ones()).sum();
        let frac = ones as f64 / (bytes.len() * 8) as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }
}
