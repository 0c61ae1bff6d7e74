//! Labeled random substreams.
//!
//! Every random draw in a run comes from `substream(root, stage, purpose, index)`,
//! so a stage reproduces regardless of what ran before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seed derived from a root seed and a label path.
pub fn derive_seed(root: u64, stage: &str, purpose: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(32 + stage.len() + purpose.len());
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(stage.as_bytes());
    buf.push(0);
    buf.extend_from_slice(purpose.as_bytes());
    buf.push(0);
    buf.extend_from_slice(&index.to_le_bytes());
    splitmix64(fnv1a64(&buf))
}

pub fn substream(root: u64, stage: &str, purpose: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, stage, purpose, index))
}

pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
