//! Seed derivation shared by every randomized step.
//!
//! All randomness flows from a single master seed. Per-user streams are keyed
//! by a stable hash of `(master_seed, user_id, purpose)` so that iteration
//! order, thread count and user ordering never change what a user sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Stable 64-bit seed for a named sub-stream of `master`.
pub fn derive_seed(master: u64, key: &str, purpose: &str) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    h = fnv1a(h, key.as_bytes());
    h = fnv1a(h, &[0xff]);
    h = fnv1a(h, purpose.as_bytes());
    // splitmix finalizer; FNV alone mixes the high bits poorly
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn user_rng(master: u64, user_id: &str, purpose: &str) -> Rng {
    rng_from(derive_seed(master, user_id, purpose))
}
