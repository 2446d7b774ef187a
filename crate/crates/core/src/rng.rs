//! Seeded randomness for codes, tokens and session identifiers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Number of random bytes behind every opaque value (128 bits).
pub const OPAQUE_BYTES: usize = 16;

/// Deterministic generator of unguessable opaque strings. Each actor gets its
/// own stream so traces do not depend on how actors interleave.
#[derive(Debug, Clone)]
pub struct OpaqueGen {
    rng: ChaCha20Rng,
}

impl OpaqueGen {
    /// Derives an independent stream for `actor` from the scenario seed.
    pub fn for_actor(seed: u64, actor: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        // FNV-1a of the actor label spreads it over the remaining key bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in actor.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        key[8..16].copy_from_slice(&h.to_le_bytes());
        key[16..24].copy_from_slice(&h.rotate_left(29).to_le_bytes());
        OpaqueGen {
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    /// 128 random bits, hex encoded.
    pub fn opaque(&mut self) -> String {
        let mut bytes = [0u8; OPAQUE_BYTES];
        self.rng.fill_bytes(&mut bytes);
        hex::encode(bytes)
    }
}
