//! Stable 64-bit content hashing used for ledger payload digests, seed
//! derivation, and aggregator election.
//!
//! `std::hash` is documented as unstable across releases, so the simulator
//! pins its own scheme: FNV-1a over the input bytes followed by the
//! splitmix64 finalizer for avalanche. Tests recompute these by hand, so
//! the constants here are part of the observable contract.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer. Full-period bijection on u64.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Content digest of a byte payload.
pub fn digest64(bytes: &[u8]) -> u64 {
    mix64(fnv1a64(bytes))
}

/// Derives an independent sub-seed from a base seed, a purpose tag, and an
/// index. Used everywhere a component needs its own RNG stream.
pub fn derive_seed(base: u64, tag: &str, n: u64) -> u64 {
    let mut buf = Vec::with_capacity(16 + tag.len());
    buf.extend_from_slice(&base.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    digest64(&buf)
}

/// Election hash for one (round, subset) pair; the winner is this value
/// modulo the candidate count.
pub fn election_hash(rng_seed: u64, round: u64, subset_key: &str) -> u64 {
    let mut buf = Vec::with_capacity(16 + subset_key.len());
    buf.extend_from_slice(&rng_seed.to_le_bytes());
    buf.extend_from_slice(&round.to_le_bytes());
    buf.extend_from_slice(subset_key.as_bytes());
    digest64(&buf)
}
