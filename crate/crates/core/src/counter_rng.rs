//! Counter-based random bits for reproducible masking.
//!
//! Stateless: the value at a coordinate depends only on `(key, index)`, so
//! any parallel schedule or traversal order produces identical masks. The
//! key is derived from a user seed and a stable 64-bit hash of the tensor
//! name, keeping masks independent across tensors of one checkpoint.

/// FNV-1a 64-bit hash. Stable across platforms and versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// SplitMix64 finalizer: bijective avalanche mix.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Raw 64 random bits for counter `index` under `key`.
#[inline]
pub fn counter_bits(key: u64, index: u64) -> u64 {
    mix64(key ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Uniform draw in [0, 1) with 53 bits of precision.
#[inline]
pub fn counter_uniform(key: u64, index: u64) -> f64 {
    (counter_bits(key, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Key for a tensor's mask stream: recipe seed XOR FNV-1a of the tensor name.
pub fn tensor_key(seed: u64, tensor_name: &str) -> u64 {
    seed ^ fnv1a64(tensor_name.as_bytes())
}
