//! Deterministic 64-bit hashing used for fingerprint codes, seed derivation,
//! and content digests.
//!
//! Everything downstream (fingerprint bits, per-iteration RNG streams, trace
//! digests) must be reproducible across runs and platforms, so we pin a
//! concrete mixer instead of relying on `std`'s unspecified hasher. The
//! finalizer is the splitmix64 permutation, which is cheap and has full
//! avalanche.

/// Splitmix64 finalizer: a bijective mixer with good avalanche behaviour.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive combination of an accumulated hash with a new value.
#[inline]
pub fn combine(acc: u64, value: u64) -> u64 {
    mix64(acc ^ mix64(value))
}

/// Hash a sequence of values, order-sensitively, from a fixed starting point.
pub fn hash_seq<I: IntoIterator<Item = u64>>(tag: u64, values: I) -> u64 {
    let mut acc = mix64(tag);
    for v in values {
        acc = combine(acc, v);
    }
    acc
}

/// Derive an independent RNG seed from a base seed and a context label.
///
/// Campaigns draw from several logical streams (initial design, per-iteration
/// surrogate fits, per-iteration acquisition sampling); deriving each stream's
/// seed through the mixer keeps them decorrelated while staying reproducible.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut acc = mix64(base);
    for b in label.as_bytes() {
        acc = combine(acc, u64::from(*b));
    }
    combine(acc, index)
}

/// Digest of a float slice, insensitive to nothing: bit patterns are hashed
/// as-is so that any numeric change shows up in the digest.
pub fn digest_f64s(values: &[f64]) -> u64 {
    hash_seq(0x6d6f_6c62_6f64_6967, values.iter().map(|v| v.to_bits()))
}
