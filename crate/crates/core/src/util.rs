//! Small helpers shared across modules.

/// 64-bit FNV-1a over a sequence of byte strings. Stable across platforms and
/// releases, unlike `std::hash`.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        // separator so ("ab", "c") and ("a", "bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Numeric sample ids map to themselves; anything else is hashed.
pub fn sample_key(id: &str) -> u64 {
    id.parse::<u64>()
        .unwrap_or_else(|_| stable_hash(&[id.as_bytes()]))
}
