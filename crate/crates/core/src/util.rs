//! Small deterministic helpers shared across modules.

/// FNV-1a 64-bit hash; stable across platforms and runs, used for trace
/// digests and payload identity in the safety ledger.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derives a per-machine RNG seed from the scenario seed and a stable
/// machine ordinal, via splitmix64 so close seeds do not correlate.
pub fn derive_seed(scenario_seed: u64, stream: u64) -> u64 {
    let mut z = scenario_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Escapes a byte payload for CSV note fields: printable ASCII except the
/// escape and separator characters passes through, everything else becomes
/// `\xNN`.
pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b' '..=b'~' if b != b'\\' && b != b',' && b != b';' && b != b'"' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("\\x{b:02x}")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn derive_seed_spreads_streams() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(42, 0));
    }

    #[test]
    fn escape_roundtrips_printables() {
        assert_eq!(escape_bytes(b"hello"), "hello");
        assert_eq!(escape_bytes(b"a,b"), "a\\x2cb");
        assert_eq!(escape_bytes(&[0u8, 255u8]), "\\x00\\xff");
    }
}
