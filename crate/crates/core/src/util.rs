//! Small internal helpers.

/// FNV-1a over a sequence of byte slices, with a separator fold between
/// slices so `["ab","c"]` and `["a","bc"]` hash differently.
///
/// Used wherever a stable, platform-independent 64-bit digest is needed:
/// identity -> attribute derivation, per-scene seed derivation, and
/// request fingerprints for record/replay fixtures.
pub(crate) fn fnv1a64(parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for part in parts {
        for &byte in *part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(PRIME);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separator_distinguishes_slice_boundaries() {
        assert_ne!(fnv1a64(&[b"ab", b"c"]), fnv1a64(&[b"a", b"bc"]));
    }

    #[test]
    fn stable_across_calls() {
        assert_eq!(
            fnv1a64(&[b"scene_0001", b"R1"]),
            fnv1a64(&[b"scene_0001", b"R1"])
        );
    }
}
