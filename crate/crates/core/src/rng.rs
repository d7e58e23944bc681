//! Seed derivation. A master seed fans out into independent streams keyed by
//! stable labels, so adding a setting or stage never shifts existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a of a label, for use as a stream key.
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(master), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_stream(master: u64, keys: &[u64]) -> StreamRng {
    stream(derive_seed(master, keys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_key_sensitive() {
        let a = derive_seed(42, &[label("dataset"), 3]);
        assert_eq!(a, derive_seed(42, &[label("dataset"), 3]));
        assert_ne!(a, derive_seed(42, &[label("dataset"), 4]));
        assert_ne!(a, derive_seed(43, &[label("dataset"), 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    }
}
