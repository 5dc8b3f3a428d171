//! Seed derivation. Every random stream in a run is derived from the master
//! seed plus a stable label, so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for the stream named `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)))
}

pub fn stream(master: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, label))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a: u64 = stream(7, "init").random();
        let b: u64 = stream(7, "init").random();
        let c: u64 = stream(7, "order").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(1, "x"), derive_seed(2, "x"));
    }
}
