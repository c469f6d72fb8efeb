//! Seeded random streams. Each consumer derives its own stream from the run
//! seed and a namespace, so adding a consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `(namespace, index)` under the run seed.
pub fn derive_seed(seed: u64, namespace: &str, index: u64) -> u64 {
    // FNV-1a over the namespace bytes
    let ns = namespace.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix(splitmix(seed ^ ns).wrapping_add(index))
}

pub fn stream(seed: u64, namespace: &str, index: u64) -> Rng {
    seeded(derive_seed(seed, namespace, index))
}
