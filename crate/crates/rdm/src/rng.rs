//! Seedable counter-based randomness. Every stochastic routine in the crate
//! takes one of these by `&mut`; nothing draws from ambient entropy.

use rand::SeedableRng;

/// The crate-wide RNG: ChaCha8, a counter-mode stream cipher, so streams are
/// reproducible across platforms and cheap to fork by re-seeding.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a root seed and a tag path, e.g.
/// (seed, [variant_index, episode_index]). SplitMix64 mixes the tags so
/// nearby indices land far apart.
pub fn derive(seed: u64, tags: &[u64]) -> Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = splitmix(state.wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9)));
    }
    Rng::seed_from_u64(splitmix(state))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
