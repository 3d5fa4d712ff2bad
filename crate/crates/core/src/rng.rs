//! Counter-based per-path random streams.
//!
//! Every path draws from a ChaCha8 keystream keyed by `(master_seed, domain)`
//! and positioned on stream `path_index`. Results never depend on which
//! worker produced a path or in which order paths were produced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates independent pipelines that share a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    BasePath = 0x6261_7365,
    EulerMaruyama = 0x6575_6c72,
    InitialLaw = 0x696e_6974,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for path `path_index` of the ensemble seeded by `master_seed`.
pub fn path_rng(master_seed: u64, domain: Domain, path_index: u64) -> ChaCha8Rng {
    let mut state = master_seed ^ (domain as u64).rotate_left(32);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path_index);
    rng
}

/// Generator for a single standalone path (`sample_path`'s seed argument).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    path_rng(seed, Domain::BasePath, 0)
}
