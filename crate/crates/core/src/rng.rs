//! Deterministic random substreams.
//!
//! Every stochastic component derives its generator from a master seed plus a
//! path of integer tags (replicate, chain, imputation, purpose), so results do
//! not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags for the different consumers of randomness.
pub mod tag {
    pub const SIMULATE: u64 = 1;
    pub const MISSINGNESS: u64 = 2;
    pub const IMPUTE: u64 = 3;
    pub const MCMC: u64 = 4;
    pub const REPLICATE: u64 = 5;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from `master` and a tag path.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out ^= splitmix64(&mut state);
        out = out.rotate_left(17);
    }
    out
}

/// Independent generator for `(master, tags...)`.
pub fn substream(master: u64, tags: &[u64]) -> Rng {
    let mut state = derive_seed(master, tags);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
