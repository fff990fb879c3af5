//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the stream name, folded with the root seed through splitmix64.
fn derive(root: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(root ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for sub-stream `name` of `root` (e.g. "collect", "init", "shuffle").
pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive(root, name, 0))
}

/// Generator for item `index` of sub-stream `name`, e.g. one episode.
pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(root, name, index.wrapping_add(1)))
}
