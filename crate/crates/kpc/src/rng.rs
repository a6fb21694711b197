//! Stream-splittable randomness.
//!
//! Every consumer of randomness asks for a generator addressed by a master
//! seed plus a path of integers (replication, role, node, resample, ...).
//! Two different paths give independent ChaCha streams, so results never
//! depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags used as the first path element by library components.
pub mod tag {
    pub const GRAPH: u64 = 0x4752_4150;
    pub const GRAPH_X: u64 = 1;
    pub const GRAPH_XZ: u64 = 2;
    pub const CRT: u64 = 0x4352_5400;
    pub const KNOCKOFF: u64 = 0x4b4e_4f43;
    pub const SIM: u64 = 0x5349_4d00;
    pub const REPLICATION: u64 = 0x5245_504c;
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a path into a 64-bit stream identifier.
pub fn path_hash(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ 0x6b70_635f_7267);
    for &p in path {
        h = splitmix(h ^ splitmix(p));
    }
    h
}

/// Generator for `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_hash(seed, path));
    rng
}

/// Derive a child seed, for handing a sub-seed to another component.
pub fn child_seed(seed: u64, path: &[u64]) -> u64 {
    splitmix(path_hash(seed, path) ^ 0x5eed)
}
