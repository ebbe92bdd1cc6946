//! Deterministic per-purpose random streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags keep independent consumers from sharing a sequence.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    ModelInit = 3,
    Client = 4,
    Server = 5,
    Knowledge = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(master: u64, tag: Stream, a: u64, b: u64) -> Rng {
    let s = splitmix(splitmix(splitmix(master ^ ((tag as u64) << 56)) ^ a) ^ b.wrapping_mul(0x2545_F491_4F6C_DD1D));
    ChaCha8Rng::seed_from_u64(s)
}
