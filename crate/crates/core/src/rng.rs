//! Seeded random streams.
//!
//! Every random draw in a run comes from a stream derived from the run seed
//! and a stream name, so adding draws to one stream never shifts another.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub const ENV: &str = "env";
pub const POLICY_NOISE: &str = "policy-noise";
pub const GUMBEL: &str = "gumbel";
pub const ESTLAB: &str = "estlab";
pub const INIT: &str = "init";
pub const EVAL: &str = "eval";
pub const REPLAY: &str = "replay";

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name))
}

/// The generator's full 256-bit state as little-endian words.
pub fn state_bytes(rng: &Rng) -> [u8; 32] {
    // The generator exposes its state only through serde.
    let v = serde_json::to_value(rng).expect("xoshiro state serializes");
    let words = v["s"].as_array().expect("state array");
    let mut out = [0u8; 32];
    for (i, w) in words.iter().enumerate() {
        let w = w.as_u64().expect("u64 word");
        out[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    out
}

/// Inverse of [`state_bytes`].
pub fn from_state_bytes(bytes: [u8; 32]) -> Rng {
    Rng::from_seed(bytes)
}
