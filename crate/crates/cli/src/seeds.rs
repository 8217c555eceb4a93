//! Named seed substreams.
//!
//! `derive(seed, name)` is the first 8 bytes (little-endian) of
//! `SHA-256(seed.to_le_bytes() ‖ name)`. Each module draws from its own
//! stream, so adding draws in one does not perturb another.

use sha2::{Digest, Sha256};

pub const POPULATION: &str = "population";
pub const ASA: &str = "asa";
pub const EVENTS: &str = "events";

pub fn derive(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
