//! Counter-based keyed random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha stream whose 256-bit
//! key is the tuple `(seed, domain, iteration, entity)`. Any single draw can be
//! re-materialized without replaying the run, and concurrent consumers never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains never collide even for equal counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Topology = 1,
    Profile = 2,
    Sgd = 3,
    Link = 4,
    Noise = 5,
    Batch = 6,
    Objective = 7,
    Partition = 8,
    Init = 9,
    MonteCarlo = 10,
    Estimate = 11,
}

pub fn keyed(seed: u64, domain: Domain, counter: u64, entity: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    key[24..].copy_from_slice(&entity.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Undirected pair id used as the entity of a link stream.
pub fn pair_id(i: usize, j: usize, m: usize) -> u64 {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    (a * m + b) as u64
}
