//! Seed-splitting for reproducible, schedule-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids at and above this value are reserved for non-agent consumers.
pub const RESERVED_STREAMS: u64 = 1 << 62;

/// Stream used by checkpoint metrics (Monte Carlo exploitability).
pub const METRICS_STREAM: u64 = RESERVED_STREAMS;

/// Independent stream `stream` of the generator keyed by `master_seed`.
///
/// ChaCha's 64-bit stream counter is the splitting function, so stream `i`
/// never depends on how many draws other streams have made.
pub fn stream_rng(master_seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

pub fn agent_rng(master_seed: u64, agent: usize) -> StreamRng {
    debug_assert!((agent as u64) < RESERVED_STREAMS);
    stream_rng(master_seed, agent as u64)
}
