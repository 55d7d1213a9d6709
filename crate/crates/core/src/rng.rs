//! Counter-based random streams.
//!
//! Every random draw in a run comes from a ChaCha8 generator keyed by the
//! root seed and positioned on a stream selected by `(client, round, purpose)`:
//!
//! ```text
//! stream = mix(mix(mix(purpose) ^ client) ^ round)
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Streams for different triples do
//! not overlap, so a client's local training draws the same numbers whether
//! clients are trained serially or concurrently, and adding a new purpose
//! does not perturb existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Client slot used for streams that belong to the whole round.
pub const GLOBAL: u64 = u64::MAX;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Mask = 1,
    Batch = 2,
    Noise = 3,
    Channel = 4,
    Cpu = 5,
    Baseline = 6,
    Placement = 7,
    Privacy = 8,
    Data = 9,
    Partition = 10,
    Init = 11,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root of all random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRoot {
    seed: u64,
}

impl StreamRoot {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, client: u64, round: u64, purpose: Purpose) -> ChaCha8Rng {
        let id = mix(mix(mix(purpose as u64) ^ client) ^ round);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// Stream for a per-client draw in a given round.
    pub fn client_stream(&self, client: usize, round: usize, purpose: Purpose) -> ChaCha8Rng {
        self.stream(client as u64, round as u64, purpose)
    }

    /// Stream for a draw shared by the whole round (channels, baselines).
    pub fn round_stream(&self, round: usize, purpose: Purpose) -> ChaCha8Rng {
        self.stream(GLOBAL, round as u64, purpose)
    }

    /// Stream used once during setup.
    pub fn setup_stream(&self, purpose: Purpose) -> ChaCha8Rng {
        self.stream(GLOBAL, u64::MAX, purpose)
    }
}
