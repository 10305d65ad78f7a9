//! Counter-based seed derivation.
//!
//! Every random stream is keyed by `(master, purpose, round, device, batch)`.
//! Each component is folded into the state with a SplitMix64 finalizer, so
//! the stream for device 3 does not depend on how many devices exist and
//! adding a purpose never shifts an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Channel = 4,
    Pilot = 5,
    Noise = 6,
    Eval = 7,
    Teacher = 8,
    Refiner = 9,
    TestData = 10,
    EvalPilot = 11,
    EvalNoise = 12,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, round: u64, device: u64, batch: u64) -> u64 {
    [purpose as u64, round, device, batch]
        .into_iter()
        .fold(splitmix64(master), |state, part| splitmix64(state ^ splitmix64(part)))
}

pub fn stream(master: u64, purpose: Purpose, round: u64, device: u64, batch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, round, device, batch))
}
