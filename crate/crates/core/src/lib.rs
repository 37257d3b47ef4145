//! Multi-scale feature attention and adaptive-weighted classification for
//! SAR ship chips, with the numerics, data pipeline, training loop and
//! evaluation harness needed to exercise it end to end.

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod awc;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod msfa;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

pub(crate) mod rng {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const INIT: u64 = 1;
    pub const TRIPLETS: u64 = 2;
    pub const BALANCE: u64 = 3;
    pub const SYNTH: u64 = 4;

    /// Independent deterministic stream for `(seed, purpose, index)`.
    pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(purpose << 48 | (index & 0xFFFF_FFFF_FFFF));
        rng
    }
}
