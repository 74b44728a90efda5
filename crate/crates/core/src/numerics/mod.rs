//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

/// Generator threaded through initialization, shuffling and dropout.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests;
