//! Multi-grained contrastive pre-training over character and word
//! representations.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the
//! filesystem or a terminal lives in the companion `clower` crate.
//!
//! Layout:
//! * [`tensor`] and [`graph`]: dense `f64` tensors and a reverse-mode tape,
//!   plus [`gradcheck`].
//! * [`vocab`], [`segment`], [`tokenize`]: the shared character/word
//!   vocabulary and aligned fine/coarse tokenization.
//! * [`masking`]: whole-word and per-token mask plans, anchor selection.
//! * [`model`]: shared embedding table and the two independent encoders.
//! * [`losses`]: multi-grained MLM, symmetric NT-Xent, SOP, weighted total.
//! * [`trainer`], [`optim`]: example preparation, AdamW, training loop,
//!   fine-only inference and classifier fine-tuning.
//! * [`analysis`]: word/character embedding similarity and anchor alignment.
//! * [`synthetic`]: toy-grammar corpus used by tests and the CLI.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod masking;
pub(crate) mod math;
pub mod model;
pub mod optim;
pub mod segment;
pub mod synthetic;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod tokenize;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
