//! Momentum-augmented recurrent cells, heavy-ball neural ODEs and momentum
//! linear attention, built on a small dense tensor type and a reverse-mode tape.
//!
//! Everything is computed in `f64`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod attention;
pub mod cells;
pub mod error;
pub mod finite_diff;
pub mod eigen;
pub mod gradcheck;
pub mod ode;
pub mod optim;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, OpAttrs, OpKind, Tape, Var};
pub use tensor::Tensor;

/// Named parameter (or gradient) tensors, ordered by name so iteration is
/// deterministic.
pub type ParamMap = BTreeMap<String, Tensor>;

/// The single RNG used throughout; seeded runs are reproducible across
/// platforms.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
