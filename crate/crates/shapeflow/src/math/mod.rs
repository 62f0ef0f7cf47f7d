//! Differentiable-computation core: tensors, reverse-mode gradients for the
//! decoder and encoder architectures, losses, positional encoding, Adam, and
//! the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod encoding;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod tape;

pub use adam::{AdamGroup, AdamSchedule};
pub use checkpoint::Checkpoint;
pub use conv::VoxelConvStack;
pub use encoding::{positional_encoding, positional_encoding_dim, positional_encoding_into};
pub use loss::clamped_l1;
pub use mlp::{MlpConfig, MlpParams};
pub use tape::{NodeId, Tape};

use rand::Rng;
use thiserror::Error;

/// One draw from N(0, 1) via Box-Muller; keeps the RNG dependency down to
/// the uniform core so seeded streams stay reproducible across platforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps ln finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Error)]
pub enum MathError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("non-finite input ({context})")]
    NonFinite { context: &'static str },
    #[error("backward requires a scalar root node, got shape {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
