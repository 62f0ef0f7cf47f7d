//! Learned latent spaces: an auto-decoded shape space (implicit SDF decoder
//! plus one code per identity), a pose space (flow decoder plus one code per
//! posed instance, conditioned on the frozen shape space), and voxel
//! encoders that regress initial codes from partial depth observations.

pub mod encoder;
pub mod pose;
pub mod shape;

pub use encoder::{train_voxel_encoder, EncoderConfig, EncoderSample, VoxelEncoder};
pub use pose::{train_pose_space, InstanceSamples, PoseConfig, PoseSpace};
pub use shape::{train_shape_space, IdentitySamples, ShapeConfig, ShapeSpace};

use ndarray::Array2;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Frequency bands of the positional encoding γ(x) used by both decoders.
pub const POSITIONAL_BANDS: usize = 8;

#[derive(Debug, Error)]
pub enum SpacesError {
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Math(#[from] crate::math::MathError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Arithmetic mean of latent codes; the no-encoder initialization.
pub fn average_code(codes: &[Array2<f64>]) -> Result<Array2<f64>, SpacesError> {
    let Some(first) = codes.first() else {
        return Err(SpacesError::EmptyInput("average_code"));
    };
    let mut mean = Array2::zeros(first.dim());
    for c in codes {
        if c.dim() != first.dim() {
            return Err(SpacesError::Dimension {
                expected: first.len(),
                got: c.len(),
                context: "average_code",
            });
        }
        mean += c;
    }
    mean /= codes.len() as f64;
    Ok(mean)
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr_net: f64,
    pub lr_codes: f64,
}

/// Writes the loss curve as CSV (`epoch,loss,lr_net,lr_codes`).
pub fn write_loss_csv(path: &Path, stats: &[EpochStats]) -> Result<(), SpacesError> {
    let mut out = String::from("epoch,loss,lr_net,lr_codes\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{},{}", s.epoch, s.loss, s.lr_net, s.lr_codes);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Detects a loss plateau: true when the latest full window improved on the
/// previous one by less than `tolerance` (relative). With fewer than two
/// full windows there is no verdict.
pub(crate) fn plateaued(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || losses.len() < 2 * window || losses.len() % window != 0 {
        return false;
    }
    let last: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    let prev: f64 =
        losses[losses.len() - 2 * window..losses.len() - window].iter().sum::<f64>()
            / window as f64;
    last > prev * (1.0 - tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn average_of_single_code_is_itself() {
        let c = array![[1.0, -2.0, 3.0]];
        let mean = average_code(std::slice::from_ref(&c)).unwrap();
        assert_eq!(mean, c);
    }

    #[test]
    fn average_of_opposite_codes_is_zero() {
        let c = array![[0.5, -1.5, 2.0]];
        let mean = average_code(&[c.clone(), -c]).unwrap();
        assert!(mean.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn average_rejects_empty_and_mismatched() {
        assert!(matches!(
            average_code(&[]),
            Err(SpacesError::EmptyInput(_))
        ));
        let a = array![[1.0, 2.0]];
        let b = array![[1.0, 2.0, 3.0]];
        assert!(average_code(&[a, b]).is_err());
    }

    #[test]
    fn plateau_detection_windows() {
        // Steady improvement: no plateau.
        let falling: Vec<f64> = (0..40).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(!plateaued(&falling, 10, 0.01));
        // Flat tail: plateau once two windows are flat.
        let mut flat = falling.clone();
        flat.extend(std::iter::repeat(0.02).take(20));
        assert!(plateaued(&flat, 10, 0.01));
        // Mid-window epochs give no verdict.
        assert!(!plateaued(&flat[..flat.len() - 3], 10, 0.01));
    }
}
