//! Fitting trained latent spaces to monocular depth sequences.
//!
//! A sequence of depth frames is converted into truncated projective SDF
//! grids with occlusion masks ([`depth_to_observation`]), codes are
//! initialized from voxel encoders or from the train-table means
//! ([`initialize_codes`]), and one shape code plus one pose code per frame
//! are optimized against the observations with both decoders frozen
//! ([`fit_sequence`]). The result is reconstructed as a canonical mesh that
//! is reposed into every frame, and codes can be recombined across fits for
//! pose transfer or interpolated between fits.

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::geometry::GeometryError;
use crate::math::MathError;
use crate::spaces::SpacesError;
use serde::{Deserialize, Serialize};

pub mod fit;
pub mod observation;
pub mod problem;
pub mod reconstruct;

pub use fit::{fit_sequence, frame_energy, FittingResult, FrameEnergy, IcpTerm, IterationLosses};
pub use observation::{
    depth_to_observation, observation_to_occupancy, subsample_points, train_corpus_encoders,
    BAND_FACTOR,
};
pub use problem::{initialize_codes, sample_fitting_points, FittingProblem};
pub use reconstruct::{interpolate_codes, reconstruct_sequence, transfer};

#[derive(Debug, Error)]
pub enum FittingError {
    #[error("invalid fitting configuration: {0}")]
    InvalidConfig(String),
    #[error("fitting needs at least one depth frame")]
    EmptySequence,
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("decoded isosurface is empty")]
    EmptyIsosurface,
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spaces(#[from] SpacesError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of the sequence-fitting energy and its optimizer.
///
/// Defaults are desk-scale; [`FittingConfig::paper_scale`] switches the
/// point counts, iteration budget, grid resolution, and regularizer widths
/// to the published full-scale values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FittingConfig {
    /// Optimizer iterations; the learning rates decay by `decay_factor`
    /// every `iterations / 4` steps and the pull term switches off after
    /// `iterations / 2`.
    pub iterations: usize,
    /// Frames drawn per iteration.
    pub batch_frames: usize,
    /// Template points evaluated per frame per iteration.
    pub subbatch: usize,
    /// Size of the canonical template point set.
    pub template_points: usize,
    /// Isotropic displacement applied to template surface samples.
    pub displacement_sigma: f64,
    pub lr_shape: f64,
    pub lr_pose: f64,
    pub decay_factor: f64,
    /// Shape-code regularizer width; the penalty is `||s||^2 / sigma^2`.
    pub sigma_shape: f64,
    /// Pose-code regularizer width; the penalty is `||p||^2 / sigma^2`.
    pub sigma_pose: f64,
    /// Weight of the temporal flow-consistency term.
    pub lambda_temporal: f64,
    /// Weight of the observed-cloud pull term; zero disables it.
    pub lambda_icp: f64,
    /// Template points with `|sdf| < icp_surface_band` act as the model
    /// surface in the pull term.
    pub icp_surface_band: f64,
    /// Per-frame cap on back-projected cloud points kept for the pull term.
    pub icp_cloud_cap: usize,
    /// Cap on model surface points used by the pull term.
    pub icp_source_cap: usize,
    /// Observation grid nodes per axis.
    pub grid_resolution: usize,
    /// Observation-mask cutoff: grid nodes more than this far behind the
    /// observed surface are treated as occluded.
    pub occlusion_cutoff: f64,
    /// Truncation band of the SDF regression loss.
    pub delta: f64,
    /// Isosurface extraction resolution for templates and reconstruction.
    pub mesh_resolution: usize,
    pub seed: u64,
}

impl Default for FittingConfig {
    fn default() -> Self {
        FittingConfig {
            iterations: 400,
            batch_frames: 4,
            subbatch: 5000,
            template_points: 50_000,
            displacement_sigma: 0.015,
            lr_shape: 5e-4,
            lr_pose: 1e-3,
            decay_factor: 0.5,
            sigma_shape: 10f64.sqrt(),
            sigma_pose: 100.0,
            lambda_temporal: 200.0,
            lambda_icp: 5e-4,
            icp_surface_band: 1e-3,
            icp_cloud_cap: 2000,
            icp_source_cap: 4000,
            grid_resolution: 96,
            occlusion_cutoff: 0.01,
            delta: 0.1,
            mesh_resolution: 128,
            seed: 0,
        }
    }
}

impl FittingConfig {
    /// Published full-scale settings: more template points and iterations, a
    /// denser observation grid, and the tight published regularizer widths.
    pub fn paper_scale(seed: u64) -> Self {
        FittingConfig {
            iterations: 1000,
            subbatch: 20_000,
            template_points: 500_000,
            grid_resolution: 256,
            mesh_resolution: 256,
            sigma_shape: 0.1,
            sigma_pose: 1e-4,
            icp_cloud_cap: usize::MAX,
            icp_source_cap: usize::MAX,
            seed,
            ..FittingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), FittingError> {
        let positive = [
            (self.lr_shape, "lr_shape"),
            (self.lr_pose, "lr_pose"),
            (self.sigma_shape, "sigma_shape"),
            (self.sigma_pose, "sigma_pose"),
            (self.icp_surface_band, "icp_surface_band"),
            (self.occlusion_cutoff, "occlusion_cutoff"),
            (self.delta, "delta"),
        ];
        for (v, name) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FittingError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        let non_negative = [
            (self.displacement_sigma, "displacement_sigma"),
            (self.lambda_temporal, "lambda_temporal"),
            (self.lambda_icp, "lambda_icp"),
        ];
        for (v, name) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FittingError::InvalidConfig(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if !(0.0 < self.decay_factor && self.decay_factor <= 1.0) {
            return Err(FittingError::InvalidConfig(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        let at_least_one = [
            (self.iterations, "iterations"),
            (self.batch_frames, "batch_frames"),
            (self.subbatch, "subbatch"),
            (self.template_points, "template_points"),
            (self.icp_cloud_cap, "icp_cloud_cap"),
            (self.icp_source_cap, "icp_source_cap"),
        ];
        for (v, name) in at_least_one {
            if v == 0 {
                return Err(FittingError::InvalidConfig(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if self.grid_resolution < 2 || self.mesh_resolution < 2 {
            return Err(FittingError::InvalidConfig(
                "grid and mesh resolutions need at least 2 nodes per axis".into(),
            ));
        }
        Ok(())
    }
}
