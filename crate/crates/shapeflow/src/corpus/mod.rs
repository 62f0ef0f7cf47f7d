//! Procedural deformable-shape corpus: capsule-skeleton figures with
//! identity variation (limb proportions), pose variation (joint angles via
//! linear blend skinning), exact dense correspondences, and a depth-map
//! renderer for the fitting experiments.

pub mod generate;
pub mod identity;
pub mod render;
pub mod skeleton;

pub use generate::{generate_corpus, CorpusConfig, CorpusManifest};
pub use identity::{build_identity, pose_identity, CanonicalTemplate, IdentityRig};
pub use render::{render_depth, Camera, DepthFrame};
pub use skeleton::{IdentitySpec, PoseSpec, Rigid, Skeleton};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid identity spec: {0}")]
    InvalidSpec(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("surface projection did not converge (residual {residual})")]
    ProjectionFailed { residual: f64 },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
