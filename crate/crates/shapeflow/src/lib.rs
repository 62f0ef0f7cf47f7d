//! Learned parametric models of deformable shapes.
//!
//! The library builds two latent spaces over a corpus of articulated shapes:
//! a shape space (an MLP decoding latent codes to signed distance fields) and
//! a pose space (an MLP decoding shape+pose codes to deformation flow fields).
//! Both are trained auto-decoder style, with the latent codes optimized as
//! free parameters alongside the network weights. A trained model is fit to a
//! monocular depth sequence by optimizing one shape code and per-frame pose
//! codes against volumetric observations.
//!
//! Module map:
//! - [`math`]: dense tensors, reverse-mode gradients, the decoder MLPs,
//!   the voxel encoders, Adam, and the checkpoint container.
//! - [`geometry`]: triangle meshes, signed distance queries, sampling,
//!   marching cubes, volumetric grids, nearest-neighbor indices.
//! - [`corpus`]: the procedural capsule-skeleton corpus generator and the
//!   depth renderer.
//! - [`spaces`]: shape-space and pose-space training plus the convolutional
//!   initialization encoders.
//! - [`fitting`]: depth-to-SDF observations and inference-time latent
//!   optimization, reconstruction, transfer and interpolation.
//! - [`metrics`]: IoU, Chamfer-l2 and end-point-error evaluation.
//! - [`config`]: run configuration shared by the CLI sub-commands.

pub mod config;
pub mod corpus;
pub mod fitting;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod spaces;

/// Derives a child seed from a run seed and a context tag (FNV-1a over the
/// tag and index). Keeps independent pipeline stages decorrelated while
/// staying reproducible across platforms.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^= index;
    h = h.wrapping_mul(0x1000_0000_01b3);
    h
}
