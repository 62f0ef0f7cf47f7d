//! Depth observations as truncated projective SDF grids.
//!
//! Each depth frame is projected into a node grid over the unit box: every
//! node is pushed through the camera, looks up the depth at its pixel, and
//! stores the signed distance along its viewing ray to the observed surface
//! (positive in front, negative behind), clamped to a working band. The
//! observation mask excludes nodes that are occluded (further than the
//! cutoff behind the surface), outside the frustum, or on rays that saw no
//! surface. The same grids feed the voxel encoders through a thresholded
//! occupancy view.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FittingError;
use crate::corpus::{CorpusManifest, DepthFrame};
use crate::derive_seed;
use crate::geometry::{vec3, SdfGrid};
use crate::spaces::{
    train_voxel_encoder, EncoderConfig, EncoderSample, EpochStats, PoseSpace, VoxelEncoder,
};

/// Width of the stored working band as a multiple of the occlusion cutoff.
/// The mask already drops everything more than one cutoff behind the
/// surface, but values in front are kept out to a full decoder truncation
/// band (10 x 0.01 = 0.1 at the defaults) so free space keeps pulling the
/// surface outward during fitting.
pub const BAND_FACTOR: f64 = 10.0;

/// Projects a depth frame into a `resolution`^3 SDF grid over the unit box.
///
/// A node more than `cutoff` behind the observed surface, outside the
/// camera frustum, or on a ray without depth is marked unobserved; stored
/// values are clamped to `±BAND_FACTOR * cutoff`.
pub fn depth_to_observation(frame: &DepthFrame, resolution: usize, cutoff: f64) -> SdfGrid {
    assert!(cutoff > 0.0, "occlusion cutoff must be positive");
    let mut grid = SdfGrid::unit_box(resolution);
    let band = BAND_FACTOR * cutoff;
    let cam = &frame.camera;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut mask = vec![false; grid.len()];
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let idx = grid.index(i, j, k);
                let p = grid.node_pos(i, j, k);
                let Some((px, py, z)) = cam.project(p) else {
                    continue;
                };
                if !(px >= 0.0 && px < w && py >= 0.0 && py < h) {
                    continue;
                }
                let depth = frame.depth_at(px as usize, py as usize);
                if depth <= 0.0 {
                    continue;
                }
                // Both the node and the surface sample sit on the ray
                // through the node, so the along-ray distance is the depth
                // difference scaled by the ray length per unit depth.
                let ray_scale = vec3::norm(vec3::sub(p, cam.position())) / z;
                let signed = (depth - z) * ray_scale;
                grid.values[idx] = signed.clamp(-band, band);
                mask[idx] = signed >= -cutoff;
            }
        }
    }
    grid.mask = Some(mask);
    grid
}

/// Collapses an observation grid into the encoder's occupancy view: 1.0 at
/// nodes that are observed and strictly inside the `band` truncation of the
/// surface, 0.0 everywhere else.
pub fn observation_to_occupancy(grid: &SdfGrid, band: f64) -> Vec<f64> {
    assert!(band > 0.0, "occupancy band must be positive");
    let observed = |idx: usize| grid.mask.as_ref().map_or(true, |m| m[idx]);
    grid.values
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            if observed(idx) && v.abs() < band {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Keeps at most `cap` points, chosen by a seeded draw without replacement;
/// the survivors stay in their original order.
pub fn subsample_points(points: &[[f64; 3]], cap: usize, seed: u64) -> Vec<[f64; 3]> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

fn occupancy_for_frame(frame: &DepthFrame, resolution: usize, cutoff: f64) -> Vec<f64> {
    let grid = depth_to_observation(frame, resolution, cutoff);
    observation_to_occupancy(&grid, BAND_FACTOR * cutoff)
}

/// Trains the shape and pose initialization encoders on the corpus depth
/// renders. Every posed view regresses to the code of its underlying
/// identity (shape) and to its own instance code (pose).
#[allow(clippy::type_complexity)]
pub fn train_corpus_encoders(
    manifest: &CorpusManifest,
    spaces: &PoseSpace,
    config: &EncoderConfig,
    cutoff: f64,
) -> Result<(VoxelEncoder, VoxelEncoder, Vec<EpochStats>, Vec<EpochStats>), FittingError> {
    if spaces.instance_count() != manifest.instances.len() {
        return Err(FittingError::Dimension {
            expected: manifest.instances.len(),
            got: spaces.instance_count(),
            context: "pose codes per corpus instance",
        });
    }
    let mut shape_samples = Vec::with_capacity(manifest.instances.len());
    let mut pose_samples = Vec::with_capacity(manifest.instances.len());
    for (j, inst) in manifest.instances.iter().enumerate() {
        let frame = manifest.load_depth(&inst.depth)?;
        let occupancy = occupancy_for_frame(&frame, config.input_res, cutoff);
        shape_samples.push(EncoderSample {
            grid: occupancy.clone(),
            target: spaces.shape.code(spaces.identity_of[j]).clone(),
        });
        pose_samples.push(EncoderSample {
            grid: occupancy,
            target: spaces.code(j).clone(),
        });
    }
    let shape_config = EncoderConfig {
        seed: derive_seed(config.seed, "encoders/shape", 0),
        ..config.clone()
    };
    let pose_config = EncoderConfig {
        seed: derive_seed(config.seed, "encoders/pose", 0),
        ..config.clone()
    };
    let (shape_encoder, shape_stats) = train_voxel_encoder(&shape_samples, &shape_config)?;
    let (pose_encoder, pose_stats) = train_voxel_encoder(&pose_samples, &pose_config)?;
    Ok((shape_encoder, pose_encoder, shape_stats, pose_stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_depth, Camera};
    use crate::geometry::TriMesh;

    /// Two-triangle quad in the z = `z` plane spanning [-half, half]^2.
    fn plane_mesh(z: f64, half: f64) -> TriMesh {
        TriMesh {
            vertices: vec![
                [-half, -half, z],
                [half, -half, z],
                [half, half, z],
                [-half, half, z],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    fn plane_frame() -> DepthFrame {
        let camera = Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, 1.0, 0.0], 64, 64, 60.0);
        render_depth(&plane_mesh(0.0, 0.45), &camera)
    }

    #[test]
    fn plane_projection_flips_sign_at_the_surface_layer() {
        let frame = plane_frame();
        // Cutoff wider than the 1/32 node spacing so at least one node
        // behind the plane survives the occlusion mask.
        let grid = depth_to_observation(&frame, 33, 0.05);
        let mask = grid.mask.clone().unwrap();
        // Walk the central column along the viewing axis: in front of the
        // plane (z < 0) the SDF is positive, behind it negative.
        let mid = 16;
        let mut front_seen = false;
        let mut back_seen = false;
        for k in 0..33 {
            let idx = grid.index(mid, mid, k);
            if !mask[idx] {
                continue;
            }
            let z = grid.node_pos(mid, mid, k)[2];
            if z < -1e-9 {
                assert!(grid.values[idx] > 0.0, "node at z={z} should be in front");
                front_seen = true;
            } else if z > 1e-9 {
                assert!(grid.values[idx] < 0.0, "node at z={z} should be behind");
                back_seen = true;
            } else {
                assert!(grid.values[idx].abs() < 1e-9, "node on the plane");
            }
        }
        assert!(front_seen && back_seen, "column must straddle the plane");
    }

    #[test]
    fn nodes_far_behind_the_surface_are_masked() {
        let frame = plane_frame();
        let grid = depth_to_observation(&frame, 41, 0.01);
        let mask = grid.mask.as_ref().unwrap();
        let mid = 20;
        // 41 nodes over the unit box put layers every 0.025; z = +0.05 sits
        // two layers behind the observed plane, past the 0.01 cutoff.
        let k_behind = (0.05 + 0.5) / grid.voxel;
        let idx = grid.index(mid, mid, k_behind.round() as usize);
        assert!(!mask[idx], "0.05 behind the surface must be occluded");
        // One layer in front stays observed with a positive value.
        let k_front = (-0.025 + 0.5) / grid.voxel;
        let idx = grid.index(mid, mid, k_front.round() as usize);
        assert!(mask[idx]);
        assert!(grid.values[idx] > 0.0);
    }

    #[test]
    fn values_are_clamped_to_the_working_band() {
        let frame = plane_frame();
        let grid = depth_to_observation(&frame, 33, 0.01);
        let band = BAND_FACTOR * 0.01;
        for v in &grid.values {
            assert!(v.abs() <= band + 1e-12);
        }
        // Nodes well in front of the plane saturate at +band.
        let idx = grid.index(16, 16, 0);
        assert_eq!(grid.values[idx], band);
    }

    #[test]
    fn all_miss_frame_masks_every_node() {
        let camera = Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, 1.0, 0.0], 32, 32, 60.0);
        let frame = DepthFrame {
            depth: vec![0.0; 32 * 32],
            camera,
        };
        let grid = depth_to_observation(&frame, 17, 0.01);
        assert_eq!(grid.observed_fraction(), 0.0);
        assert!(grid.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nodes_outside_the_frustum_are_masked() {
        // A very narrow field of view sees only the center of the box; the
        // corners project outside the image and stay unobserved.
        let camera = Camera::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], 64, 64, 8.0);
        let frame = render_depth(&plane_mesh(0.0, 0.45), &camera);
        let grid = depth_to_observation(&frame, 17, 0.01);
        let mask = grid.mask.as_ref().unwrap();
        assert!(!mask[grid.index(0, 0, 0)]);
        assert!(!mask[grid.index(16, 16, 0)]);
        assert!(mask[grid.index(8, 8, 0)], "central column is visible");
    }

    #[test]
    fn observation_is_deterministic() {
        let frame = plane_frame();
        let a = depth_to_observation(&frame, 25, 0.01);
        let b = depth_to_observation(&frame, 25, 0.01);
        assert_eq!(a.values, b.values);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn occupancy_thresholds_band_and_mask() {
        let mut grid = SdfGrid::new([2, 2, 2], [0.0; 3], 1.0);
        grid.values = vec![0.0, 0.05, -0.05, 0.1, -0.1, 0.2, 0.099, -0.099];
        grid.mask = Some(vec![true, true, true, true, true, true, false, false]);
        let occ = observation_to_occupancy(&grid, 0.1);
        // Band is strict: |v| = 0.1 is out; masked nodes are always out.
        assert_eq!(occ, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        grid.mask = None;
        let occ = observation_to_occupancy(&grid, 0.1);
        assert_eq!(occ[6], 1.0, "no mask means fully observed");
    }

    #[test]
    fn subsample_respects_cap_and_keeps_order() {
        let points: Vec<[f64; 3]> = (0..100).map(|i| [i as f64, 0.0, 0.0]).collect();
        let kept = subsample_points(&points, 10, 42);
        assert_eq!(kept.len(), 10);
        for w in kept.windows(2) {
            assert!(w[0][0] < w[1][0], "order preserved");
        }
        assert_eq!(subsample_points(&points, 200, 42).len(), 100);
        let again = subsample_points(&points, 10, 42);
        assert_eq!(kept, again, "seeded draw is deterministic");
    }
}
