//! Assembling a fitting problem: per-frame observations and clouds, code
//! initialization, and the canonical template point set.

use ndarray::Array2;
use rand::Rng;
use std::sync::Arc;

use super::observation::{
    depth_to_observation, observation_to_occupancy, subsample_points, BAND_FACTOR,
};
use super::{FittingConfig, FittingError};
use crate::corpus::DepthFrame;
use crate::derive_seed;
use crate::geometry::{extract_isosurface, SdfGrid, SurfaceSampler};
use crate::spaces::{average_code, PoseSpace, ShapeSpace, VoxelEncoder};

/// A depth sequence prepared for optimization: frozen spaces, one masked
/// observation grid and one back-projected cloud per frame, and the energy
/// configuration.
pub struct FittingProblem<'a> {
    pub spaces: &'a PoseSpace,
    pub frames: Vec<DepthFrame>,
    pub observations: Vec<SdfGrid>,
    pub clouds: Vec<Arc<Vec<[f64; 3]>>>,
    pub config: FittingConfig,
}

impl<'a> FittingProblem<'a> {
    /// Builds observation grids and pull-term clouds for every frame.
    pub fn from_depth(
        spaces: &'a PoseSpace,
        frames: Vec<DepthFrame>,
        config: FittingConfig,
    ) -> Result<Self, FittingError> {
        config.validate()?;
        if frames.is_empty() {
            return Err(FittingError::EmptySequence);
        }
        let observations: Vec<SdfGrid> = frames
            .iter()
            .map(|f| depth_to_observation(f, config.grid_resolution, config.occlusion_cutoff))
            .collect();
        let clouds: Vec<Arc<Vec<[f64; 3]>>> = frames
            .iter()
            .enumerate()
            .map(|(j, f)| {
                Arc::new(subsample_points(
                    &f.observed_points(),
                    config.icp_cloud_cap,
                    derive_seed(config.seed, "fit/cloud", j as u64),
                ))
            })
            .collect();
        Ok(FittingProblem {
            spaces,
            frames,
            observations,
            clouds,
            config,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// Initial codes for a fitting problem: the encoder route averages the
/// per-frame shape estimates and keeps per-frame pose estimates; without
/// encoders both codes fall back to the train-table means.
#[allow(clippy::type_complexity)]
pub fn initialize_codes(
    problem: &FittingProblem,
    encoders: Option<(&VoxelEncoder, &VoxelEncoder)>,
) -> Result<(Array2<f64>, Vec<Array2<f64>>), FittingError> {
    let spaces = problem.spaces;
    match encoders {
        Some((shape_encoder, pose_encoder)) => {
            if shape_encoder.code_dim() != spaces.shape.code_dim() {
                return Err(FittingError::Dimension {
                    expected: spaces.shape.code_dim(),
                    got: shape_encoder.code_dim(),
                    context: "shape encoder output",
                });
            }
            if pose_encoder.code_dim() != spaces.code_dim() {
                return Err(FittingError::Dimension {
                    expected: spaces.code_dim(),
                    got: pose_encoder.code_dim(),
                    context: "pose encoder output",
                });
            }
            let cutoff = problem.config.occlusion_cutoff;
            let mut shape_estimates = Vec::with_capacity(problem.frames.len());
            let mut pose_codes = Vec::with_capacity(problem.frames.len());
            for frame in &problem.frames {
                let grid = depth_to_observation(frame, shape_encoder.input_res(), cutoff);
                let occupancy = observation_to_occupancy(&grid, BAND_FACTOR * cutoff);
                shape_estimates.push(shape_encoder.encode(&occupancy)?);
                if pose_encoder.input_res() == shape_encoder.input_res() {
                    pose_codes.push(pose_encoder.encode(&occupancy)?);
                } else {
                    let grid = depth_to_observation(frame, pose_encoder.input_res(), cutoff);
                    let occupancy = observation_to_occupancy(&grid, BAND_FACTOR * cutoff);
                    pose_codes.push(pose_encoder.encode(&occupancy)?);
                }
            }
            Ok((average_code(&shape_estimates)?, pose_codes))
        }
        None => {
            let shape = average_code(&spaces.shape.codes)?;
            let pose = average_code(&spaces.codes)?;
            Ok((shape, vec![pose; problem.frames.len()]))
        }
    }
}

/// Samples the canonical template: `count` area-weighted surface points of
/// the decoded isosurface, each displaced by an isotropic Gaussian. Returns
/// the points and whether the decode was empty and uniform box samples were
/// used instead.
pub fn sample_fitting_points<R: Rng>(
    space: &ShapeSpace,
    code: &Array2<f64>,
    count: usize,
    sigma: f64,
    mesh_resolution: usize,
    rng: &mut R,
) -> (Vec<[f64; 3]>, bool) {
    let grid = space.decode_grid(code, mesh_resolution, true);
    let mesh = extract_isosurface(&grid, 0.0);
    let Ok(sampler) = SurfaceSampler::new(&mesh) else {
        let uniform = (0..count)
            .map(|_| {
                [
                    rng.gen_range(-0.5..=0.5),
                    rng.gen_range(-0.5..=0.5),
                    rng.gen_range(-0.5..=0.5),
                ]
            })
            .collect();
        return (uniform, true);
    };
    let points = (0..count)
        .map(|_| {
            let s = sampler.sample(&mesh, rng);
            let mut p = s.position;
            for c in &mut p {
                *c += sigma * crate::math::standard_normal(rng);
            }
            p
        })
        .collect();
    (points, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_depth, Camera};
    use crate::geometry::sdf::icosphere;
    use crate::geometry::MeshSdf;
    use crate::math::{MlpParams, VoxelConvStack};
    use crate::spaces::{EncoderConfig, PoseConfig, ShapeConfig};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spaces(seed: u64) -> PoseSpace {
        let shape_config = ShapeConfig {
            code_dim: 4,
            hidden_dim: 16,
            hidden_layers: 3,
            skip_layer: 1,
            ..ShapeConfig::default()
        };
        let pose_config = PoseConfig {
            code_dim: 3,
            hidden_dim: 16,
            hidden_layers: 3,
            skip_layer: 1,
            ..PoseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = ShapeSpace {
            params: MlpParams::init(shape_config.mlp_config(), &mut rng),
            codes: vec![array![[0.1, -0.2, 0.3, 0.05]], array![[-0.4, 0.0, 0.2, 0.1]]],
            delta: shape_config.delta,
            sigma: shape_config.sigma,
        };
        PoseSpace {
            shape,
            params: MlpParams::init(pose_config.mlp_config(4), &mut rng),
            codes: vec![
                array![[0.02, 0.01, -0.03]],
                array![[0.0, -0.05, 0.04]],
                array![[0.06, 0.02, 0.01]],
            ],
            identity_of: vec![0, 0, 1],
            sigma: pose_config.sigma,
        }
    }

    fn sphere_frames(n: usize) -> Vec<DepthFrame> {
        let camera = Camera::look_at([0.0, 0.0, -1.2], [0.0; 3], [0.0, 1.0, 0.0], 48, 48, 60.0);
        let mesh = icosphere([0.0; 3], 0.3, 2);
        (0..n).map(|_| render_depth(&mesh, &camera)).collect()
    }

    fn small_config() -> FittingConfig {
        FittingConfig {
            grid_resolution: 24,
            mesh_resolution: 24,
            template_points: 500,
            subbatch: 64,
            iterations: 8,
            icp_cloud_cap: 100,
            seed: 5,
            ..FittingConfig::default()
        }
    }

    #[test]
    fn problem_construction_builds_grids_and_capped_clouds() {
        let spaces = tiny_spaces(3);
        let problem =
            FittingProblem::from_depth(&spaces, sphere_frames(3), small_config()).unwrap();
        assert_eq!(problem.frame_count(), 3);
        for grid in &problem.observations {
            assert_eq!(grid.res, [24; 3]);
            assert!(grid.mask.is_some());
        }
        for cloud in &problem.clouds {
            assert!(!cloud.is_empty() && cloud.len() <= 100);
        }
        assert!(
            FittingProblem::from_depth(&spaces, Vec::new(), small_config()).is_err(),
            "empty sequences are rejected"
        );
    }

    #[test]
    fn average_initialization_equals_table_means() {
        let spaces = tiny_spaces(3);
        let problem =
            FittingProblem::from_depth(&spaces, sphere_frames(2), small_config()).unwrap();
        let (shape, poses) = initialize_codes(&problem, None).unwrap();
        let expected_shape = average_code(&spaces.shape.codes).unwrap();
        let expected_pose = average_code(&spaces.codes).unwrap();
        assert_eq!(shape, expected_shape);
        assert_eq!(poses.len(), 2);
        for p in &poses {
            assert_eq!(*p, expected_pose);
        }
    }

    #[test]
    fn single_frame_encoder_initialization_is_that_frames_encoding() {
        let spaces = tiny_spaces(9);
        let config = small_config();
        let enc_config = EncoderConfig {
            input_res: 8,
            channels: vec![4, 8],
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape_encoder = VoxelEncoder {
            stack: VoxelConvStack::init(
                enc_config.input_res,
                &enc_config.channels,
                spaces.shape.code_dim(),
                &mut rng,
            ),
        };
        let pose_encoder = VoxelEncoder {
            stack: VoxelConvStack::init(
                enc_config.input_res,
                &enc_config.channels,
                spaces.code_dim(),
                &mut rng,
            ),
        };
        let cutoff = config.occlusion_cutoff;
        let problem = FittingProblem::from_depth(&spaces, sphere_frames(1), config).unwrap();
        let (shape, poses) =
            initialize_codes(&problem, Some((&shape_encoder, &pose_encoder))).unwrap();

        let grid = depth_to_observation(&problem.frames[0], 8, cutoff);
        let occupancy = observation_to_occupancy(&grid, BAND_FACTOR * cutoff);
        assert_eq!(shape, shape_encoder.encode(&occupancy).unwrap());
        assert_eq!(poses[0], pose_encoder.encode(&occupancy).unwrap());
    }

    #[test]
    fn encoder_dimension_mismatch_is_reported() {
        let spaces = tiny_spaces(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wrong = VoxelEncoder {
            stack: VoxelConvStack::init(8, &[4, 8], spaces.shape.code_dim() + 1, &mut rng),
        };
        let ok = VoxelEncoder {
            stack: VoxelConvStack::init(8, &[4, 8], spaces.code_dim(), &mut rng),
        };
        let problem =
            FittingProblem::from_depth(&spaces, sphere_frames(1), small_config()).unwrap();
        assert!(matches!(
            initialize_codes(&problem, Some((&wrong, &ok))),
            Err(FittingError::Dimension { .. })
        ));
    }

    #[test]
    fn template_sampling_count_and_displacement_envelope() {
        // Train nothing: any non-empty decoded surface works because the
        // displacement is measured against that same surface.
        let spaces = tiny_spaces(21);
        let space = &spaces.shape;
        let code = space.code(0).clone();
        let grid = space.decode_grid(&code, 32, true);
        let mesh = extract_isosurface(&grid, 0.0);
        if mesh.vertices.is_empty() {
            // This seed decodes to an empty surface; the fallback test below
            // covers that path. Pick a seed that crosses zero instead.
            panic!("fixture seed no longer decodes to a surface; adjust the test seed");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (points, fallback) = sample_fitting_points(space, &code, 4000, 0.015, 32, &mut rng);
        assert_eq!(points.len(), 4000);
        assert!(!fallback);
        let sdf = MeshSdf::build(mesh).unwrap();
        let mean_dist: f64 = points
            .iter()
            .map(|p| sdf.unsigned_distance(*p))
            .sum::<f64>()
            / points.len() as f64;
        assert!(
            (0.01..=0.04).contains(&mean_dist),
            "mean displacement {mean_dist} outside the expected envelope"
        );
    }

    #[test]
    fn empty_isosurface_falls_back_to_uniform_box_samples() {
        let spaces = tiny_spaces(4);
        let mut space = spaces.shape.clone();
        // Push the final bias far positive: the decoded SDF never crosses
        // zero and the isosurface is empty.
        let mut tensors = space.params.tensors_mut();
        let last = tensors.len() - 1;
        tensors[last].mapv_inplace(|b| b + 6.0);
        drop(tensors);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let code = space.code(0).clone();
        let (points, fallback) = sample_fitting_points(&space, &code, 200, 0.015, 16, &mut rng);
        assert!(fallback);
        assert_eq!(points.len(), 200);
        for p in &points {
            assert!(p.iter().all(|c| (-0.5..=0.5).contains(c)));
        }
    }
}
