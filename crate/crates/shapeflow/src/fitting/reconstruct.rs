//! Turning optimized codes back into meshes: one canonical extraction that
//! is deformed into every frame, plus code recombination and interpolation.

use ndarray::Array2;

use super::FittingError;
use crate::geometry::{extract_isosurface, TriMesh};
use crate::spaces::PoseSpace;

/// Extracts the canonical isosurface of `shape_code` once and deforms a
/// copy into every frame by adding the decoded flow at each vertex. All
/// returned meshes share the canonical triangulation.
pub fn reconstruct_sequence(
    spaces: &PoseSpace,
    shape_code: &Array2<f64>,
    pose_codes: &[Array2<f64>],
    resolution: usize,
) -> Result<(TriMesh, Vec<TriMesh>), FittingError> {
    let grid = spaces.shape.decode_grid(shape_code, resolution, true);
    let canonical = extract_isosurface(&grid, 0.0);
    if canonical.vertices.is_empty() {
        return Err(FittingError::EmptyIsosurface);
    }
    let posed = pose_codes
        .iter()
        .map(|pose_code| {
            let flows = spaces.flow(shape_code, pose_code, &canonical.vertices);
            let vertices = canonical
                .vertices
                .iter()
                .zip(&flows)
                .map(|(v, f)| [v[0] + f[0], v[1] + f[1], v[2] + f[2]])
                .collect();
            TriMesh {
                vertices,
                triangles: canonical.triangles.clone(),
            }
        })
        .collect();
    Ok((canonical, posed))
}

/// Reposes one identity with another sequence's pose codes. The codes must
/// come from the same trained spaces; the mechanics are exactly those of
/// [`reconstruct_sequence`], named separately because recombining codes
/// across fits is the transfer entry point.
pub fn transfer(
    spaces: &PoseSpace,
    shape_code: &Array2<f64>,
    pose_codes: &[Array2<f64>],
    resolution: usize,
) -> Result<(TriMesh, Vec<TriMesh>), FittingError> {
    reconstruct_sequence(spaces, shape_code, pose_codes, resolution)
}

/// Linear interpolation between two codes, inclusive of both endpoints.
/// `steps` counts the returned codes and must be at least 2.
pub fn interpolate_codes(
    a: &Array2<f64>,
    b: &Array2<f64>,
    steps: usize,
) -> Result<Vec<Array2<f64>>, FittingError> {
    if a.dim() != b.dim() {
        return Err(FittingError::Dimension {
            expected: a.len(),
            got: b.len(),
            context: "interpolation endpoints",
        });
    }
    if steps < 2 {
        return Err(FittingError::InvalidConfig(
            "interpolation needs at least the two endpoints".into(),
        ));
    }
    Ok((0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            a * (1.0 - t) + b * t
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::MlpParams;
    use crate::spaces::{PoseConfig, ShapeConfig, ShapeSpace};
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
            codes: vec![array![[0.1, -0.2, 0.3, 0.05]]],
            delta: shape_config.delta,
            sigma: shape_config.sigma,
        };
        PoseSpace {
            shape,
            params: MlpParams::init(pose_config.mlp_config(4), &mut rng),
            codes: vec![array![[0.02, 0.01, -0.03]], array![[0.0, -0.05, 0.04]]],
            identity_of: vec![0, 0],
            sigma: pose_config.sigma,
        }
    }

    /// Zeroes the output layer's magnitudes and writes `bias` into its
    /// biases, making the decoded flow constant everywhere.
    fn freeze_flow(spaces: &mut PoseSpace, bias: [f64; 3]) {
        let layer = spaces.params.layers.last_mut().unwrap();
        layer.g.fill(0.0);
        layer.b = array![[bias[0], bias[1], bias[2]]];
    }

    #[test]
    fn constant_flow_translates_the_canonical_mesh() {
        let mut spaces = tiny_spaces(23);
        let t = [0.05, -0.03, 0.02];
        freeze_flow(&mut spaces, t);
        let shape_code = spaces.shape.code(0).clone();
        let poses = vec![spaces.code(0).clone(), spaces.code(1).clone()];
        let (canonical, posed) =
            reconstruct_sequence(&spaces, &shape_code, &poses, 20).unwrap();
        assert_eq!(posed.len(), 2);
        for mesh in &posed {
            assert_eq!(mesh.triangles, canonical.triangles);
            for (v, c) in mesh.vertices.iter().zip(&canonical.vertices) {
                for axis in 0..3 {
                    assert!((v[axis] - (c[axis] + t[axis])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reposing_preserves_topology_across_frames() {
        let spaces = tiny_spaces(23);
        let shape_code = spaces.shape.code(0).clone();
        let poses = vec![spaces.code(0).clone(), spaces.code(1).clone()];
        let (canonical, posed) =
            reconstruct_sequence(&spaces, &shape_code, &poses, 20).unwrap();
        for mesh in &posed {
            assert_eq!(mesh.vertices.len(), canonical.vertices.len());
            assert_eq!(mesh.triangles, canonical.triangles);
        }
    }

    #[test]
    fn empty_isosurface_is_an_error() {
        let mut spaces = tiny_spaces(23);
        let mut tensors = spaces.shape.params.tensors_mut();
        let last = tensors.len() - 1;
        tensors[last].mapv_inplace(|b| b + 6.0);
        drop(tensors);
        let shape_code = spaces.shape.code(0).clone();
        let poses = vec![spaces.code(0).clone()];
        assert!(matches!(
            reconstruct_sequence(&spaces, &shape_code, &poses, 16),
            Err(FittingError::EmptyIsosurface)
        ));
    }

    #[test]
    fn transfer_with_identical_codes_reproduces_the_reconstruction() {
        let spaces = tiny_spaces(23);
        let shape_code = spaces.shape.code(0).clone();
        let poses = vec![spaces.code(0).clone(), spaces.code(1).clone()];
        let direct = reconstruct_sequence(&spaces, &shape_code, &poses, 20).unwrap();
        let via_transfer = transfer(&spaces, &shape_code, &poses, 20).unwrap();
        assert_eq!(direct.0.vertices, via_transfer.0.vertices);
        for (a, b) in direct.1.iter().zip(&via_transfer.1) {
            assert_eq!(a.vertices, b.vertices);
            assert_eq!(a.triangles, b.triangles);
        }
    }

    #[test]
    fn interpolation_hits_endpoints_and_midpoint() {
        let a = array![[1.0, -2.0, 0.5]];
        let b = array![[-1.0, 2.0, -0.5]];
        let steps = interpolate_codes(&a, &b, 11).unwrap();
        assert_eq!(steps.len(), 11);
        assert_eq!(steps[0], a);
        assert_eq!(steps[10], b);
        // a and b are negatives of each other, so the midpoint is zero.
        assert!(steps[5].iter().all(|v| v.abs() < 1e-15));
        for w in steps.windows(2) {
            let d = &w[1] - &w[0];
            assert!((d[[0, 0]] - (-0.2)).abs() < 1e-12, "uniform spacing");
        }
    }

    #[test]
    fn interpolation_rejects_mismatched_dims_and_short_ranges() {
        let a = array![[1.0, 2.0]];
        let b = array![[1.0, 2.0, 3.0]];
        assert!(matches!(
            interpolate_codes(&a, &b, 5),
            Err(FittingError::Dimension { .. })
        ));
        let b = array![[0.0, 0.0]];
        assert!(interpolate_codes(&a, &b, 1).is_err());
        let two = interpolate_codes(&a, &b, 2).unwrap();
        assert_eq!(two[0], a);
        assert_eq!(two[1], b);
    }
}
