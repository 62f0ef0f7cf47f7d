//! Canonical meshes and linear blend skinning.
//!
//! Every identity shares one template triangulation: the template is an
//! isosurface extraction of a reference figure, and each identity is
//! produced by projecting the template vertices onto that identity's
//! analytic capsule-union surface. Identities therefore differ only in
//! vertex positions, which gives exact dense correspondence across the
//! whole corpus, and posed instances inherit the same correspondence
//! through skinning.

use rayon::prelude::*;

use super::skeleton::{capsule_sdf, IdentitySpec, PoseSpec, Skeleton};
use super::CorpusError;
use crate::geometry::{extract_isosurface, vec3, SdfGrid, TriMesh};

/// Sharpness of the inverse-distance skinning weights.
const WEIGHT_POWER: i32 = 4;
/// Softening radius for the skinning weights, in raw units.
const WEIGHT_EPS: f64 = 0.01;
/// Largest permitted |signed distance| after vertex projection.
const PROJECTION_TOL: f64 = 1e-7;

/// Proportions of the reference figure used to build the shared template
/// triangulation. Identity parameters are drawn near these values.
pub fn reference_spec() -> IdentitySpec {
    IdentitySpec {
        torso_half_height: 0.30,
        torso_radius: 0.13,
        head_length: 0.16,
        head_radius: 0.09,
        arm_upper_length: 0.26,
        arm_lower_length: 0.24,
        arm_radius: 0.045,
        leg_upper_length: 0.36,
        leg_lower_length: 0.34,
        leg_radius: 0.055,
    }
}

/// Meshes the capsule union of a skeleton on a node grid whose longest axis
/// has `resolution` nodes.
pub fn mesh_for_skeleton(skel: &Skeleton, resolution: usize) -> Result<TriMesh, CorpusError> {
    assert!(resolution >= 8, "skeleton meshing needs at least 8 nodes");
    let (lo, hi) = skel.bounds();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let voxel = extent / (resolution - 1) as f64;
    let margin = 2.5 * voxel;
    let mut res = [0usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        origin[a] = lo[a] - margin;
        let span = hi[a] - lo[a] + 2.0 * margin;
        res[a] = (span / voxel).ceil() as usize + 1;
    }
    let grid = SdfGrid::from_fn(res, origin, voxel, |p| skel.signed_distance(p));
    let mesh = extract_isosurface(&grid, 0.0);
    if mesh.vertices.is_empty() {
        return Err(CorpusError::InvalidSpec(
            "skeleton produced an empty isosurface".into(),
        ));
    }
    if !mesh.is_watertight() {
        return Err(CorpusError::InvalidSpec(
            "skeleton isosurface is not watertight".into(),
        ));
    }
    Ok(mesh)
}

/// The shared template triangulation.
#[derive(Debug, Clone)]
pub struct CanonicalTemplate {
    pub skeleton: Skeleton,
    pub mesh: TriMesh,
    pub resolution: usize,
}

impl CanonicalTemplate {
    pub fn build(resolution: usize) -> Result<Self, CorpusError> {
        let spec = reference_spec();
        let skeleton = Skeleton::figure(&spec)?;
        let mesh = mesh_for_skeleton(&skeleton, resolution)?;
        Ok(CanonicalTemplate {
            skeleton,
            mesh,
            resolution,
        })
    }
}

/// One identity ready for posing: canonical mesh in raw units plus dense
/// per-vertex skinning weights over the skeleton bones.
#[derive(Debug, Clone)]
pub struct IdentityRig {
    pub spec: IdentitySpec,
    pub skeleton: Skeleton,
    pub canonical: TriMesh,
    pub weights: Vec<Vec<f64>>,
}

/// Instantiates an identity by projecting the template vertices onto the
/// identity's capsule-union surface. The output mesh reuses the template
/// triangulation, so all identities built from one template have identical
/// topology.
pub fn build_identity(
    spec: &IdentitySpec,
    template: &CanonicalTemplate,
) -> Result<IdentityRig, CorpusError> {
    spec.validate()?;
    let skeleton = Skeleton::figure(spec)?;
    let projected: Vec<([f64; 3], f64)> = template
        .mesh
        .vertices
        .par_iter()
        .map(|&v| project_to_surface(&skeleton, v))
        .collect();
    let residual = projected
        .iter()
        .map(|(_, r)| *r)
        .fold(0.0, f64::max);
    if residual > PROJECTION_TOL {
        return Err(CorpusError::ProjectionFailed { residual });
    }
    let vertices: Vec<[f64; 3]> = projected.into_iter().map(|(v, _)| v).collect();
    let weights = vertices
        .par_iter()
        .map(|&v| skin_weights(&skeleton, v))
        .collect();
    let canonical = TriMesh::new(vertices, template.mesh.triangles.clone())?;
    Ok(IdentityRig {
        spec: spec.clone(),
        skeleton,
        canonical,
        weights,
    })
}

/// Damped first-order projection of a point onto the zero level set.
fn project_to_surface(skel: &Skeleton, start: [f64; 3]) -> ([f64; 3], f64) {
    let mut p = start;
    let mut best = p;
    let mut best_abs = f64::INFINITY;
    let mut step = 1.0;
    for _ in 0..64 {
        let d = skel.signed_distance(p);
        if d.abs() < best_abs {
            best_abs = d.abs();
            best = p;
        } else {
            // Overshot a crease between two capsules: halve the step and
            // retry from the best point seen so far.
            step *= 0.5;
            p = best;
        }
        if best_abs <= 1e-12 || step < 1e-9 {
            break;
        }
        let d = skel.signed_distance(p);
        let g = skel.distance_gradient(p);
        p = vec3::sub(p, vec3::scale(g, step * d));
    }
    (best, best_abs)
}

/// Normalized inverse-distance weights over the bones. Vertices on a single
/// capsule are dominated by that bone; vertices near a joint blend between
/// the adjacent bones.
fn skin_weights(skel: &Skeleton, v: [f64; 3]) -> Vec<f64> {
    let mut w: Vec<f64> = skel
        .bones
        .iter()
        .map(|b| {
            let d = capsule_sdf(v, b.start, b.end, b.radius).max(0.0);
            (WEIGHT_EPS + d).powi(-WEIGHT_POWER)
        })
        .collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Linear blend skinning: each canonical vertex is moved by the weighted
/// blend of its bone transforms. The triangulation is reused, so posed
/// instances of one identity are in exact vertex correspondence with the
/// canonical mesh.
pub fn pose_identity(rig: &IdentityRig, pose: &PoseSpec) -> Result<TriMesh, CorpusError> {
    let world = rig.skeleton.bone_transforms(pose)?;
    let vertices: Vec<[f64; 3]> = rig
        .canonical
        .vertices
        .par_iter()
        .zip(rig.weights.par_iter())
        .map(|(&v, w)| {
            let mut out = [0.0; 3];
            for (wb, t) in w.iter().zip(world.iter()) {
                if *wb != 0.0 {
                    out = vec3::add(out, vec3::scale(t.apply(v), *wb));
                }
            }
            out
        })
        .collect();
    TriMesh::new(vertices, rig.canonical.triangles.clone()).map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::skeleton::Bone;
    use crate::geometry::MeshSdf;
    use approx::assert_relative_eq;

    fn template() -> CanonicalTemplate {
        CanonicalTemplate::build(72).unwrap()
    }

    #[test]
    fn single_capsule_meshes_to_watertight_tube() {
        let skel = Skeleton {
            bones: vec![Bone {
                name: "tube",
                parent: None,
                start: [-0.4, 0.0, 0.0],
                end: [0.4, 0.0, 0.0],
                radius: 0.15,
                axis: [1.0, 0.0, 0.0],
            }],
        };
        let mesh = mesh_for_skeleton(&skel, 48).unwrap();
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        let sdf = MeshSdf::build(mesh).unwrap();
        assert!(sdf.signed_distance([0.0, 0.0, 0.0]) < 0.0);
        assert!(sdf.signed_distance([0.0, 0.5, 0.0]) > 0.0);
    }

    #[test]
    fn template_figure_is_closed_genus_zero() {
        let t = template();
        assert!(t.mesh.is_watertight());
        assert_eq!(t.mesh.euler_characteristic(), 2);
    }

    #[test]
    fn template_interior_contains_bone_midpoints() {
        let t = template();
        let sdf = MeshSdf::build(t.mesh.clone()).unwrap();
        for bone in &t.skeleton.bones {
            let mid = vec3::scale(vec3::add(bone.start, bone.end), 0.5);
            assert!(
                sdf.signed_distance(mid) < 0.0,
                "bone {} midpoint must be interior",
                bone.name
            );
        }
    }

    #[test]
    fn identities_share_topology_but_not_positions() {
        let t = template();
        let a = build_identity(&reference_spec(), &t).unwrap();
        let mut thinner = reference_spec();
        thinner.arm_radius *= 0.8;
        thinner.leg_radius *= 0.85;
        let b = build_identity(&thinner, &t).unwrap();
        assert_eq!(a.canonical.triangles, b.canonical.triangles);
        assert_eq!(a.canonical.vertices.len(), b.canonical.vertices.len());
        let moved = a
            .canonical
            .vertices
            .iter()
            .zip(&b.canonical.vertices)
            .filter(|(va, vb)| vec3::dist(**va, **vb) > 1e-9)
            .count();
        assert!(moved > a.canonical.vertices.len() / 4);
    }

    #[test]
    fn projected_vertices_lie_on_analytic_surface() {
        let t = template();
        let mut spec = reference_spec();
        spec.torso_radius *= 1.15;
        spec.arm_upper_length *= 0.9;
        let rig = build_identity(&spec, &t).unwrap();
        let worst = rig
            .canonical
            .vertices
            .iter()
            .map(|&v| rig.skeleton.signed_distance(v).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-7, "max |sdf| after projection = {worst}");
    }

    #[test]
    fn rest_pose_reproduces_canonical() {
        let t = template();
        let rig = build_identity(&reference_spec(), &t).unwrap();
        let posed = pose_identity(&rig, &PoseSpec::rest(rig.skeleton.bone_count())).unwrap();
        for (a, b) in rig.canonical.vertices.iter().zip(&posed.vertices) {
            assert!(vec3::dist(*a, *b) < 1e-12);
        }
        assert_eq!(rig.canonical.triangles, posed.triangles);
    }

    #[test]
    fn global_motion_is_exactly_rigid() {
        let t = template();
        let rig = build_identity(&reference_spec(), &t).unwrap();
        let mut pose = PoseSpec::rest(rig.skeleton.bone_count());
        pose.global_rotation = [0.0, 0.3, 0.1];
        pose.global_translation = [0.05, -0.02, 0.2];
        let posed = pose_identity(&rig, &pose).unwrap();
        let angle = vec3::norm(pose.global_rotation);
        let rot = crate::corpus::Rigid::rotation(pose.global_rotation, angle);
        for (v, q) in rig.canonical.vertices.iter().zip(&posed.vertices) {
            let expect = vec3::add(rot.apply(*v), pose.global_translation);
            assert!(vec3::dist(expect, *q) < 1e-10);
        }
    }

    #[test]
    fn elbow_bend_rotates_distal_forearm_rigidly() {
        let t = template();
        let rig = build_identity(&reference_spec(), &t).unwrap();
        let lower = rig
            .skeleton
            .bones
            .iter()
            .position(|b| b.name == "arm_lower_l")
            .unwrap();
        let elbow = rig.skeleton.bones[lower].start;
        let angle = std::f64::consts::FRAC_PI_2;
        let mut pose = PoseSpec::rest(rig.skeleton.bone_count());
        pose.joint_angles[lower] = angle;
        let posed = pose_identity(&rig, &pose).unwrap();
        let oracle = crate::corpus::Rigid::rotation_about([0.0, 0.0, 1.0], angle, elbow);

        // Vertices well beyond the elbow belong almost entirely to the
        // forearm bone, so skinning should match the rigid oracle closely.
        let clearance = 2.5 * rig.spec.arm_radius;
        let mut checked = 0usize;
        for (v, q) in rig.canonical.vertices.iter().zip(&posed.vertices) {
            if v[0] > elbow[0] + clearance {
                let expect = oracle.apply(*v);
                assert!(
                    vec3::dist(expect, *q) < 1e-3,
                    "distal vertex moved {} from rigid oracle",
                    vec3::dist(expect, *q)
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "expected a populated distal forearm region");
    }

    #[test]
    fn posed_mesh_stays_watertight() {
        let t = template();
        let rig = build_identity(&reference_spec(), &t).unwrap();
        let mut pose = PoseSpec::rest(rig.skeleton.bone_count());
        for (i, a) in pose.joint_angles.iter_mut().enumerate() {
            *a = if i % 2 == 0 { 0.5 } else { -0.4 };
        }
        let posed = pose_identity(&rig, &pose).unwrap();
        assert!(posed.is_watertight());
        assert_eq!(posed.euler_characteristic(), 2);
    }

    #[test]
    fn skin_weights_are_normalized_and_bone_dominant() {
        let t = template();
        let rig = build_identity(&reference_spec(), &t).unwrap();
        for w in rig.weights.iter().step_by(97) {
            let sum: f64 = w.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
        // A vertex near the left wrist should be owned by the left forearm.
        let lower = rig
            .skeleton
            .bones
            .iter()
            .position(|b| b.name == "arm_lower_l")
            .unwrap();
        let wrist = rig.skeleton.bones[lower].end;
        let (vi, _) = rig
            .canonical
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (i, vec3::dist2(*v, wrist)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!(rig.weights[vi][lower] > 0.99);
    }
}
